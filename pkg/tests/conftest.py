import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    from styleaug.dataset import SyntheticSpec

    return SyntheticSpec(image_size=32, n_train=6, n_val=2, n_test=3,
                         ellipse_radius_range=(3.0, 6.0), seed=7)


@pytest.fixture(scope="session")
def small_data(small_spec):
    from styleaug.dataset import generate_synthetic

    return generate_synthetic(small_spec)


@pytest.fixture(scope="session")
def small_stylizer(small_data):
    """A briefly calibrated low-dimensional stylizer and its prior."""
    from styleaug.stylizer import CalibrationConfig, calibrate_stylizer, fit_prior

    images = [s.image for s in small_data[0]]
    st = calibrate_stylizer(images, CalibrationConfig(steps=30, batch=4, d=8, width=8, seed=0))
    return st, fit_prior(st, images)
