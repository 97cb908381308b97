"""Per-batch augmentation: dihedral transforms and style augmentation.

Geometric transforms act jointly on image and mask. Style augmentation only
ever touches images: a random number k of the batch is stylised, with k drawn
once per mini-batch from the policy's ratio law.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import Sample
from .errors import ConfigError
from .stylizer import (
    StylePrior,
    Stylizer,
    blend_embeddings,
    predict_style_embeddings,
    sample_style_embedding,
    stylize_images,
)

RATIO_LAWS = ("uniform", "binomial", "all")


@dataclass(frozen=True)
class GeometricTransform:
    """Counter-clockwise quarter turns, then optional left-right and up-down flips."""

    quarter_turns: int = 0
    flip_h: bool = False
    flip_v: bool = False

    def __post_init__(self):
        if self.quarter_turns not in (0, 1, 2, 3):
            raise ValueError(f"quarter_turns must be in 0..3, got {self.quarter_turns}")

    def apply(self, arr: np.ndarray) -> np.ndarray:
        out = np.rot90(arr, self.quarter_turns, axes=(0, 1))
        if self.flip_h:
            out = out[:, ::-1]
        if self.flip_v:
            out = out[::-1]
        return np.ascontiguousarray(out)

    def invert(self, arr: np.ndarray) -> np.ndarray:
        out = arr
        if self.flip_v:
            out = out[::-1]
        if self.flip_h:
            out = out[:, ::-1]
        return np.ascontiguousarray(np.rot90(out, -self.quarter_turns, axes=(0, 1)))


ALL_TRANSFORMS = tuple(
    GeometricTransform(k, h, v) for k in range(4) for h in (False, True) for v in (False, True)
)


@dataclass(frozen=True)
class AugmentationPolicy:
    geometric_enabled: bool = True
    style_enabled: bool = False
    alpha: float = 0.5
    ratio_law: str = "uniform"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.ratio_law not in RATIO_LAWS:
            raise ValueError(f"ratio_law must be one of {RATIO_LAWS}, got {self.ratio_law!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def apply_geometric(sample: Sample, t: GeometricTransform) -> Sample:
    return Sample(t.apply(sample.image), t.apply(sample.mask), sample.id, dict(sample.meta))


def invert_geometric(sample: Sample, t: GeometricTransform) -> Sample:
    return Sample(t.invert(sample.image), t.invert(sample.mask), sample.id, dict(sample.meta))


def draw_geometric(rng: np.random.Generator) -> GeometricTransform:
    k = int(rng.integers(0, 4))
    flips = rng.random(2) < 0.5
    return GeometricTransform(k, bool(flips[0]), bool(flips[1]))


def draw_stylization_count(batch_size: int, policy: AugmentationPolicy, rng: np.random.Generator) -> int:
    """Number of batch members to stylise; never consumes ``rng`` when style is off."""
    if batch_size < 0:
        raise ValueError("batch_size must be >= 0")
    if not policy.style_enabled or batch_size == 0:
        return 0
    if policy.ratio_law == "uniform":
        return int(rng.integers(0, batch_size + 1))
    if policy.ratio_law == "binomial":
        return int(rng.binomial(batch_size, 0.5))
    return batch_size


def augment_batch(
    batch: list[Sample],
    policy: AugmentationPolicy,
    stylizer: Stylizer | None = None,
    prior: StylePrior | None = None,
    rng: np.random.Generator | None = None,
) -> list[Sample]:
    """Stylise a random k-subset of the batch, then transform each sample.

    Random draws happen in a fixed order: k, the subset, one prior sample per
    chosen index (ascending), then one geometric transform per sample. Output
    samples record ``meta["stylized"]`` and ``meta["geometric"]``.
    """
    if rng is None:
        rng = np.random.default_rng()
    if policy.style_enabled and (stylizer is None or prior is None):
        raise ConfigError("style augmentation needs both a stylizer and a style prior")
    if batch and len({s.image.shape for s in batch}) > 1:
        raise ValueError("all samples in a batch must share dimensions")

    out = [Sample(s.image, s.mask, s.id, dict(s.meta)) for s in batch]
    for s in out:
        s.meta["stylized"] = False

    k = draw_stylization_count(len(batch), policy, rng)
    if k > 0:
        chosen = np.sort(rng.choice(len(batch), size=k, replace=False))
        styles = np.stack([sample_style_embedding(prior, rng) for _ in chosen])
        images = [batch[i].image for i in chosen]
        content = predict_style_embeddings(stylizer, images)
        blended = np.stack([blend_embeddings(c, z, policy.alpha) for c, z in zip(content, styles)])
        for i, im in zip(chosen, stylize_images(stylizer, images, blended)):
            out[i] = Sample(im.astype(np.float32), batch[i].mask, batch[i].id, out[i].meta)
            out[i].meta["stylized"] = True

    if policy.geometric_enabled:
        for i, s in enumerate(out):
            t = draw_geometric(rng)
            out[i] = apply_geometric(s, t)
            out[i].meta["geometric"] = t
    return out
