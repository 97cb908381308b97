# %% [markdown]
# # Calibrating the stylizer
#
# The stylizer is a small conditional-instance-norm network. Calibration fits
# it to reconstruct images from their own embedding, on the training pool plus
# a procedural corpus that widens the style prior.

# %%
import matplotlib.pyplot as plt

from styleaug.dataset import SyntheticSpec, generate_synthetic
from styleaug.experiment import stylization_grid
from styleaug.stylizer import (
    CalibrationConfig,
    calibrate_stylizer,
    fit_prior,
    procedural_style_corpus,
    reconstruction_psnr,
)

train, val, test = generate_synthetic(SyntheticSpec())
pool = [s.image for s in train] + [s.image for s in val]
corpus = procedural_style_corpus(100, 64, seed=1)

# %%
# about two minutes on one core
stylizer = calibrate_stylizer(pool + corpus, CalibrationConfig(steps=800))
prior = fit_prior(stylizer, pool + corpus, inflation=4.0)
print(f"self-reconstruction PSNR {reconstruction_psnr(stylizer, pool):.2f} dB")

# %% [markdown]
# One training image and random styles at alpha 0.5, the default strength.

# %%
grid = stylization_grid(stylizer, prior, train[0].image, n_styles=4, alpha=0.5,
                        seed=0)
plt.figure(figsize=(10, 2.5))
plt.imshow(grid)
plt.axis("off")

# %%
for alpha in (0.0, 0.25, 0.5, 1.0):
    g = stylization_grid(stylizer, prior, train[0].image, n_styles=3, alpha=alpha,
                         seed=1)
    plt.figure(figsize=(8, 2))
    plt.imshow(g)
    plt.title(f"alpha={alpha}")
    plt.axis("off")
