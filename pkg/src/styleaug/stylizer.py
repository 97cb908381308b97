"""Embedding-conditioned style transfer used for style augmentation.

A small predictor maps an image to a style embedding; a renderer re-draws the
image with conditional instance normalisation whose per-channel scale and
shift are affine in that embedding. Random styles come from a Gaussian prior
over embeddings, blended with the image's own embedding at strength alpha.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from ._torch import image_batch_to_tensor, seeded, tensor_to_images

log = logging.getLogger(__name__)

WEIGHTS_FORMAT_VERSION = 1
MIN_SIZE = 8


# --------------------------------------------------------------------------- #
# prior

class StylePrior:
    """Gaussian prior N(mean, covariance) over style embeddings."""

    def __init__(self, mean, covariance, atol: float = 1e-8):
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(covariance, dtype=np.float64)
        d = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (d, d):
            raise ValueError(f"inconsistent prior shapes: mean {mean.shape}, covariance {cov.shape}")
        if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(mean)):
            raise ValueError("prior parameters must be finite")
        if not np.allclose(cov, cov.T, atol=atol):
            raise ValueError("covariance must be symmetric")
        w, v = np.linalg.eigh(cov)
        scale = max(1.0, float(np.abs(w).max()))
        if w.min() < -atol * scale:
            raise ValueError(f"covariance is not positive semi-definite (min eigenvalue {w.min():.3g})")
        self.mean = mean
        self.covariance = cov
        # L @ L.T == covariance, also for singular covariances
        self.factor = v * np.sqrt(np.clip(w, 0.0, None))[None, :]

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def to_dict(self) -> dict:
        return {"dim": self.dim, "mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "StylePrior":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read prior file {path}: {exc}") from exc
        prior = cls(d["mean"], d["covariance"])
        if prior.dim != d.get("dim", prior.dim):
            raise ValueError(f"prior file dim {d['dim']} does not match mean length {prior.dim}")
        return prior


def sample_style_embedding(prior: StylePrior, rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal(prior.dim)
    return prior.mean + prior.factor @ u


def blend_embeddings(content, style, alpha: float) -> np.ndarray:
    """alpha * style + (1 - alpha) * content."""
    content = np.asarray(content, dtype=np.float64)
    style = np.asarray(style, dtype=np.float64)
    if content.shape != style.shape:
        raise ValueError(f"embedding dimensions differ: {content.shape} vs {style.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return content.copy()
    if alpha == 1.0:
        return style.copy()
    return alpha * style + (1.0 - alpha) * content


# --------------------------------------------------------------------------- #
# networks

class CondInstanceNorm(nn.Module):
    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.to_scale = nn.Linear(dim, channels)
        self.to_shift = nn.Linear(dim, channels)
        nn.init.zeros_(self.to_scale.weight)
        nn.init.zeros_(self.to_scale.bias)

    def forward(self, x, z):
        scale = 1.0 + self.to_scale(z)[:, :, None, None]
        shift = self.to_shift(z)[:, :, None, None]
        return self.norm(x) * scale + shift


class StylePredictor(nn.Module):
    def __init__(self, dim: int, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.head = nn.Linear(4 * width, dim)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


class StyleRenderer(nn.Module):
    def __init__(self, dim: int, width: int = 16):
        super().__init__()
        w = width
        self.conv_in = nn.Conv2d(3, w, 3, padding=1)
        self.norm_in = CondInstanceNorm(w, dim)
        self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.norm_down = CondInstanceNorm(2 * w, dim)
        self.res_a = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.norm_a = CondInstanceNorm(2 * w, dim)
        self.res_b = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.norm_b = CondInstanceNorm(2 * w, dim)
        self.up = nn.Conv2d(2 * w, w, 3, padding=1)
        self.norm_up = CondInstanceNorm(w, dim)
        self.conv_out = nn.Conv2d(w, 3, 3, padding=1)

    def forward(self, x, z):
        size = x.shape[-2:]
        h = F.relu(self.norm_in(self.conv_in(x), z))
        h = F.relu(self.norm_down(self.down(h), z))
        r = F.relu(self.norm_a(self.res_a(h), z))
        h = h + self.norm_b(self.res_b(r), z)
        h = F.interpolate(h, size=size, mode="nearest")
        h = F.relu(self.norm_up(self.up(h), z))
        return torch.sigmoid(self.conv_out(h))


class Stylizer(nn.Module):
    """Predictor + renderer pair sharing embedding dimension ``d``."""

    def __init__(self, d: int = 100, width: int = 16):
        super().__init__()
        if d < 1:
            raise ValueError("embedding dimension must be >= 1")
        self.d = d
        self.width = width
        self.predictor = StylePredictor(d, width)
        self.renderer = StyleRenderer(d, width)
        self.history: list[float] = []

    def reconstruct(self, x):
        return self.renderer(x, self.predictor(x))

    def manifest(self) -> dict:
        return {
            "format_version": WEIGHTS_FORMAT_VERSION,
            "d": self.d,
            "width": self.width,
            "layers": {k: list(v.shape) for k, v in self.state_dict().items()},
        }

    def save(self, path) -> None:
        torch.save({"manifest": self.manifest(), "state_dict": self.state_dict(),
                    "history": list(self.history)}, path)

    @classmethod
    def load(cls, path) -> "Stylizer":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"stylizer weights not found: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=True)
        manifest = blob["manifest"]
        if manifest.get("format_version") != WEIGHTS_FORMAT_VERSION:
            raise ConfigError(f"unsupported stylizer weights version {manifest.get('format_version')}")
        model = cls(manifest["d"], manifest["width"])
        expected = {k: list(v.shape) for k, v in model.state_dict().items()}
        if expected != manifest["layers"]:
            raise ConfigError("stylizer weights do not match their manifest")
        model.load_state_dict(blob["state_dict"])
        model.history = list(blob.get("history", []))
        return model.eval()


def build_stylizer(d: int = 100, seed: int = 0, width: int = 16) -> Stylizer:
    with seeded(seed):
        return Stylizer(d, width).eval()


# --------------------------------------------------------------------------- #
# inference

def _check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    if min(image.shape[:2]) < MIN_SIZE:
        raise ValueError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {image.shape[:2]}")


@torch.no_grad()
def predict_style_embeddings(stylizer: Stylizer, images: list[np.ndarray]) -> np.ndarray:
    for im in images:
        _check_image(im)
    x = image_batch_to_tensor(images)
    return stylizer.predictor(x).double().numpy()


def predict_style_embedding(stylizer: Stylizer, image: np.ndarray) -> np.ndarray:
    return predict_style_embeddings(stylizer, [image])[0]


@torch.no_grad()
def stylize_images(stylizer: Stylizer, images: list[np.ndarray], embeddings) -> list[np.ndarray]:
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if embeddings.shape[1] != stylizer.d:
        raise ValueError(f"embedding dimension {embeddings.shape[1]} != stylizer dimension {stylizer.d}")
    for im in images:
        _check_image(im)
    out = stylizer.renderer(image_batch_to_tensor(images), torch.from_numpy(embeddings).float())
    return [np.clip(im, 0.0, 1.0) for im in tensor_to_images(out)]


def stylize_image(stylizer: Stylizer, image: np.ndarray, embedding) -> np.ndarray:
    embedding = np.asarray(embedding)
    if embedding.ndim != 1:
        raise ValueError("expected a single embedding vector")
    return stylize_images(stylizer, [image], embedding[None, :])[0]


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak ** 2 / mse)


def reconstruction_psnr(stylizer: Stylizer, images: list[np.ndarray]) -> float:
    """Mean PSNR of ``stylize(x, predict(x))`` against ``x``."""
    z = predict_style_embeddings(stylizer, images)
    recon = stylize_images(stylizer, images, z)
    return float(np.mean([psnr(r, x) for r, x in zip(recon, images)]))


# --------------------------------------------------------------------------- #
# style corpus

def procedural_style_corpus(n: int, size: int = 64, seed: int = 0) -> list[np.ndarray]:
    """Random colour/texture images used as a stand-in for a painting collection.

    Each image is a random base colour, a smooth two-colour field, up to three
    coloured oriented gratings and uniform noise, clipped to [0, 1].
    """
    rng = np.random.default_rng(seed)
    c = (np.arange(size, dtype=np.float64) + 0.5) / size
    x, y = c[None, :], c[:, None]
    out = []
    for _ in range(n):
        base = rng.uniform(0.1, 0.9, size=3)
        other = rng.uniform(0.1, 0.9, size=3)
        theta = rng.uniform(0, np.pi)
        blend = 0.5 + 0.5 * np.sin(
            2 * np.pi * rng.uniform(0.3, 1.5) * (x * np.cos(theta) + y * np.sin(theta))
            + rng.uniform(0, 2 * np.pi))
        img = base * (1 - blend[..., None]) + other * blend[..., None]
        for _ in range(int(rng.integers(1, 4))):
            freq = rng.uniform(1.0, 32.0)
            t = rng.uniform(0, np.pi)
            wave = np.sin(2 * np.pi * freq * (x * np.cos(t) + y * np.sin(t)) + rng.uniform(0, 2 * np.pi))
            img = img + rng.uniform(0.0, 0.25) * wave[..., None] * rng.uniform(-1, 1, size=3)
        img = img + rng.uniform(-1, 1, size=(size, size, 3)) * rng.uniform(0.0, 0.15)
        out.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return out


# --------------------------------------------------------------------------- #
# calibration

@dataclass
class CalibrationConfig:
    steps: int = 800
    batch: int = 8
    learning_rate: float = 2e-3
    seed: int = 0
    d: int = 100
    width: int = 16
    log_every: int = 50

    def to_dict(self) -> dict:
        return asdict(self)


def calibrate_stylizer(images: list[np.ndarray], config: CalibrationConfig | None = None) -> Stylizer:
    """Fit predictor and renderer jointly on self-reconstruction MSE.

    Minibatches are drawn with replacement from ``images`` and randomly
    rotated/flipped. The per-step loss is kept in ``stylizer.history``.
    """
    config = config or CalibrationConfig()
    if len(images) == 0:
        raise ValueError("calibrate_stylizer needs at least one image")
    for im in images:
        _check_image(im)
    stylizer = build_stylizer(config.d, config.seed, config.width)
    if config.steps <= 0:
        return stylizer

    rng = np.random.default_rng(config.seed)
    data = image_batch_to_tensor(images)
    opt = torch.optim.Adam(stylizer.parameters(), lr=config.learning_rate)
    stylizer.train()
    history = []
    for step in range(config.steps):
        idx = rng.integers(0, len(images), size=config.batch)
        x = data[torch.from_numpy(idx)]
        k = int(rng.integers(0, 4))
        if k:
            x = torch.rot90(x, k, dims=(2, 3))
        if rng.random() < 0.5:
            x = torch.flip(x, dims=(3,))
        loss = F.mse_loss(stylizer.reconstruct(x), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if config.log_every and (step + 1) % config.log_every == 0:
            log.info("calibration step %d/%d mse %.5f", step + 1, config.steps, history[-1])
    stylizer.history = history
    return stylizer.eval()


def fit_prior(stylizer: Stylizer, images: list[np.ndarray], inflation: float = 4.0) -> StylePrior:
    """N(mean, inflation * cov) of the predicted embeddings of ``images``."""
    if inflation < 0:
        raise ValueError("inflation must be >= 0")
    z = predict_style_embeddings(stylizer, images)
    mean = z.mean(axis=0)
    cov = np.cov(z, rowvar=False, bias=False) if len(z) > 1 else np.zeros((z.shape[1],) * 2)
    cov = np.atleast_2d(cov)
    cov = 0.5 * (cov + cov.T)
    return StylePrior(mean, inflation * cov)
