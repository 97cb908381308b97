"""Compact UNeXt-style segmentation network.

Three convolutional encoder stages are followed by tokenised-MLP stages; the
decoder mirrors the encoder and adds skip connections. Every stage carries a
dropout layer driven by an explicit ``torch.Generator`` so that training and
Monte-Carlo-dropout inference are reproducible.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._torch import make_generator, seeded

PRESETS = {
    "full": (32, 64, 128, 160, 256),
    "tiny": (8, 16, 32, 48, 64),
}
MODES = ("train", "eval", "mc-dropout")
CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class SegNetConfig:
    stage_channels: tuple[int, ...] = PRESETS["tiny"]
    mlp_stages: int = 2
    dropout_rate: float = 0.10
    input_channels: int = 3
    output_channels: int = 1
    mlp_ratio: int = 2
    token_mixer: str = "plain"  # or "shifted"
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 5:
            raise ValueError("stage_channels needs exactly 5 entries")
        if min(self.stage_channels) <= 0:
            raise ValueError("stage_channels must be strictly positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not 0 <= self.mlp_stages <= 2:
            raise ValueError("mlp_stages must be 0, 1 or 2")
        if self.token_mixer not in ("plain", "shifted"):
            raise ValueError(f"unknown token_mixer {self.token_mixer!r}")
        if self.output_channels != 1:
            raise ValueError("only single-logit binary heads are supported")

    @classmethod
    def preset(cls, name: str, **kw) -> "SegNetConfig":
        try:
            return cls(stage_channels=PRESETS[name], **kw)
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d


class SeededDropout(nn.Module):
    """Element-wise inverted dropout that draws from ``self.generator``."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.active = False
        self.generator: torch.Generator | None = None

    def forward(self, x):
        if not self.active or self.p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype) >= self.p
        return x * keep / (1.0 - self.p)


class ConvStage(nn.Module):
    def __init__(self, cin, cout, p):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(cout)
        self.drop = SeededDropout(p)

    def forward(self, x):
        x = F.gelu(self.bn1(self.conv1(x)))
        x = F.gelu(self.bn2(self.conv2(x)))
        return self.drop(x)


def _shift(x, dim, n_groups=5):
    # x: B, C, H, W; roll channel groups by -2..2 along one spatial axis
    chunks = torch.chunk(x, n_groups, dim=1)
    offsets = range(-(n_groups // 2), n_groups // 2 + 1)
    return torch.cat([torch.roll(c, o, dims=dim) for c, o in zip(chunks, offsets)], dim=1)


class TokenMLP(nn.Module):
    """Per-token MLP with a depth-wise convolution between the two linears."""

    def __init__(self, dim, ratio, p, shifted=False):
        super().__init__()
        hidden = dim * ratio
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = SeededDropout(p)
        self.shifted = shifted

    def forward(self, x):
        b, c, h, w = x.shape
        y = self.norm(x.permute(0, 2, 3, 1))
        if self.shifted:
            y = _shift(y.permute(0, 3, 1, 2), 2).permute(0, 2, 3, 1)
        y = self.fc1(y).permute(0, 3, 1, 2)
        y = F.gelu(self.dw(y))
        if self.shifted:
            y = _shift(y, 3)
        y = self.fc2(y.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return x + self.drop(y)


class MLPStage(nn.Module):
    def __init__(self, cin, cout, p, ratio, shifted, downsample=True):
        super().__init__()
        stride = 2 if downsample else 1
        self.embed = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.bn = nn.BatchNorm2d(cout)
        self.block = TokenMLP(cout, ratio, p, shifted)

    def forward(self, x):
        return self.block(F.gelu(self.bn(self.embed(x))))


class UpStage(nn.Module):
    def __init__(self, cin, cout, p, mlp=None):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn = nn.BatchNorm2d(cout)
        self.mlp = mlp
        self.drop = SeededDropout(p)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = F.gelu(self.bn(self.conv(x))) + skip
        if self.mlp is not None:
            x = self.mlp(x)
        return self.drop(x)


class UNeXtLite(nn.Module):
    n_down = 4

    def __init__(self, config: SegNetConfig):
        super().__init__()
        c1, c2, c3, c4, c5 = config.stage_channels
        p, r, sh = config.dropout_rate, config.mlp_ratio, config.token_mixer == "shifted"
        self.config = config
        self.enc1 = ConvStage(config.input_channels, c1, p)
        self.enc2 = ConvStage(c1, c2, p)
        self.enc3 = ConvStage(c2, c3, p)
        # the deepest `mlp_stages` stages use token MLPs, the rest fall back to convolutions
        self.enc4 = MLPStage(c3, c4, p, r, sh) if config.mlp_stages >= 2 else _PooledConv(c3, c4, p)
        self.enc5 = MLPStage(c4, c5, p, r, sh) if config.mlp_stages >= 1 else _PooledConv(c4, c5, p)
        self.dec4 = UpStage(c5, c4, p, TokenMLP(c4, r, p, sh) if config.mlp_stages >= 2 else None)
        self.dec3 = UpStage(c4, c3, p)
        self.dec2 = UpStage(c3, c2, p)
        self.dec1 = UpStage(c2, c1, p)
        self.head = nn.Conv2d(c1, config.output_channels, 1)

    def forward(self, x):
        s1 = self.enc1(x)
        s2 = self.enc2(F.max_pool2d(s1, 2))
        s3 = self.enc3(F.max_pool2d(s2, 2))
        s4 = self.enc4(s3)
        s5 = self.enc5(s4)
        d = self.dec4(s5, s4)
        d = self.dec3(d, s3)
        d = self.dec2(d, s2)
        d = self.dec1(d, s1)
        return self.head(d)[:, 0]

    def dropout_layers(self) -> list[SeededDropout]:
        return [m for m in self.modules() if isinstance(m, SeededDropout)]


class _PooledConv(nn.Module):
    def __init__(self, cin, cout, p):
        super().__init__()
        self.stage = ConvStage(cin, cout, p)

    def forward(self, x):
        return self.stage(F.max_pool2d(x, 2))


Model = UNeXtLite


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(config: SegNetConfig | None = None) -> UNeXtLite:
    config = config or SegNetConfig()
    with seeded(config.seed):
        model = UNeXtLite(config)
    model.manifest = {
        "config": config.to_dict(),
        "parameter_count": count_parameters(model),
        "required_multiple": 2 ** UNeXtLite.n_down,
    }
    return model.eval()


def forward(model: UNeXtLite, images: torch.Tensor, mode: str = "eval", rng=None) -> torch.Tensor:
    """Logits of shape (N, H, W) for an (N, 3, H, W) batch.

    ``train`` uses batch statistics and dropout; ``mc-dropout`` uses running
    statistics with dropout on; ``eval`` is deterministic. ``rng`` may be a
    ``torch.Generator`` or an int seed.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    if images.ndim != 4:
        raise ValueError(f"expected an (N, C, H, W) batch, got shape {tuple(images.shape)}")
    multiple = 2 ** model.n_down
    h, w = images.shape[-2:]
    if h % multiple or w % multiple:
        raise ValueError(f"input height and width must be multiples of {multiple}, got {h}x{w}")
    if isinstance(rng, int):
        rng = make_generator(rng)
    model.train(mode == "train")
    stochastic = mode != "eval"
    for layer in model.dropout_layers():
        layer.active = stochastic
        layer.generator = rng
    try:
        return model(images)
    finally:
        for layer in model.dropout_layers():
            layer.active = False
            layer.generator = None


# --------------------------------------------------------------------------- #
# checkpoints

def save_checkpoint(model: UNeXtLite, path, epoch: int, best_val_iou: float, extra: dict | None = None):
    torch.save({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "epoch": int(epoch),
        "best_val_iou": float(best_val_iou),
        "extra": extra or {},
    }, path)


def load_checkpoint(path) -> tuple[UNeXtLite, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('format_version')}")
    model = build_model(SegNetConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    meta = {k: blob[k] for k in ("epoch", "best_val_iou", "extra", "config")}
    return model.eval(), meta
