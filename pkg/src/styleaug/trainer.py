"""Seeded training loop with per-epoch validation and best-IoU checkpointing."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ._torch import image_batch_to_tensor, make_generator, mask_batch_to_tensor
from .augment import AugmentationPolicy, augment_batch
from .dataset import Dataset
from .errors import ConfigError, TrainingDivergedError
from .evaluate import binarize, iou
from .segnet import forward, save_checkpoint

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_iou")


@dataclass
class TrainConfig:
    batch_size: int = 4
    epochs: int = 2000
    learning_rate: float = 1e-4
    bce_weight: float = 0.5
    dice_weight: float = 1.0
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0
    val_every: int = 1

    def __post_init__(self):
        if isinstance(self.policy, dict):
            self.policy = AugmentationPolicy(**self.policy)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")

    @property
    def loss_weights(self) -> tuple[float, float]:
        return self.bce_weight, self.dice_weight

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = {"kind": "adam", "learning_rate": self.learning_rate}
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_iou: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_iou: float
    checkpoint_path: Path | None
    best_state: dict = field(default_factory=dict, repr=False)
    seconds: float = 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.history])


def compute_loss(logits: torch.Tensor, masks: torch.Tensor, weights=(0.5, 1.0)) -> torch.Tensor:
    """bce_w * BCE + dice_w * (1 - soft Dice), each averaged over the batch.

    soft Dice uses +1 smoothing in numerator and denominator.
    """
    if logits.shape != masks.shape:
        raise ValueError(f"logits shape {tuple(logits.shape)} != masks shape {tuple(masks.shape)}")
    bce_w, dice_w = weights
    masks = masks.to(logits.dtype)
    dims = tuple(range(1, logits.ndim))
    bce = F.binary_cross_entropy_with_logits(logits, masks, reduction="none").mean(dim=dims)
    p = torch.sigmoid(logits)
    soft = (2 * (p * masks).sum(dim=dims) + 1) / (p.sum(dim=dims) + masks.sum(dim=dims) + 1)
    return (bce_w * bce + dice_w * (1 - soft)).mean()


@torch.no_grad()
def validation_pass(model, val: Dataset, weights=(0.5, 1.0), batch_size: int = 4, threshold: float = 0.5):
    """Deterministic (eval-mode) loss and mean per-image IoU on ``val``."""
    if len(val) == 0:
        raise ValueError("validation set is empty")
    total, ious = 0.0, []
    for i in range(0, len(val), batch_size):
        chunk = val.samples[i:i + batch_size]
        logits = forward(model, image_batch_to_tensor([s.image for s in chunk]), "eval")
        masks = mask_batch_to_tensor([s.mask for s in chunk])
        total += float(compute_loss(logits, masks, weights)) * len(chunk)
        probs = torch.sigmoid(logits).numpy()
        ious.extend(iou(binarize(p, threshold), s.mask) for p, s in zip(probs, chunk))
    return total / len(val), float(np.mean(ious))


def write_history(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_COLUMNS)
        for r in history:
            w.writerow([int(r.epoch)] + [repr(float(v)) for v in (r.train_loss, r.val_loss, r.val_iou)])


def read_history(path) -> list[EpochRecord]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or tuple(reader.fieldnames) != HISTORY_COLUMNS:
            raise ValueError(f"{path}: expected columns {HISTORY_COLUMNS}, got {reader.fieldnames}")
        return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                            float(r["val_iou"])) for r in reader]


def train(model, train_set: Dataset, val_set: Dataset, config: TrainConfig,
          stylizer=None, prior=None, run_dir=None) -> TrainResult:
    """Train ``model`` in place and return its loss history.

    One numpy stream (seeded by ``config.seed``) drives shuffling and
    augmentation; a torch generator with the same seed drives dropout. The
    checkpoint in ``run_dir`` is overwritten whenever validation IoU strictly
    improves; the best weights are also kept in ``TrainResult.best_state``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be nonempty")
    policy = config.policy
    if policy.style_enabled and (stylizer is None or prior is None):
        raise ConfigError("style augmentation needs both a stylizer and a style prior")

    ckpt = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
        ckpt = run_dir / "best.ckpt"

    rng = np.random.default_rng(config.seed)
    gen = make_generator(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    weights = config.loss_weights

    history: list[EpochRecord] = []
    best_iou, best_epoch, best_state = -1.0, 0, {}
    val_loss = val_iou = float("nan")
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        running, seen = 0.0, 0
        for b in range(0, len(order), config.batch_size):
            batch = [train_set.samples[i] for i in order[b:b + config.batch_size]]
            batch = augment_batch(batch, policy, stylizer, prior, rng)
            x = image_batch_to_tensor([s.image for s in batch])
            y = mask_batch_to_tensor([s.mask for s in batch])
            loss = compute_loss(forward(model, x, "train", gen), y, weights)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, f"loss {float(loss.detach())} at batch {b // config.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss.detach()) * len(batch)
            seen += len(batch)
        train_loss = running / seen

        if epoch % config.val_every == 0 or epoch == 1 or epoch == config.epochs:
            val_loss, val_iou = validation_pass(model, val_set, weights, config.batch_size)
            if not math.isfinite(val_loss):
                raise TrainingDivergedError(epoch, "non-finite validation loss")
            if val_iou > best_iou:
                best_iou, best_epoch = val_iou, epoch
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                if ckpt is not None:
                    save_checkpoint(model, ckpt, epoch, val_iou,
                                    {"train_config": config.to_dict()})
        history.append(EpochRecord(epoch, train_loss, val_loss, val_iou))
        if epoch % 25 == 0 or epoch == config.epochs:
            log.info("epoch %d train %.4f val %.4f iou %.4f", epoch, train_loss, val_loss, val_iou)

    if run_dir is not None:
        write_history(history, run_dir / "history.csv")
    return TrainResult(history, best_epoch, best_iou, ckpt, best_state,
                       time.perf_counter() - start)
