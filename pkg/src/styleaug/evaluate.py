"""Binary segmentation metrics and the Monte-Carlo-dropout test protocol."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ._torch import image_batch_to_tensor, make_generator
from .dataset import Dataset
from .segnet import forward


def binarize(probabilities, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(probabilities) >= threshold).astype(np.uint8)


def _counts(pred, truth):
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    inter = int(np.count_nonzero(pred & truth))
    return inter, int(np.count_nonzero(pred)), int(np.count_nonzero(truth))


def iou(pred, truth) -> float:
    """|pred & truth| / |pred | truth|, 1.0 when both masks are empty."""
    inter, p, t = _counts(pred, truth)
    union = p + t - inter
    return 1.0 if union == 0 else inter / union


def dice(pred, truth) -> float:
    """2 |pred & truth| / (|pred| + |truth|), 1.0 when both masks are empty."""
    inter, p, t = _counts(pred, truth)
    return 1.0 if p + t == 0 else 2.0 * inter / (p + t)


def pooled_scores(preds, truths) -> tuple[float, float]:
    """IoU and Dice with pixels pooled over all images (alternative aggregation)."""
    inter = p = t = 0
    for a, b in zip(preds, truths):
        i, pa, tb = _counts(a, b)
        inter, p, t = inter + i, p + pa, t + tb
    union = p + t - inter
    return (1.0 if union == 0 else inter / union), (1.0 if p + t == 0 else 2.0 * inter / (p + t))


@dataclass
class InstanceMetrics:
    iou: list[float]
    dice: list[float]
    mean_iou: float
    mean_dice: float


@dataclass
class MetricsReport:
    per_instance: list[InstanceMetrics]
    mean_iou: float
    mean_dice: float
    std_iou: float
    std_dice: float
    n_instances: int
    threshold: float
    aggregation: str = "per-image"
    ensemble: bool = False
    empty_pairs: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def instance_seed(seed: int, instance: int) -> int:
    return int(np.random.SeedSequence([seed, instance]).generate_state(1)[0])


@torch.no_grad()
def predict_probabilities(model, images, mode="eval", rng=None, batch_size: int = 8) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        x = image_batch_to_tensor(images[i:i + batch_size])
        out.append(torch.sigmoid(forward(model, x, mode, rng)).numpy())
    return np.concatenate(out)


def mc_dropout_evaluate(
    model,
    test: Dataset,
    n_instances: int = 20,
    threshold: float = 0.5,
    seed: int = 0,
    aggregation: str = "per-image",
    ensemble: bool = False,
    keep_predictions: bool = False,
):
    """Score ``n_instances`` dropout-perturbed copies of ``model`` on ``test``.

    Each instance runs in ``mc-dropout`` mode with its own seed derived from
    ``(seed, instance)``. Metrics are computed per image, averaged over images
    (or pooled over pixels with ``aggregation="pooled"``), then averaged over
    instances. ``ensemble=True`` instead averages the instances' probabilities
    and scores that single prediction.

    Returns the report, plus the per-instance binary predictions when
    ``keep_predictions`` is set.
    """
    if len(test) == 0:
        raise ValueError("test set is empty")
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    if aggregation not in ("per-image", "pooled"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    images = [s.image for s in test]
    truths = [s.mask for s in test]

    probs = [
        predict_probabilities(model, images, "mc-dropout", make_generator(instance_seed(seed, i)))
        for i in range(n_instances)
    ]
    if ensemble:
        probs = [np.mean(probs, axis=0)]
    preds = [binarize(p, threshold) for p in probs]

    per_instance = []
    for pred in preds:
        ious = [iou(a, b) for a, b in zip(pred, truths)]
        dices = [dice(a, b) for a, b in zip(pred, truths)]
        if aggregation == "pooled":
            mi, md = pooled_scores(pred, truths)
        else:
            mi, md = float(np.mean(ious)), float(np.mean(dices))
        per_instance.append(InstanceMetrics(ious, dices, mi, md))

    mi = np.array([m.mean_iou for m in per_instance])
    md = np.array([m.mean_dice for m in per_instance])
    report = MetricsReport(
        per_instance=per_instance,
        mean_iou=float(mi.mean()),
        mean_dice=float(md.mean()),
        # shifted so identical instances give exactly 0
        std_iou=float((mi - mi[0]).std()),
        std_dice=float((md - md[0]).std()),
        n_instances=n_instances,
        threshold=threshold,
        aggregation=aggregation,
        ensemble=ensemble,
        empty_pairs=sum(int(not np.any(p) and not np.any(t)) for p, t in zip(preds[0], truths)),
        config={"seed": seed, "n_instances": n_instances, "threshold": threshold,
                "aggregation": aggregation, "ensemble": ensemble, "test_ids": test.ids},
    )
    if keep_predictions:
        return report, preds
    return report
