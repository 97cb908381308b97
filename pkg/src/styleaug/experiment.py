"""Paired with/without style-augmentation experiments and their figures.

A run trains both arms on every seed with the same split and the same
initial weights, scores each best checkpoint with MC dropout and writes

    <out>/<name>/report.json, table.txt, stylizer.pt, prior.json
    <out>/<name>/<seed>/pairing.json
    <out>/<name>/<seed>/<arm>/history.csv, best.ckpt, config.json, metrics.json
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._torch import deterministic_mode, state_hash
from .augment import AugmentationPolicy
from .dataset import Dataset, SyntheticSpec, generate_synthetic, load_dataset, split_train_val
from .errors import ConfigError, DataError, TrainingDivergedError
from .evaluate import mc_dropout_evaluate
from .segnet import SegNetConfig, build_model, load_checkpoint
from .stylizer import (
    CalibrationConfig,
    StylePrior,
    Stylizer,
    blend_embeddings,
    calibrate_stylizer,
    fit_prior,
    predict_style_embedding,
    procedural_style_corpus,
    reconstruction_psnr,
    sample_style_embedding,
    stylize_image,
)
from .trainer import TrainConfig, read_history, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ARMS = ("no-style", "style")

# MoNuSeg test-set numbers as published; shown next to desk results, never produced here.
REFERENCE = {
    "label": "paper-reported (MoNuSeg, 512x512, 2000 epochs); not produced by this run",
    "iou": {"no-style": 0.6072, "style": 0.6656},
    "dice": {"no-style": 0.7533, "style": 0.7991},
}


@dataclass
class StyleSource:
    """Where the stylizer and prior come from.

    With ``stylizer_path``/``prior_path`` set the files are used as given;
    otherwise a stylizer is calibrated on the training pool plus a procedural
    style corpus and the prior is fitted on the same images.
    """

    stylizer_path: str | None = None
    prior_path: str | None = None
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    corpus_size: int = 100
    corpus_seed: int = 1
    inflation: float = 4.0

    def __post_init__(self):
        if isinstance(self.calibration, dict):
            self.calibration = CalibrationConfig(**self.calibration)
        if self.inflation <= 0:
            raise ValueError("inflation must be positive")


@dataclass
class ExperimentConfig:
    name: str = "texture-shift"
    out: str = "runs"
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    data_root: str | None = None
    image_size: int = 512
    n_val: int = 5
    model: SegNetConfig = field(default_factory=SegNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    style: StyleSource = field(default_factory=StyleSource)
    n_instances: int = 20
    threshold: float = 0.5
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    schema: int = SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            self.synthetic = SyntheticSpec.from_dict(self.synthetic)
        if isinstance(self.model, dict):
            self.model = SegNetConfig(**self.model)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.style, dict):
            self.style = StyleSource(**self.style)
        self.seeds = [int(s) for s in self.seeds]
        if self.schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema {self.schema}; expected {SCHEMA_VERSION}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if (self.synthetic is None) == (self.data_root is None):
            raise ConfigError("give exactly one of 'synthetic' and 'data_root'")
        if self.n_instances < 1:
            raise ConfigError("n_instances must be >= 1")

    def arm(self, name: str, seed: int) -> TrainConfig:
        """Training config of one arm; the arms differ only in ``style_enabled``."""
        if name not in ARMS:
            raise ValueError(f"unknown arm {name!r}")
        policy = replace(self.train.policy, style_enabled=name == "style")
        return replace(self.train, policy=policy, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synthetic"] = self.synthetic.to_dict() if self.synthetic else None
        d["model"] = self.model.to_dict()
        d["train"] = self.train.to_dict()
        d["train"].pop("optimizer")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def benchmark_config(**overrides) -> ExperimentConfig:
    """The committed synthetic texture-shift benchmark (CPU, a few minutes per seed)."""
    cfg = ExperimentConfig(
        name="texture-shift",
        synthetic=SyntheticSpec(),
        n_val=5,
        model=SegNetConfig.preset("tiny"),
        train=TrainConfig(batch_size=4, epochs=200, learning_rate=1e-3,
                          policy=AugmentationPolicy(geometric_enabled=True, alpha=0.5)),
        style=StyleSource(calibration=CalibrationConfig(steps=800)),
        seeds=[0, 1, 2],
    )
    return replace(cfg, **overrides)


# --------------------------------------------------------------------------- #
# data and style resolution

def resolve_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Return (pool, test); the pool is split into train/val per seed."""
    if config.synthetic is not None:
        train, val, test = generate_synthetic(config.synthetic)
        return Dataset(train.samples + val.samples, "train"), test
    root = Path(config.data_root)
    if not root.is_dir():
        raise ConfigError(f"data root does not exist: {root}")
    pool = load_dataset(root / "train", "train", config.image_size)
    val_dir = root / "val"
    if val_dir.is_dir():
        pool = Dataset(pool.samples + load_dataset(val_dir, "val", config.image_size).samples, "train")
    return pool, load_dataset(root / "test", "test", config.image_size)


def resolve_style(config: ExperimentConfig, images, out_dir: Path | None = None):
    src = config.style
    if src.stylizer_path or src.prior_path:
        if not (src.stylizer_path and src.prior_path):
            raise ConfigError("external style files need both stylizer_path and prior_path")
        stylizer, prior = Stylizer.load(src.stylizer_path), StylePrior.load(src.prior_path)
        if prior.dim != stylizer.d:
            raise ConfigError(f"prior dimension {prior.dim} != stylizer dimension {stylizer.d}")
        return stylizer, prior
    size = images[0].shape[0]
    pool = list(images) + procedural_style_corpus(src.corpus_size, size, src.corpus_seed)
    stylizer = calibrate_stylizer(pool, src.calibration)
    prior = fit_prior(stylizer, pool, src.inflation)
    if out_dir is not None:
        stylizer.save(out_dir / "stylizer.pt")
        prior.save(out_dir / "prior.json")
    return stylizer, prior


# --------------------------------------------------------------------------- #
# runner

@dataclass
class ArmResult:
    seed: int
    arm: str
    metrics: dict | None
    best_epoch: int | None
    best_val_iou: float | None
    curve: dict | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ExperimentReport:
    config: dict
    runs: list[ArmResult]
    pairing: dict
    medians: dict
    stylizer_psnr: float | None
    reference: dict = field(default_factory=lambda: json.loads(json.dumps(REFERENCE)))

    @property
    def failures(self) -> list[ArmResult]:
        return [r for r in self.runs if not r.ok]

    def result(self, seed: int, arm: str) -> ArmResult:
        return next(r for r in self.runs if r.seed == seed and r.arm == arm)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "config": self.config,
            "runs": [asdict(r) for r in self.runs],
            "pairing": self.pairing,
            "medians": self.medians,
            "stylizer_psnr": self.stylizer_psnr,
            "reference": self.reference,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def table(self) -> str:
        return format_table(self.medians, self.reference)


def curve_summary(val_loss) -> dict:
    v = np.asarray(val_loss, dtype=np.float64)
    k = int(np.argmin(v))
    return {
        "epochs": int(v.size),
        "min_val_loss_epoch": k + 1,
        "min_val_loss": float(v[k]),
        "final_val_loss": float(v[-1]),
        "final_over_min": float(v[-1] / v[k]) if v[k] > 0 else 1.0,
        "min_in_first_half": bool(k + 1 <= v.size / 2),
    }


def _medians(runs: list[ArmResult]) -> dict:
    out = {}
    for arm in ARMS:
        ok = [r for r in runs if r.arm == arm and r.ok]
        if not ok:
            out[arm] = None
            continue
        ious = [r.metrics["mean_iou"] for r in ok]
        # the seed whose test IoU is the (lower) median stands in for the arm
        order = np.argsort(ious, kind="stable")
        mid = ok[int(order[(len(ok) - 1) // 2])]
        out[arm] = {
            "iou": float(np.median(ious)),
            "dice": float(np.median([r.metrics["mean_dice"] for r in ok])),
            "median_seed": mid.seed,
            "n_seeds": len(ok),
        }
    return out


def format_table(medians: dict, reference: dict = REFERENCE) -> str:
    def cell(arm, key):
        m = medians.get(arm)
        return f"{m[key]:.4f}" if m else "failed"

    lines = [
        f"{'':<8}{'No Style Aug.':>16}{'Style Aug.':>14}",
        f"{'IoU':<8}{cell('no-style', 'iou'):>16}{cell('style', 'iou'):>14}",
        f"{'Dice':<8}{cell('no-style', 'dice'):>16}{cell('style', 'dice'):>14}",
        "",
        f"reference, {reference['label']}:",
        f"{'IoU':<8}{reference['iou']['no-style']:>16.4f}{reference['iou']['style']:>14.4f}",
        f"{'Dice':<8}{reference['dice']['no-style']:>16.4f}{reference['dice']['style']:>14.4f}",
    ]
    return "\n".join(lines) + "\n"


def run_experiment(config: ExperimentConfig, arms=ARMS) -> ExperimentReport:
    deterministic_mode()
    base = Path(config.out) / config.name
    base.mkdir(parents=True, exist_ok=True)
    config.save(base / "config.json")

    pool, test = resolve_data(config)
    if len(pool) <= config.n_val:
        raise DataError(f"pool of {len(pool)} samples cannot hold {config.n_val} validation samples")
    stylizer = prior = None
    psnr = None
    if "style" in arms:
        stylizer, prior = resolve_style(config, [s.image for s in pool], base)
        psnr = reconstruction_psnr(stylizer, [s.image for s in pool])
        log.info("stylizer self-reconstruction %.2f dB", psnr)

    runs, pairing = [], {}
    for seed in config.seeds:
        seed_dir = base / str(seed)
        train_set, val_set = split_train_val(pool, config.n_val, seed)
        model_config = replace(config.model, seed=seed)
        pairing[str(seed)] = {
            "train_ids": train_set.ids,
            "val_ids": val_set.ids,
            "init_hash": state_hash(build_model(model_config)),
        }
        for arm in arms:
            run_dir = seed_dir / arm
            model = build_model(model_config)
            log.info("seed %d arm %s", seed, arm)
            try:
                result = train(model, train_set, val_set, config.arm(arm, seed),
                               stylizer, prior, run_dir)
            except TrainingDivergedError as exc:
                runs.append(ArmResult(seed, arm, None, None, None, None, error=str(exc)))
                continue
            model.load_state_dict(result.best_state)
            report = mc_dropout_evaluate(model, test, config.n_instances, config.threshold, seed)
            report.config["checkpoint"] = str(run_dir / "best.ckpt")
            report.save(run_dir / "metrics.json")
            metrics = {k: v for k, v in report.to_dict().items() if k != "per_instance"}
            runs.append(ArmResult(seed, arm, metrics, result.best_epoch, result.best_val_iou,
                                  curve_summary(result.column("val_loss"))))
        (seed_dir / "pairing.json").write_text(json.dumps(pairing[str(seed)], indent=2))

    report = ExperimentReport(config.to_dict(), runs, pairing, _medians(runs), psnr)
    report.save(base / "report.json")
    (base / "table.txt").write_text(report.table())
    return report


# --------------------------------------------------------------------------- #
# figures

def emit_loss_curves(history_path, out_path) -> dict:
    """Plot train and validation loss per epoch; write ``<out>.json`` beside the image."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    try:
        history = read_history(history_path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read history {history_path}: {exc}") from exc
    if not history:
        raise DataError(f"{history_path} has no rows")
    epochs = [r.epoch for r in history]
    train_loss = [r.train_loss for r in history]
    val_loss = [r.val_loss for r in history]

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, train_loss, color="tab:blue", marker="." if len(epochs) == 1 else None, label="train")
    ax.plot(epochs, val_loss, color="tab:orange", marker="." if len(epochs) == 1 else None, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_xlim(epochs[0] - (0.5 if len(epochs) == 1 else 0), epochs[-1] + (0.5 if len(epochs) == 1 else 0))
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100, metadata={"Software": None})
    plt.close(fig)

    summary = {"history": str(history_path), "first_epoch": epochs[0], "last_epoch": epochs[-1]}
    summary.update(curve_summary(val_loss))
    summary["min_val_loss_epoch"] = epochs[summary["min_val_loss_epoch"] - 1]
    out_path.with_suffix(".json").write_text(json.dumps(summary, indent=2))
    return summary


def stylization_grid(stylizer: Stylizer, prior: StylePrior, image: np.ndarray,
                     n_styles: int, alpha: float, seed: int) -> np.ndarray:
    """Original image followed by ``n_styles`` stylized variants, side by side."""
    if n_styles < 1:
        raise ValueError("n_styles must be >= 1")
    rng = np.random.default_rng(seed)
    content = predict_style_embedding(stylizer, image)
    panels = [image]
    for _ in range(n_styles):
        z = blend_embeddings(content, sample_style_embedding(prior, rng), alpha)
        panels.append(stylize_image(stylizer, image, z))
    gap = np.ones((image.shape[0], 2, 3), dtype=np.float32)
    row = [panels[0]]
    for p in panels[1:]:
        row += [gap, p]
    return np.concatenate(row, axis=1)


def preview_stylization(image_path, n_styles: int, alpha: float, seed: int, out_path,
                        stylizer_path, prior_path) -> Path:
    from PIL import Image

    stylizer = Stylizer.load(stylizer_path)
    prior = StylePrior.load(prior_path)
    try:
        with Image.open(image_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {image_path}: {exc}") from exc
    grid = stylization_grid(stylizer, prior, image, n_styles, alpha, seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(grid * 255).astype(np.uint8), "RGB").save(out_path)
    return out_path


def evaluate_checkpoint(checkpoint, test: Dataset, n_instances=20, threshold=0.5, seed=0,
                        dump_masks=None, **kw):
    model, meta = load_checkpoint(checkpoint)
    report, preds = mc_dropout_evaluate(model, test, n_instances, threshold, seed,
                                        keep_predictions=True, **kw)
    report.config["checkpoint"] = str(checkpoint)
    report.config["checkpoint_epoch"] = meta["epoch"]
    if dump_masks is not None:
        from PIL import Image

        out = Path(dump_masks)
        out.mkdir(parents=True, exist_ok=True)
        for s, pred in zip(test, preds[0]):
            Image.fromarray(pred.astype(np.uint8) * 255, "L").save(out / f"{s.id}.png")
    return report
