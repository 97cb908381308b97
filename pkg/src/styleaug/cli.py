"""``styleaug`` command line.

Every command that trains or evaluates reads one experiment config (JSON,
``"schema": 1``). Flags override config keys; anything unset falls back to
the committed synthetic benchmark. Exit codes: 0 ok, 1 config error,
2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ._torch import deterministic_mode
from .dataset import SyntheticSpec, load_dataset, split_train_val, write_dataset, write_synthetic
from .errors import ConfigError, DataError, TrainingDivergedError
from .experiment import (
    ARMS,
    ExperimentConfig,
    benchmark_config,
    emit_loss_curves,
    evaluate_checkpoint,
    preview_stylization,
    resolve_data,
    resolve_style,
    run_experiment,
)
from .segnet import build_model
from .stylizer import reconstruction_psnr
from .trainer import train

log = logging.getLogger("styleaug")


def set_dotted(d: dict, key: str, value) -> None:
    *parents, leaf = key.split(".")
    for p in parents:
        if d.get(p) is None:
            d[p] = {}
        d = d[p]
    d[leaf] = value


def load_config(path, overrides: dict) -> ExperimentConfig:
    """Benchmark defaults, then the config file, then flags."""
    base = benchmark_config().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        _merge(base, user)
    for key, value in overrides.items():
        if value is not None:
            set_dotted(base, key, value)
    if base.get("data_root") is not None:
        base["synthetic"] = None
    try:
        return ExperimentConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _merge(base: dict, user: dict) -> None:
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


# --------------------------------------------------------------------------- #
# commands

def cmd_ingest(args):
    ds = load_dataset(args.root, args.split, args.target)
    out = write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {out}")


def cmd_synth(args):
    d = SyntheticSpec().to_dict()
    if args.config:
        cfg = load_config(args.config, {})
        if cfg.synthetic is None:
            raise ConfigError("config has no synthetic spec")
        d = cfg.synthetic.to_dict()
    for key in ("seed", "image_size", "n_train", "n_val", "n_test"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.no_texture_shift:
        d["texture_shift"] = False
    try:
        spec = SyntheticSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = write_synthetic(spec, args.out)
    print(f"wrote synthetic dataset to {out}")


def cmd_calibrate(args):
    deterministic_mode()
    cfg = load_config(args.config, {
        "data_root": args.data,
        "style.calibration.steps": args.steps,
        "style.calibration.d": args.d,
        "style.calibration.seed": args.seed,
        "style.inflation": args.inflation,
    })
    cfg.style.stylizer_path = cfg.style.prior_path = None
    pool, _ = resolve_data(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = [s.image for s in pool]
    stylizer, _ = resolve_style(cfg, images, out)
    print(f"stylizer and prior written to {out}; "
          f"self-reconstruction PSNR {reconstruction_psnr(stylizer, images):.2f} dB")


def _experiment_overrides(args) -> dict:
    return {
        "data_root": args.data,
        "train.epochs": args.epochs,
        "train.learning_rate": args.lr,
        "train.batch_size": args.batch_size,
        "model.dropout_rate": args.dropout,
        "style.stylizer_path": args.stylizer,
        "style.prior_path": args.prior,
        "n_instances": getattr(args, "n_instances", None),
    }


def cmd_train(args):
    deterministic_mode()
    cfg = load_config(args.config, _experiment_overrides(args))
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    pool, _ = resolve_data(cfg)
    train_set, val_set = split_train_val(pool, cfg.n_val, seed)
    stylizer = prior = None
    if args.arm == "style":
        stylizer, prior = resolve_style(cfg, [s.image for s in pool], None)
    model = build_model(replace(cfg.model, seed=seed))
    result = train(model, train_set, val_set, cfg.arm(args.arm, seed), stylizer, prior, args.out)
    print(f"best val IoU {result.best_val_iou:.4f} at epoch {result.best_epoch}; "
          f"checkpoint {result.checkpoint_path}")


def cmd_eval(args):
    deterministic_mode()
    root = Path(args.data)
    test = load_dataset(root / "test" if (root / "test").is_dir() else root, "test", args.image_size)
    report = evaluate_checkpoint(args.checkpoint, test, args.n_instances, args.threshold, args.seed,
                                 dump_masks=args.dump_masks, aggregation=args.aggregation,
                                 ensemble=args.ensemble)
    if args.out:
        report.save(args.out)
    print(f"IoU {report.mean_iou:.4f} ± {report.std_iou:.4f}   "
          f"Dice {report.mean_dice:.4f} ± {report.std_dice:.4f}   ({report.n_instances} instances)")


def cmd_compare(args):
    overrides = _experiment_overrides(args)
    overrides.update({"name": args.name, "out": args.out,
                      "seeds": [int(s) for s in args.seeds.split(",")] if args.seeds else None})
    cfg = load_config(args.config, overrides)
    report = run_experiment(cfg)
    print(report.table(), end="")
    print(f"report: {Path(cfg.out) / cfg.name / 'report.json'}")
    if report.failures:
        for r in report.failures:
            print(f"seed {r.seed} arm {r.arm} failed: {r.error}", file=sys.stderr)
        return 3
    return 0


def cmd_stylize(args):
    deterministic_mode()
    out = preview_stylization(args.image, args.n_styles, args.alpha, args.seed, args.out,
                              args.stylizer, args.prior)
    print(f"wrote {out}")


def cmd_plot(args):
    summary = emit_loss_curves(args.history, args.out)
    print(json.dumps(summary, indent=2))


# --------------------------------------------------------------------------- #
# parser

def _experiment_flags(p):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--data", help="dataset root with train/ and test/ (replaces the synthetic spec)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--stylizer", help="stylizer weights; skips calibration")
    p.add_argument("--prior", help="style prior JSON; skips fitting")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="styleaug", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load annotated images and write PNG images + masks")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--target", type=int, default=512)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write a synthetic texture-shift dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--no-texture-shift", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate-stylizer", help="calibrate the stylizer and fit the style prior")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--inflation", type=float)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="train one arm on one seed")
    _experiment_flags(p)
    p.add_argument("--arm", choices=ARMS, default="style")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="MC-dropout evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="test directory, or a root containing test/")
    p.add_argument("--image-size", type=int, default=512)
    p.add_argument("--n-instances", type=int, default=20)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aggregation", choices=("per-image", "pooled"), default="per-image")
    p.add_argument("--ensemble", action="store_true")
    p.add_argument("--dump-masks", help="write instance-0 predicted masks as 0/255 PNGs here")
    p.add_argument("--out", help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train and evaluate both arms over all seeds")
    _experiment_flags(p)
    p.add_argument("--name")
    p.add_argument("--out")
    p.add_argument("--seeds", help="comma-separated, e.g. 0,1,2")
    p.add_argument("--n-instances", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("stylize", help="grid of an image and random stylizations")
    p.add_argument("--image", required=True)
    p.add_argument("--stylizer", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--n-styles", type=int, default=1)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("plot", help="loss curves and over-fitting summary from history.csv")
    p.add_argument("--history", required=True)
    p.add_argument("--out", required=True, help="image path; the summary goes next to it as .json")
    p.set_defaults(func=cmd_plot)
    return parser


EXIT_CODES = ((ConfigError, 1), (DataError, 2), (TrainingDivergedError, 3))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except tuple(cls for cls, _ in EXIT_CODES) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return next(code for cls, code in EXIT_CODES if isinstance(exc, cls))


if __name__ == "__main__":
    sys.exit(main())
