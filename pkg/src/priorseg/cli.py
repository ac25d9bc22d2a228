"""Command-line entry points.

Subcommands
-----------
synth-data   write a deterministic synthetic dataset
train-prior  learn the shape prior from the labeled fraction's masks
train-seg    train the segmentation network (full, no-prior, or labeled-only)
evaluate     score a checkpoint on a dataset split, emit reports and figures
predict      segment a single image to a {0, 255} PNG

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Unless
``PRIORSEG_DETERMINISTIC=0`` is set, reruns of a command with identical
inputs produce byte-identical checkpoints, logs and reports.
"""
from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path

import cv2
import numpy as np

from . import __version__, checkpoint, plots
from .config import ExperimentConfig, parse_config, save_config
from .dataio import (
    DatasetSplit,
    generate_synthetic,
    load_dataset,
    make_partition,
    partition_from_id_lists,
    resize_mask_64,
    save_dataset,
)
from .determinism import deterministic_requested, enable_determinism
from .metrics import evaluate, format_summary, save_report_csv, save_report_json
from .segmodel import build_segmodel, load_segmodel, save_segmodel
from .shape_prior import load_shape_prior, save_history_csv, train_shape_prior
from .trainer import train, train_labeled_only_baseline


def _load_records(cfg: ExperimentConfig):
    records = load_dataset(cfg.dataset.root, cfg.dataset.kind)
    return records, {r.id: r for r in records}


def _read_id_list(path: str) -> list[str]:
    lines = Path(path).read_text().splitlines()
    ids = [line.strip() for line in lines if line.strip()]
    if not ids:
        raise ValueError(f"id list file is empty: {path}")
    return ids


def _make_split(cfg: ExperimentConfig, records) -> DatasetSplit:
    d = cfg.dataset
    if d.train_ids or d.val_ids or d.test_ids:
        if not (d.train_ids and d.test_ids):
            raise ValueError("id-list splitting needs at least train_ids and test_ids files")
        return partition_from_id_lists(
            records,
            _read_id_list(d.train_ids),
            _read_id_list(d.val_ids) if d.val_ids else [],
            _read_id_list(d.test_ids),
            Fraction(d.fraction),
            d.seed,
        )
    return make_partition(records, Fraction(d.fraction), d.val_count, d.test_count, d.seed)


def _snapshot(cfg: ExperimentConfig, out_dir: Path) -> None:
    save_config(cfg, out_dir / "config.ini")


def cmd_synth_data(args: argparse.Namespace) -> int:
    records = generate_synthetic(
        args.count, args.canvas, args.seed,
        contrast_range=(args.contrast[0], args.contrast[1]),
        speckle_strength=args.speckle,
        shadow_prob=args.shadow_prob,
        shadow_strength=(args.shadow_strength[0], args.shadow_strength[1]),
    )
    manifest = save_dataset(records, args.out, meta={"seed": args.seed, "canvas": args.canvas})
    print(f"wrote {len(records)} synthetic records under {args.out} (manifest: {manifest})")
    return 0


def cmd_train_prior(args: argparse.Namespace) -> int:
    cfg = parse_config(Path(args.config))
    out_dir = Path(args.out) if args.out else Path(cfg.output.dir)
    records, by_id = _load_records(cfg)
    split = _make_split(cfg, records)

    # Leak safety: the prior sees masks from the labeled fraction only.
    masks = []
    for rid in split.labeled_ids:
        record = by_id[rid]
        if record.mask is None:
            raise ValueError(f"labeled record {rid!r} has no mask")
        masks.append(resize_mask_64(record.mask))

    handle = train_shape_prior(
        np.stack(masks), cfg.generator_spec(), cfg.discriminator_spec(), cfg.gan_config()
    )
    _snapshot(cfg, out_dir)
    path = handle.save(out_dir / "checkpoints" / "shape_prior.npz")
    save_history_csv(handle.history, out_dir / "logs" / "prior_losses.csv")
    if handle.history:
        plots.plot_prior_curves(handle.history, out_dir / "reports" / "prior_curves.png")
    print(f"shape prior trained on {len(masks)} labeled masks -> {path}")
    return 0


def cmd_train_seg(args: argparse.Namespace) -> int:
    cfg = parse_config(Path(args.config))
    out_dir = Path(args.out) if args.out else Path(cfg.output.dir)
    records, _ = _load_records(cfg)
    split = _make_split(cfg, records)

    model = build_segmodel(
        cfg.encoder_spec(),
        cfg.decoder_spec(),
        cfg.dropout_config(),
        seed=cfg.model.seed,
        eval_size=cfg.model.eval_size,
    )

    prior = None
    if not (args.labeled_only or args.no_prior):
        prior_path = Path(args.prior) if args.prior else out_dir / "checkpoints" / "shape_prior.npz"
        if not prior_path.is_file():
            raise FileNotFoundError(
                f"shape prior checkpoint not found: {prior_path} (train it first or pass --no-prior)"
            )
        prior = load_shape_prior(prior_path)

    _snapshot(cfg, out_dir)
    common = dict(
        optim_cfg=cfg.optim_config(),
        aug_params=cfg.aug_params(),
        seed=cfg.trainer.seed,
        eval_size=cfg.model.eval_size,
        out_dir=out_dir,
        resume_from=args.resume,
    )
    if args.labeled_only:
        result = train_labeled_only_baseline(model, split, records, **common)
    else:
        result = train(model, prior, split, records, weights=cfg.loss_weights(), **common)

    final_path = save_segmodel(
        result.model,
        out_dir / "checkpoints" / "final.npz",
        extra_meta={"best_val_dice": result.state.best_val_dice, "seed": cfg.trainer.seed},
    )
    if result.iter_rows:
        plots.plot_train_curves(result.iter_rows, result.epoch_rows, out_dir / "reports" / "train_curves.png")
    arm = "labeled-only" if args.labeled_only else ("no-prior" if prior is None else "with-prior")
    best = "n/a" if result.state.best_val_dice is None else f"{result.state.best_val_dice:.4f}"
    print(f"{arm} training done: {result.state.iteration} iterations, best val Dice {best} -> {final_path}")
    return 0


def _split_group(split: DatasetSplit, name: str) -> tuple[str, ...]:
    groups = {
        "test": split.test_ids,
        "val": split.val_ids,
        "labeled": split.labeled_ids,
    }
    ids = groups[name]
    if not ids:
        raise ValueError(f"split group {name!r} is empty for this configuration")
    return ids


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = parse_config(Path(args.config))
    out_dir = Path(args.out) if args.out else Path(cfg.output.dir)
    model = load_segmodel(args.checkpoint)
    records, by_id = _load_records(cfg)
    split = _make_split(cfg, records)
    subset = [by_id[rid] for rid in _split_group(split, args.split)]

    report = evaluate(model, subset, eval_size=cfg.model.eval_size)
    base = out_dir / "reports" / f"eval_{args.split}"
    save_report_json(report, base.with_suffix(".json"))
    save_report_csv(report, base.with_suffix(".csv"))
    plots.plot_score_histogram(report, base.parent / f"eval_{args.split}_hist.png")
    examples = subset[: min(4, len(subset))]
    predictions = [model.predict_mask(r.image, eval_size=cfg.model.eval_size) for r in examples]
    plots.plot_examples(examples, predictions, base.parent / f"eval_{args.split}_examples.png")

    if args.format == "json":
        print(base.with_suffix(".json").read_text(), end="")
    elif args.format == "csv":
        print(base.with_suffix(".csv").read_text(), end="")
    else:
        print(format_summary(report))
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_segmodel(args.checkpoint)
    data = cv2.imread(args.image, cv2.IMREAD_GRAYSCALE)
    if data is None:
        raise ValueError(f"unreadable image file: {args.image}")
    mask = model.predict_mask(data.astype(np.float32) / 255.0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(out), mask * 255):
        raise ValueError(f"could not write mask to {out}")
    print(f"wrote mask {out} ({int(mask.sum())} foreground pixels)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="priorseg", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"priorseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a deterministic synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=200, help="number of images")
    p.add_argument("--canvas", type=int, default=128, help="square image size in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--contrast", type=float, nargs=2, default=(0.24, 0.40),
                   metavar=("LO", "HI"), help="lesion halo contrast range")
    p.add_argument("--speckle", type=float, default=0.30, help="speckle strength")
    p.add_argument("--shadow-prob", type=float, default=0.0,
                   help="probability of acoustic-shadow streaks per image")
    p.add_argument("--shadow-strength", type=float, nargs=2, default=(0.35, 0.65),
                   metavar=("LO", "HI"), help="shadow attenuation depth range")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-prior", help="train the shape prior on labeled masks")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override [output] dir from the config")
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("train-seg", help="train the segmentation network")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override [output] dir from the config")
    p.add_argument("--prior", help="shape prior checkpoint (default: <out>/checkpoints/shape_prior.npz)")
    p.add_argument(
        "--no-prior",
        "--no-dsr",
        dest="no_prior",
        action="store_true",
        help="ablation: train without the shape-prior regularizer",
    )
    p.add_argument("--labeled-only", action="store_true", help="supervised baseline on the labeled pool")
    p.add_argument("--resume", help="resume from a checkpoints/latest.npz bundle")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("evaluate", help="score a checkpoint and write reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--split", choices=("test", "val", "labeled"), default="test")
    p.add_argument("--format", choices=("summary", "csv", "json"), default="summary")
    p.add_argument("--out", help="override [output] dir from the config")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output mask PNG ({0, 255})")
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if deterministic_requested():
        enable_determinism()
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
