"""Command line interface.

Verbs: ``train``, ``evaluate``, ``dump-features``, ``make-split``, ``synth``.
Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure during training.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import trainer
from .config import TrainConfig, load_config, profile_config
from .data import make_split, scan_dataset, synth_dataset
from .errors import ConfigError, DataError, FrcsegError, NumericError


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; those are config errors here
    def error(self, message):
        raise ConfigError(message)


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated ints, got '{text}'") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="frcseg",
                     description="Semi-supervised segmentation with frequency "
                                 "and region consistency")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p_train = sub.add_parser("train", help="run training")
    p_train.add_argument("--config", help="YAML config file")
    p_train.add_argument("--profile", choices=("desk", "paper"),
                         help="named base profile (default: desk)")
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--max-steps", type=int)
    p_train.add_argument("--eval-every", type=int)
    p_train.add_argument("--batch-labeled", type=int)
    p_train.add_argument("--batch-unlabeled", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--weight-decay", type=float)
    p_train.add_argument("--lambda-max", type=float)
    p_train.add_argument("--warmup-steps", type=int)
    p_train.add_argument("--ema-decay", type=float)
    p_train.add_argument("--student-noise-std", type=float)
    p_train.add_argument("--data-root")
    p_train.add_argument("--layout", choices=("synth", "generic", "kvasir", "isic"))
    p_train.add_argument("--ratio", type=float, help="labeled fraction of the train split")
    p_train.add_argument("--test-fraction", type=float)
    p_train.add_argument("--synth-n", type=int)
    p_train.add_argument("--synth-size", type=int)
    p_train.add_argument("--input-size", type=int)
    p_train.add_argument("--granularities", type=_int_tuple,
                         help="comma-separated region grid sizes, e.g. 4,8,16")
    p_train.add_argument("--projection",
                         choices=("linear", "avgpool", "maxpool", "conv"))
    p_train.add_argument("--patch-size", type=int)
    p_train.add_argument("--init-from", help="checkpoint supplying initial weights")
    p_train.add_argument("--finetune-policy", choices=("auto", "all", "selective"))
    for flag in ("fdc", "mrsc", "pix"):
        p_train.add_argument(f"--{flag}", action=argparse.BooleanOptionalAction,
                             default=None, help=f"enable/disable the {flag} term")
    p_train.add_argument("--fdc-low-only", action=argparse.BooleanOptionalAction,
                         default=None)
    p_train.add_argument("--fdc-high-only", action=argparse.BooleanOptionalAction,
                         default=None)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=("test", "labeled", "unlabeled"),
                        default="test")
    p_eval.add_argument("--teacher", action="store_true",
                        help="evaluate the EMA teacher instead of the student")
    p_eval.add_argument("--batch", type=int)
    p_eval.add_argument("--data-root")
    p_eval.add_argument("--config", help="optional config to check against")

    p_dump = sub.add_parser("dump-features", help="write feature response heatmaps")
    p_dump.add_argument("--checkpoint", required=True)
    p_dump.add_argument("--image", required=True)
    p_dump.add_argument("--out", required=True)
    p_dump.add_argument("--teacher", action="store_true")

    p_split = sub.add_parser("make-split", help="write a split manifest for a dataset")
    p_split.add_argument("--data-root", required=True)
    p_split.add_argument("--layout", choices=("generic", "kvasir", "isic"),
                         default="generic")
    p_split.add_argument("--ratio", type=float, default=0.1)
    p_split.add_argument("--seed", type=int, default=0)
    p_split.add_argument("--test-fraction", type=float, default=0.2)
    p_split.add_argument("--out", required=True, help="manifest JSON path")

    p_synth = sub.add_parser("synth", help="materialize a synthetic dataset folder")
    p_synth.add_argument("--n", type=int, default=64)
    p_synth.add_argument("--size", type=int, default=64)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)

    return parser


def _train_config(args: argparse.Namespace) -> TrainConfig:
    if args.config:
        config = load_config(args.config)
        if args.profile:
            raise ConfigError("--profile and --config are mutually exclusive")
    else:
        config = profile_config(args.profile or "desk")

    top = {"seed": args.seed, "epochs": args.epochs, "max_steps": args.max_steps,
           "eval_every": args.eval_every, "batch_labeled": args.batch_labeled,
           "batch_unlabeled": args.batch_unlabeled, "ema_decay": args.ema_decay,
           "student_noise_std": args.student_noise_std, "out_dir": args.out,
           "init_from": args.init_from, "finetune_policy": args.finetune_policy,
           "enable_fdc": args.fdc, "enable_mrsc": args.mrsc, "enable_pix": args.pix,
           "fdc_low_only": args.fdc_low_only, "fdc_high_only": args.fdc_high_only}
    config = replace(config, **{k: v for k, v in top.items() if v is not None})

    opt = {"lr": args.lr, "weight_decay": args.weight_decay}
    config = replace(config, optimizer=replace(
        config.optimizer, **{k: v for k, v in opt.items() if v is not None}))

    loss = {"lambda_max": args.lambda_max, "warmup_steps": args.warmup_steps}
    config = replace(config, loss=replace(
        config.loss, **{k: v for k, v in loss.items() if v is not None}))

    data = {"root": args.data_root, "layout": args.layout, "ratio": args.ratio,
            "test_fraction": args.test_fraction, "synth_n": args.synth_n,
            "synth_size": args.synth_size}
    config = replace(config, data=replace(
        config.data, **{k: v for k, v in data.items() if v is not None}))

    region = {"granularities": args.granularities, "projection": args.projection}
    config = replace(config, region=replace(
        config.region, **{k: v for k, v in region.items() if v is not None}))

    if args.patch_size is not None:
        config = replace(config, fem=replace(config.fem, patch_size=args.patch_size))
    if args.input_size is not None:
        config = replace(config, backbone=replace(config.backbone,
                                                  input_size=args.input_size))
    return config


def _run_train(args) -> int:
    config = _train_config(args)
    result = trainer.train(config, resume=args.resume)
    print(f"finished {result.steps} steps; metrics: {result.metrics_csv}")
    if result.final_metrics is not None:
        m = result.final_metrics
        print(f"test: mae={m.mae:.4f} acc={m.acc:.4f} dice={m.dice:.4f} "
              f"iou={m.iou:.4f} (n={m.n_images})")
    print(f"last checkpoint: {result.last_checkpoint}")
    if result.best_checkpoint:
        print(f"best checkpoint: {result.best_checkpoint} (dice {result.best_dice:.4f})")
    return 0


def _run_evaluate(args) -> int:
    config = load_config(args.config) if args.config else None
    report = trainer.evaluate_checkpoint(
        args.checkpoint, split=args.split, use_teacher=args.teacher,
        batch_size=args.batch, data_root=args.data_root, config=config)
    which = "teacher" if args.teacher else "student"
    print(f"{which} on {args.split}: mae={report.mae:.4f} acc={report.acc:.4f} "
          f"dice={report.dice:.4f} iou={report.iou:.4f} (n={report.n_images})")
    return 0


def _run_dump_features(args) -> int:
    encoder_path, frequency_path = trainer.dump_feature_response(
        args.checkpoint, args.image, args.out, use_teacher=args.teacher)
    print(encoder_path)
    print(frequency_path)
    return 0


def _run_make_split(args) -> int:
    index = scan_dataset(args.data_root, args.layout)
    manifest = make_split(index, args.ratio, args.seed, args.test_fraction)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    manifest.save(args.out)
    print(f"labeled={len(manifest.labeled_ids)} unlabeled={len(manifest.unlabeled_ids)} "
          f"test={len(manifest.test_ids)} -> {args.out}")
    return 0


def _run_synth(args) -> int:
    source = synth_dataset(args.n, args.size, args.seed)
    root = source.save_folder(args.out)
    print(f"wrote {args.n} samples to {root}")
    return 0


_HANDLERS = {"train": _run_train, "evaluate": _run_evaluate,
             "dump-features": _run_dump_features, "make-split": _run_make_split,
             "synth": _run_synth}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except FrcsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
