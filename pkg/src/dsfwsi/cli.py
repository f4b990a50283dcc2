"""Command line interface.

Subcommands cover the whole pipeline: ``synth`` (make a synthetic slide
dataset), ``tile`` (patches + manifest + folds), ``pretrain``, ``finetune``,
``evaluate``, and ``report`` (cross-fold aggregation). Exit codes: 0 success,
2 usage errors (argparse), 3 configuration/validation errors, 1 anything
else; failures print one machine-parsable line to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__
from .config import (
    ExperimentConfig,
    apply_ablations,
    load_experiment_config,
    load_synth_config,
    write_resolved_config,
)
from .data_pipeline import TiledPatchStore, generate_synthetic_dataset, tile_dataset
from .errors import CheckpointError, ConfigError, ManifestError
from .evaluator import Metrics, save_predictions, write_report
from .hooknet import evaluate_model, load_hooknet_checkpoint, run_finetune
from .pretrainer import run_pretraining

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


def _replace_some(obj, **overrides):
    """dataclasses.replace, skipping values that are None (not given)."""
    actual = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(obj, **actual) if actual else obj


def _load_experiment(args) -> ExperimentConfig:
    cfg = load_experiment_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _cmd_synth(args) -> int:
    cfg = load_synth_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    index_path = generate_synthetic_dataset(cfg, args.out)
    write_resolved_config({"command": "synth", "config": dataclasses.asdict(cfg)}, args.out)
    print(f"dataset: {index_path}")
    return EXIT_OK


def _cmd_tile(args) -> int:
    cfg = _load_experiment(args)
    cfg.validate()
    groups = tile_dataset(args.dataset, args.out, cfg.tiling, num_folds=cfg.num_folds, seed=cfg.seed)
    write_resolved_config(
        {
            "command": "tile",
            "config": cfg.to_dict(),
            "dataset": str(args.dataset),
            "groups": len(groups),
            "targets_per_group": groups[0].m,
        },
        args.out,
    )
    print(f"groups: {len(groups)} (m={groups[0].m}) -> {args.out}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    cfg = _load_experiment(args)
    cfg = dataclasses.replace(
        cfg,
        pretrain=_replace_some(
            cfg.pretrain,
            epochs=args.epochs,
            batch_size=args.batch_size,
            fold=args.fold,
            targets_per_group=args.targets_per_group,
            pretrain_on=args.pretrain_on,
        ),
    )
    if args.no_aug:
        cfg = dataclasses.replace(cfg, augmentation=dataclasses.replace(cfg.augmentation, enabled=False))
    if args.ablate:
        cfg = apply_ablations(cfg, args.ablate)
    cfg.validate()
    checkpoint = run_pretraining(args.data, cfg, args.out, resume=args.resume)
    print(f"checkpoint: {checkpoint}")
    return EXIT_OK


def _cmd_finetune(args) -> int:
    cfg = _load_experiment(args)
    cfg = dataclasses.replace(
        cfg,
        finetune=_replace_some(
            cfg.finetune,
            epochs=args.epochs,
            batch_size=args.batch_size,
            fold=args.fold,
            fraction=args.fraction,
            init=args.init,
            num_classes=args.num_classes,
            lambda_context=args.lambda_context,
        ),
    )
    cfg.validate()
    _, metrics = run_finetune(args.data, cfg, args.out)
    print(
        f"fold {metrics.fold}: macro_f1={metrics.macro_f1:.4f} accuracy={metrics.accuracy:.4f} "
        f"(best epoch {metrics.extra.get('best_epoch')})"
    )
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    from torch.utils.data import DataLoader

    from .data_pipeline import SegmentationPairDataset, collate_pairs, resolve_num_workers

    cfg = _load_experiment(args)
    fold = args.fold if args.fold is not None else cfg.finetune.fold
    model, metadata = load_hooknet_checkpoint(args.model)
    store = TiledPatchStore(Path(args.data) / "manifest.csv")
    folds = store.load_folds()
    if folds is None:
        raise ConfigError(f"evaluation needs {args.data}/folds.json for its validation split")
    val_groups = folds.select_groups(store.groups, fold, "val")
    if not val_groups:
        raise ConfigError(f"fold {fold} has no validation groups")
    dataset = SegmentationPairDataset(store, val_groups, mean=cfg.augmentation.mean, std=cfg.augmentation.std)
    loader = DataLoader(
        dataset,
        batch_size=cfg.finetune.batch_size,
        shuffle=False,
        collate_fn=collate_pairs,
        num_workers=resolve_num_workers(),
    )
    metrics, predictions = evaluate_model(
        model,
        loader,
        num_classes=int(metadata["num_classes"]),
        ignore_index=cfg.finetune.ignore_index,
        fold=fold,
        collect_predictions=args.dump_predictions,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
    write_report([metrics], out)
    if args.dump_predictions:
        save_predictions(predictions, out / "predictions", num_classes=int(metadata["num_classes"]))
    write_resolved_config(
        {"command": "evaluate", "config": cfg.to_dict(), "model": str(args.model), "fold": fold}, out
    )
    print(f"fold {fold}: macro_f1={metrics.macro_f1:.4f} accuracy={metrics.accuracy:.4f}")
    return EXIT_OK


def _cmd_report(args) -> int:
    metrics_list = []
    for run_dir in args.runs:
        path = Path(run_dir) / "metrics.json"
        if not path.exists():
            raise ConfigError(f"no metrics.json under {run_dir}")
        metrics_list.append(Metrics.from_dict(json.loads(path.read_text())))
    csv_path = write_report(metrics_list, args.out, macro_or_micro="micro" if args.micro else "macro")
    summary = json.loads((Path(args.out) / "summary.json").read_text())
    print(
        f"folds: {summary['n_folds']} mean_f1={summary['mean_f1']:.4f} "
        f"std_f1={summary['std_f1']:.4f} -> {csv_path}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsfwsi",
        description="Dual-branch self-supervised pretraining and hooked segmentation fine-tuning.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-level slide dataset")
    p.add_argument("--config", required=True, help="synthetic dataset JSON config")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("tile", help="tile a dataset into context/target patch groups")
    p.add_argument("--dataset", required=True, help="dataset directory (from synth)")
    p.add_argument("--out", required=True, help="output tiles directory")
    p.add_argument("--config", default=None, help="experiment JSON config")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("pretrain", help="self-supervised dual-branch pretraining")
    p.add_argument("--data", required=True, help="tiles directory (from tile)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--targets-per-group", type=int, default=None)
    p.add_argument("--pretrain-on", choices=("train", "all"), default=None)
    p.add_argument("--no-aug", action="store_true", help="identity augmentation (debug)")
    p.add_argument(
        "--ablate",
        action="append",
        choices=("dsl", "ctfm", "mask", "jigsaw"),
        default=None,
        help="disable dense stages / fusion stream / shuffling / masking (repeatable)",
    )
    p.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised segmentation fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--fraction", type=float, default=None, help="labeled fraction of training groups")
    p.add_argument("--init", default=None, help="'random' or a pretraining checkpoint directory")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--lambda-context", type=float, default=None)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a fine-tuned model on a fold")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="fine-tuned model checkpoint directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--dump-predictions", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="aggregate fold metrics into a CV report")
    p.add_argument("--runs", nargs="+", required=True, help="run directories containing metrics.json")
    p.add_argument("--out", required=True)
    p.add_argument("--micro", action="store_true", help="flag the summary as micro-averaged")
    p.set_defaults(func=_cmd_report)
    return parser


def _fail(kind: str, exc: BaseException) -> None:
    message = " ".join(str(exc).split())
    print(f"error: {kind}: {message}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _fail("config", exc)
        return EXIT_CONFIG
    except ManifestError as exc:
        _fail("manifest", exc)
        return EXIT_ERROR
    except CheckpointError as exc:
        _fail("checkpoint", exc)
        return EXIT_ERROR
    except (ValueError, RuntimeError, OSError) as exc:
        _fail(type(exc).__name__, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
