"""Hooked dual-branch encoder-decoder for multi-resolution segmentation.

Both magnification branches get a mirrored decoder over the pretrained (or
random) trunks. The context decoder runs first; its feature map at the hook
depth is centre-cropped to the target bottleneck's spatial size and
channel-concatenated onto it, so the target branch decodes with wide-field
evidence in view. Supervision is cross-entropy on the target logits, with an
optional weighted context term.
"""

from __future__ import annotations

import copy
import csv
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader

from . import checkpointing
from .config import ExperimentConfig, config_hash, write_resolved_config
from .data_pipeline import (
    SegmentationPairDataset,
    TiledPatchStore,
    collate_pairs,
    resolve_num_workers,
    subsample_fraction,
)
from .encoder import DualBranchEncoder
from .errors import CheckpointError, ConfigError
from .evaluator import ConfusionCounts, Metrics, confusion_counts
from .pretrainer import _epoch_batches
from .seeding import derive_seed

# Output channels after each decoder block (depth 1..5).
DECODER_WIDTHS = (256, 128, 64, 64, 32)
FINETUNE_LOG = "finetune_log.csv"
METRICS_FILE = "metrics.json"
MODEL_DIRNAME = "model"


class UpBlock(nn.Module):
    """2x upsample, optional skip concat, then conv3x3 + BN + ReLU."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels + skip_channels, out_channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor, skip: torch.Tensor | None = None) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.relu(self.bn(self.conv(x)))


class Decoder(nn.Module):
    """Mirror of the trunk: five 2x ups back to full resolution.

    Skip sources, deepest first: stage3, stage2, stage1, stem; the last block
    has none. ``extra_channels`` widens the bottleneck input for the hook.
    """

    def __init__(self, num_classes: int, extra_channels: int = 0):
        super().__init__()
        self.extra_channels = extra_channels
        self.blocks = nn.ModuleList(
            [
                UpBlock(512 + extra_channels, 256, DECODER_WIDTHS[0]),
                UpBlock(DECODER_WIDTHS[0], 128, DECODER_WIDTHS[1]),
                UpBlock(DECODER_WIDTHS[1], 64, DECODER_WIDTHS[2]),
                UpBlock(DECODER_WIDTHS[2], 64, DECODER_WIDTHS[3]),
                UpBlock(DECODER_WIDTHS[3], 0, DECODER_WIDTHS[4]),
            ]
        )
        self.head = nn.Conv2d(DECODER_WIDTHS[4], num_classes, kernel_size=1)

    def forward(self, bottleneck: torch.Tensor, skips, extra: torch.Tensor | None = None):
        """Returns (logits, [per-depth feature maps])."""
        if extra is not None:
            bottleneck = torch.cat([bottleneck, extra], dim=1)
        elif self.extra_channels:
            raise ValueError(f"decoder expects {self.extra_channels} extra channels at the bottleneck")
        maps = []
        x = bottleneck
        skip_list = list(skips) + [None]
        for block, skip in zip(self.blocks, skip_list):
            x = block(x, skip)
            maps.append(x)
        return self.head(x), maps


def hook_features(context_map: torch.Tensor, target_bottleneck: torch.Tensor) -> torch.Tensor:
    """Centre-crop the context decoder map and concat onto the bottleneck.

    (B, Cc, Hc, Wc) + (B, Ct, h, w) -> (B, Ct + Cc, h, w); the crop starts at
    (floor((Hc-h)/2), floor((Wc-w)/2)).
    """
    if context_map.ndim != 4 or target_bottleneck.ndim != 4:
        raise ValueError("hook_features expects two (B, C, H, W) tensors")
    if context_map.shape[0] != target_bottleneck.shape[0]:
        raise ValueError("batch sizes differ between branches")
    _, _, ctx_h, ctx_w = context_map.shape
    _, _, tgt_h, tgt_w = target_bottleneck.shape
    if ctx_h < tgt_h or ctx_w < tgt_w:
        raise ValueError(
            f"context map {ctx_h}x{ctx_w} is smaller than the target bottleneck {tgt_h}x{tgt_w}"
        )
    top = (ctx_h - tgt_h) // 2
    left = (ctx_w - tgt_w) // 2
    crop = context_map[:, :, top : top + tgt_h, left : left + tgt_w]
    return torch.cat([target_bottleneck, crop], dim=1)


class HookNetModel(nn.Module):
    """Two trunk+decoder towers coupled by the hook at the target bottleneck."""

    def __init__(
        self,
        num_classes: int,
        hook_depth: int = 2,
        seed: int = 0,
        enable_hooking: bool = True,
    ):
        super().__init__()
        if not 1 <= hook_depth <= len(DECODER_WIDTHS):
            raise ValueError(f"hook_depth must lie in [1, {len(DECODER_WIDTHS)}], got {hook_depth}")
        self.num_classes = int(num_classes)
        self.hook_depth = int(hook_depth)
        self.enable_hooking = bool(enable_hooking)
        self.hook_channels = DECODER_WIDTHS[hook_depth - 1]
        self.encoder = DualBranchEncoder(seed=seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "decoder", "context"))
            self.context_decoder = Decoder(num_classes, extra_channels=0)
            torch.manual_seed(derive_seed(seed, "decoder", "target"))
            self.target_decoder = Decoder(num_classes, extra_channels=self.hook_channels)
        self.seed = int(seed)

    def forward(self, context_images: torch.Tensor, target_images: torch.Tensor):
        """Returns (target_logits, context_logits), each (B, C, H, W)."""
        ctx_stem, ctx_feats = self.encoder.context.forward_with_stem(context_images)
        ctx_logits, ctx_maps = self.context_decoder(
            ctx_feats[3], skips=[ctx_feats[2], ctx_feats[1], ctx_feats[0], ctx_stem]
        )
        tgt_stem, tgt_feats = self.encoder.target.forward_with_stem(target_images)
        bottleneck = tgt_feats[3]
        if self.enable_hooking:
            hooked = hook_features(ctx_maps[self.hook_depth - 1], bottleneck)
            extra = hooked[:, bottleneck.shape[1] :]
        else:
            size = (bottleneck.shape[0], self.hook_channels, bottleneck.shape[2], bottleneck.shape[3])
            extra = torch.zeros(size, dtype=bottleneck.dtype, device=bottleneck.device)
        tgt_logits, _ = self.target_decoder(
            bottleneck, skips=[tgt_feats[2], tgt_feats[1], tgt_feats[0], tgt_stem], extra=extra
        )
        return tgt_logits, ctx_logits


def seg_loss(
    target_logits: torch.Tensor,
    target_labels: torch.Tensor,
    context_logits: torch.Tensor | None = None,
    context_labels: torch.Tensor | None = None,
    lambda_context: float = 1.0,
    ignore_index: int | None = None,
):
    """lambda * CE(target) + (1 - lambda) * CE(context), per-pixel mean.

    With ``lambda_context == 1`` the context term is never evaluated, so
    arbitrary (even non-finite) context logits cannot influence the loss or
    its gradients.
    """
    if not 0.0 <= lambda_context <= 1.0:
        raise ValueError(f"lambda_context must lie in [0, 1], got {lambda_context}")
    ii = -100 if ignore_index is None else int(ignore_index)

    def _check(logits, labels, side):
        if logits.ndim != 4 or labels.ndim != 3 or logits.shape[0] != labels.shape[0]:
            raise ValueError(f"{side}: expected logits (B, C, H, W) with labels (B, H, W)")
        if logits.shape[2:] != labels.shape[1:]:
            raise ValueError(f"{side}: spatial shapes differ: {tuple(logits.shape[2:])} vs {tuple(labels.shape[1:])}")
        valid = labels[labels != ii]
        if valid.numel() == 0:
            raise ValueError(f"{side}: no labeled pixels (all ignored)")
        if int(valid.min()) < 0 or int(valid.max()) >= logits.shape[1]:
            raise ValueError(
                f"{side}: label values span [{int(valid.min())}, {int(valid.max())}] "
                f"but logits have {logits.shape[1]} classes"
            )

    _check(target_logits, target_labels, "target")
    loss = lambda_context * F.cross_entropy(target_logits, target_labels, ignore_index=ii)
    if lambda_context < 1.0:
        if context_logits is None or context_labels is None:
            raise ValueError("lambda_context < 1 requires context logits and labels")
        _check(context_logits, context_labels, "context")
        loss = loss + (1.0 - lambda_context) * F.cross_entropy(context_logits, context_labels, ignore_index=ii)
    return loss


def init_from_pretrained(model: HookNetModel, checkpoint_path: str | Path) -> None:
    """Copy both pretrained trunks into the model's encoder branches.

    Accepts a pretraining checkpoint or any directory with the same
    ``encoder_context/`` + ``encoder_target/`` array layout (external
    weights). Head/decoder parameters are left untouched.
    """
    path = Path(checkpoint_path)
    if not path.is_dir():
        raise CheckpointError(f"encoder weights not found: {path} is not a directory")
    if (path / checkpointing.METADATA_FILE).exists():
        checkpointing.read_metadata(path)  # format_version gate
    checkpointing.load_module_arrays(model.encoder.context, path / "encoder_context", where="encoder_context")
    checkpointing.load_module_arrays(model.encoder.target, path / "encoder_target", where="encoder_target")


def save_hooknet_checkpoint(model: HookNetModel, path: Path, cfg: ExperimentConfig, epoch: int) -> Path:
    return checkpointing.save_checkpoint(
        path,
        modules={MODEL_DIRNAME: model},
        metadata={
            "kind": "hooknet",
            "epoch": epoch,
            "config_hash": config_hash(cfg),
            "seed": cfg.seed,
            "num_classes": model.num_classes,
            "hook_depth": model.hook_depth,
            "enable_hooking": model.enable_hooking,
        },
    )


def load_hooknet_checkpoint(path: str | Path):
    """Rebuild a fine-tuned model from its checkpoint; returns (model, meta)."""
    path = Path(path)
    metadata = checkpointing.read_metadata(path)
    if metadata.get("kind") != "hooknet":
        raise CheckpointError(f"{path} is a {metadata.get('kind')!r} checkpoint, expected 'hooknet'")
    model = HookNetModel(
        num_classes=int(metadata["num_classes"]),
        hook_depth=int(metadata.get("hook_depth", 2)),
        seed=int(metadata.get("seed", 0)),
        enable_hooking=bool(metadata.get("enable_hooking", True)),
    )
    checkpointing.load_checkpoint(path, modules={MODEL_DIRNAME: model})
    return model, metadata


def evaluate_model(
    model: HookNetModel,
    loader,
    num_classes: int,
    ignore_index: int | None = None,
    fold: int = 0,
    collect_predictions: bool = False,
):
    """Confusion-matrix metrics of target-branch predictions over a loader."""
    model.eval()
    counts = ConfusionCounts.zeros(num_classes)
    predictions = {}
    with torch.no_grad():
        for batch in loader:
            tgt_logits, _ = model(batch["context"], batch["target"])
            preds = tgt_logits.argmax(dim=1).cpu().numpy()
            labels = batch["target_label"].cpu().numpy()
            counts.add_(confusion_counts(preds, labels, num_classes, ignore_index))
            if collect_predictions:
                for patch_id, pred in zip(batch["patch_ids"], preds):
                    predictions[patch_id] = pred.astype(np.uint8)
    return Metrics.from_counts(counts, fold=fold), predictions


def run_finetune(data_dir: str | Path, cfg: ExperimentConfig, out_dir: str | Path):
    """Supervised fine-tuning over one fold; returns (best model, Metrics).

    Validation is the held-out fold; training groups are subsampled to the
    configured labeled fraction. The returned model carries the weights of
    the epoch with the best validation macro F1.
    """
    cfg.validate()
    ft = cfg.finetune
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    store = TiledPatchStore(data_dir / "manifest.csv")
    folds = store.load_folds()
    if folds is None:
        raise ConfigError(f"fine-tuning needs {data_dir}/folds.json for its validation split")
    train_all = folds.select_groups(store.groups, ft.fold, "train")
    val_groups = folds.select_groups(store.groups, ft.fold, "val")
    if not val_groups:
        raise ConfigError(f"fold {ft.fold} has no validation groups")
    train_groups = subsample_fraction(train_all, ft.fraction, seed=derive_seed(cfg.seed, "subsample", ft.fold))
    if not train_groups:
        raise ConfigError(
            f"labeled fraction {ft.fraction} of {len(train_all)} training groups selects zero groups"
        )

    model = HookNetModel(num_classes=ft.num_classes, hook_depth=ft.hook_depth, seed=cfg.seed)
    if ft.init != "random":
        init_from_pretrained(model, ft.init)

    write_resolved_config(
        {
            "command": "finetune",
            "config": cfg.to_dict(),
            "data_dir": str(data_dir),
            "train_groups_total": len(train_all),
            "train_groups_used": len(train_groups),
            "val_groups": len(val_groups),
        },
        out_dir,
    )

    train_data = SegmentationPairDataset(store, train_groups, mean=cfg.augmentation.mean, std=cfg.augmentation.std)
    val_data = SegmentationPairDataset(store, val_groups, mean=cfg.augmentation.mean, std=cfg.augmentation.std)
    num_workers = resolve_num_workers()
    val_loader = DataLoader(
        val_data, batch_size=ft.batch_size, shuffle=False, collate_fn=collate_pairs, num_workers=num_workers
    )
    train_eval_loader = DataLoader(
        train_data, batch_size=ft.batch_size, shuffle=False, collate_fn=collate_pairs, num_workers=num_workers
    )

    optimizer = torch.optim.Adam(model.parameters(), lr=ft.learning_rate)
    track_train = ft.track_train_f1 or ft.early_stop_train_f1 is not None

    log_rows = []
    best = {"epoch": -1, "macro_f1": -1.0, "state": None, "metrics": None}

    def consider(metrics: Metrics, epoch: int) -> None:
        if metrics.macro_f1 > best["macro_f1"]:
            best.update(
                epoch=epoch,
                macro_f1=metrics.macro_f1,
                state=copy.deepcopy(model.state_dict()),
                metrics=metrics,
            )

    val_metrics, _ = evaluate_model(model, val_loader, ft.num_classes, ft.ignore_index, fold=ft.fold)
    consider(val_metrics, epoch=-1)  # untrained baseline, so epochs=0 still yields metrics

    stop_early = False
    epochs_run = 0
    for epoch in range(ft.epochs):
        model.train()
        batches = _epoch_batches(len(train_data), ft.batch_size, derive_seed(cfg.seed, "ft-order", ft.fold), epoch)
        loader = DataLoader(
            train_data, batch_sampler=batches, collate_fn=collate_pairs, num_workers=num_workers
        )
        loss_sum, steps = 0.0, 0
        for batch in loader:
            loss = seg_loss(
                *_forward_for_loss(model, batch),
                lambda_context=ft.lambda_context,
                ignore_index=ft.ignore_index,
            )
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite fine-tuning loss at epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.detach())
            steps += 1
        epochs_run = epoch + 1

        val_metrics, _ = evaluate_model(model, val_loader, ft.num_classes, ft.ignore_index, fold=ft.fold)
        consider(val_metrics, epoch=epoch)
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / max(steps, 1),
            "val_macro_f1": val_metrics.macro_f1,
            "val_accuracy": val_metrics.accuracy,
            "train_macro_f1": "",
        }
        if track_train:
            train_metrics, _ = evaluate_model(model, train_eval_loader, ft.num_classes, ft.ignore_index, fold=ft.fold)
            row["train_macro_f1"] = train_metrics.macro_f1
            if ft.early_stop_train_f1 is not None and train_metrics.macro_f1 >= ft.early_stop_train_f1:
                stop_early = True
        log_rows.append(row)
        if stop_early:
            break

    _write_finetune_log(log_rows, out_dir / FINETUNE_LOG)
    if best["state"] is not None:
        model.load_state_dict(best["state"])
    metrics: Metrics = best["metrics"]
    metrics.extra.update(
        fraction=ft.fraction,
        train_groups_total=len(train_all),
        train_groups_used=len(train_groups),
        val_groups=len(val_groups),
        best_epoch=best["epoch"],
        epochs_run=epochs_run,
        init=ft.init,
        stopped_early=stop_early,
    )
    save_hooknet_checkpoint(model, out_dir / MODEL_DIRNAME, cfg, epoch=best["epoch"])
    metrics_path = out_dir / METRICS_FILE
    tmp = metrics_path.with_name(metrics_path.name + ".tmp")
    tmp.write_text(json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
    tmp.replace(metrics_path)
    return model, metrics


def _forward_for_loss(model: HookNetModel, batch: dict):
    tgt_logits, ctx_logits = model(batch["context"], batch["target"])
    return tgt_logits, batch["target_label"], ctx_logits, batch["context_label"]


def _write_finetune_log(rows, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=("epoch", "train_loss", "val_macro_f1", "val_accuracy", "train_macro_f1")
        )
        writer.writeheader()
        writer.writerows(rows)
    tmp.replace(path)
