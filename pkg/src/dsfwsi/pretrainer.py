"""Self-supervised dual-branch training loop.

One step consumes a batch of groups. For each of the two augmented views it
runs the context branch on the wide patches and the target branch on the
narrow ones, pools every stage, builds the fused masked-jigsaw descriptors,
and pushes all three streams through their stage heads. The symmetric
stop-gradient similarity loss is weighted across stages and summed across
streams; one optimizer updates both branches and every head.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader

from . import checkpointing
from .config import STAGE_WIDTHS, ExperimentConfig, config_hash, write_resolved_config
from .ctfm import fuse_batch
from .data_pipeline import (
    PretrainGroupDataset,
    TiledPatchStore,
    collate_pretrain,
    resolve_num_workers,
)
from .dsl_heads import STREAM_COLUMNS, DSLHeadBank, LossReport, stage_loss, total_loss
from .encoder import DualBranchEncoder, global_pool
from .errors import CheckpointError, ConfigError
from .seeding import derive_seed

LOSS_LOG = "loss_log.csv"
LOSS_LOG_COLUMNS = ("epoch", "L_c", "L_t", "L_fu", "L")
PROBE_LOG = "probe_log.csv"
PROBE_EPOCH = -1  # reserved sampling epoch: the probe sees the same draw every time
CHECKPOINT_DIRNAME = "checkpoint"


@dataclass
class PretrainState:
    """Everything a training step mutates."""

    encoder: DualBranchEncoder
    heads: DSLHeadBank
    optimizer: torch.optim.Optimizer
    cfg: ExperimentConfig
    epoch: int = 0  # completed epochs

    @property
    def stage_weight_map(self) -> dict:
        return {i + 1: w for i, w in enumerate(self.cfg.dsl.stage_weights)}


def build_state(cfg: ExperimentConfig, m: int, identity_heads: bool = False) -> PretrainState:
    """Fresh encoder + head bank + optimizer for groups with ``m`` targets."""
    cfg.validate()
    m_eff = cfg.pretrain.targets_per_group or m
    if m_eff > m:
        raise ConfigError(f"pretrain.targets_per_group={m_eff} exceeds the dataset's m={m}")
    encoder = DualBranchEncoder(seed=cfg.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(cfg.seed, "heads"))
        heads = DSLHeadBank(
            stage_widths=STAGE_WIDTHS,
            m=m_eff,
            dsl_enabled=cfg.dsl.dsl_enabled,
            ctfm_enabled=cfg.dsl.ctfm_enabled,
            identity_mode=identity_heads,
        )
    params = list(encoder.parameters()) + list(heads.parameters())
    if cfg.pretrain.optimizer == "adam":
        optimizer = torch.optim.Adam(params, lr=cfg.pretrain.learning_rate)
    else:
        optimizer = torch.optim.SGD(params, lr=cfg.pretrain.learning_rate)
    return PretrainState(encoder=encoder, heads=heads, optimizer=optimizer, cfg=cfg)


def collect_grad_norms(state: PretrainState) -> dict:
    """Gradient L2 norm per parameter group (branches and individual heads)."""

    def norm_of(module: torch.nn.Module) -> float:
        total = 0.0
        for p in module.parameters():
            if p.grad is not None:
                total += float((p.grad.detach() ** 2).sum())
        return total**0.5

    norms = {
        "encoder_context": norm_of(state.encoder.context),
        "encoder_target": norm_of(state.encoder.target),
    }
    for key, head in state.heads.projectors.items():
        norms[f"projector/{key}"] = norm_of(head)
    for key, head in state.heads.predictors.items():
        norms[f"predictor/{key}"] = norm_of(head)
    return norms


def compute_batch_losses(batch: dict, state: PretrainState) -> tuple:
    """Stage losses for one collated batch, no optimizer interaction.

    Returns the weighted total as a tensor plus its LossReport; shared by the
    training step (which backpropagates it) and the probe pass (which only
    reads the value).
    """
    encoder, heads = state.encoder, state.heads

    ctx = batch["context"]  # (B, 2, 3, S, S)
    tgt = batch["targets"]  # (B, 2, t, 3, S, S)
    plans = batch["plans"]  # B pairs of plans
    batch_size, _, t = tgt.shape[0], tgt.shape[1], tgt.shape[2]

    pooled = []  # per view: (per-stage context (B, C), per-stage targets (B, t, C))
    for view in (0, 1):
        ctx_feats = encoder.forward_stages("context", ctx[:, view])
        flat_targets = tgt[:, view].reshape(batch_size * t, *tgt.shape[3:])
        tgt_feats = encoder.forward_stages("target", flat_targets)
        pooled_ctx = [global_pool(f) for f in ctx_feats]
        pooled_tgt = [global_pool(f).reshape(batch_size, t, -1) for f in tgt_feats]
        pooled.append((pooled_ctx, pooled_tgt))

    stage_tensors = {stream: {} for stream in heads.active_streams}
    for stage in heads.active_stages:
        idx = stage - 1
        outputs = {}  # view -> stream -> (z, p)
        for view in (0, 1):
            pooled_ctx, pooled_tgt = pooled[view]
            stream_inputs = {
                "context": pooled_ctx[idx],
                "target": pooled_tgt[idx].reshape(batch_size * t, -1),
            }
            if "fusion" in heads.active_streams:
                view_plans = [plans[b][view] for b in range(batch_size)]
                stream_inputs["fusion"] = fuse_batch(pooled_ctx[idx], pooled_tgt[idx], view_plans)
            outputs[view] = {}
            for stream in heads.active_streams:
                z = heads.project(stream_inputs[stream], stage, stream)
                p = heads.predict(z, stage, stream)
                outputs[view][stream] = (z, p)
        for stream in heads.active_streams:
            z1, p1 = outputs[0][stream]
            z2, p2 = outputs[1][stream]
            stage_tensors[stream][stage] = stage_loss(p1, z2, p2, z1)

    return total_loss(stage_tensors, state.stage_weight_map)


def pretrain_step(batch: dict, state: PretrainState, track_grad_norms: bool = False) -> LossReport:
    """One optimization step over a collated batch of groups."""
    state.encoder.train()
    state.heads.train()
    if batch["targets"].shape[0] < 2:
        raise ConfigError("pretraining steps need at least 2 groups (batch statistics)")
    total, report = compute_batch_losses(batch, state)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if track_grad_norms:
        report.grad_norms = collect_grad_norms(state)
    state.optimizer.step()
    return report


def _epoch_batches(n_items: int, batch_size: int, seed: int, epoch: int) -> list:
    """Seeded permutation chopped into batches; a trailing singleton is folded
    into the previous batch (batch statistics need >= 2 rows)."""
    order = [int(i) for i in np.random.default_rng(derive_seed(seed, "order", epoch)).permutation(n_items)]
    batches = [order[i : i + batch_size] for i in range(0, n_items, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def select_probe_indices(n_groups: int, cfg: ExperimentConfig) -> list:
    """Seed-derived subset of group indices scored by the probe pass."""
    count = min(n_groups, cfg.pretrain.probe_groups)
    if count <= 0:
        return []
    rng = np.random.default_rng(derive_seed(cfg.seed, "probe"))
    return sorted(int(i) for i in rng.permutation(n_groups)[:count])


def _probe_pass(dataset, indices: list, state: PretrainState, batch_size: int, num_workers: int) -> tuple:
    """Mean losses over the probe subset with frozen inputs.

    The dataset is pinned to the reserved sampling epoch, so views, fusion
    plans, and target subsets are identical on every call. Modules run in
    train mode so normalization uses the (fixed) probe batches rather than
    running statistics, which lag the training stream and would leak its
    sampling noise into the curve; every norm buffer is snapshotted and
    restored, so the pass is bitwise side-effect free and the curve moves
    only when the learned weights move. Returns (per-stream means, total).
    """
    dataset.set_epoch(PROBE_EPOCH)
    batches = [indices[i : i + batch_size] for i in range(0, len(indices), batch_size)]
    loader = DataLoader(dataset, batch_sampler=batches, collate_fn=collate_pretrain, num_workers=num_workers)
    state.encoder.train()
    state.heads.train()
    norms = [
        m
        for module in (state.encoder, state.heads)
        for m in module.modules()
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)
    ]
    saved = [
        (m, m.momentum, {k: v.clone() for k, v in m.named_buffers(recurse=False)})
        for m in norms
    ]
    for m in norms:
        m.momentum = 0.0
    branch_sums: dict = {}
    total_sum = 0.0
    steps = 0
    try:
        with torch.no_grad():
            for batch in loader:
                _, report = compute_batch_losses(batch, state)
                for stream, value in report.branch_losses.items():
                    branch_sums[stream] = branch_sums.get(stream, 0.0) + value
                total_sum += report.total
                steps += 1
    finally:
        for m, momentum, buffers in saved:
            m.momentum = momentum
            for key, value in buffers.items():
                getattr(m, key).copy_(value)
    return {k: v / steps for k, v in branch_sums.items()}, total_sum / steps


class LossLog:
    """Append-only CSV of per-epoch mean losses, truncatable for resumes."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def rows(self) -> list:
        if not self.path.exists():
            return []
        with open(self.path, newline="") as fh:
            return list(csv.DictReader(fh))

    def truncate(self, keep_epochs_below: int) -> None:
        rows = [r for r in self.rows() if int(r["epoch"]) < keep_epochs_below]
        self._write(rows)

    def append(self, epoch: int, branch_means: dict, total_mean: float) -> None:
        rows = self.rows()
        row = {"epoch": str(epoch), "L": repr(total_mean)}
        for stream, column in STREAM_COLUMNS.items():
            row[column] = repr(branch_means[stream]) if stream in branch_means else ""
        rows.append(row)
        self._write(rows)

    def _write(self, rows: list) -> None:
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOSS_LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        tmp.replace(self.path)


def _checkpoint_metadata(state: PretrainState) -> dict:
    return {
        "kind": "pretrain",
        "epoch": state.epoch,
        "config_hash": config_hash(state.cfg),
        "config": state.cfg.to_dict(),
        "seed": state.cfg.seed,
        "stage_widths": list(STAGE_WIDTHS),
        "bank_m": state.heads.m,
    }


def save_pretrain_checkpoint(state: PretrainState, path: Path) -> Path:
    branch_meta = lambda branch: {
        "branch": branch,
        "stage_widths": list(STAGE_WIDTHS),
        "seed": state.cfg.seed,
    }
    return checkpointing.save_checkpoint(
        path,
        modules={
            "encoder_context": state.encoder.context,
            "encoder_target": state.encoder.target,
            "heads": state.heads,
        },
        metadata=_checkpoint_metadata(state),
        optimizer=state.optimizer,
        module_metadata={
            "encoder_context": branch_meta("context"),
            "encoder_target": branch_meta("target"),
        },
    )


def load_pretrain_checkpoint(state: PretrainState, path: Path) -> dict:
    metadata = checkpointing.load_checkpoint(
        path,
        modules={
            "encoder_context": state.encoder.context,
            "encoder_target": state.encoder.target,
            "heads": state.heads,
        },
        optimizer=state.optimizer,
    )
    state.epoch = int(metadata.get("epoch", 0))
    return metadata


def _config_diff(stored: dict, current: dict, prefix: str = "") -> list:
    keys = sorted(set(stored) | set(current))
    diffs = []
    for key in keys:
        a, b = stored.get(key), current.get(key)
        label = f"{prefix}{key}"
        if isinstance(a, dict) and isinstance(b, dict):
            diffs.extend(_config_diff(a, b, prefix=f"{label}."))
        elif a != b:
            diffs.append(f"{label}: checkpoint={a!r} current={b!r}")
    return diffs


def select_pretrain_groups(store: TiledPatchStore, cfg: ExperimentConfig) -> list:
    groups = store.groups
    if cfg.pretrain.pretrain_on == "train":
        folds = store.load_folds()
        if folds is None:
            raise ConfigError(
                "pretrain.pretrain_on='train' needs a folds.json beside the manifest; "
                "re-run tiling or set pretrain_on='all'"
            )
        groups = folds.select_groups(groups, cfg.pretrain.fold, "train")
    return groups


def run_pretraining(data_dir: str | Path, cfg: ExperimentConfig, out_dir: str | Path, resume: bool = False) -> Path:
    """Train from a tiled directory; returns the final checkpoint path.

    With ``epochs == 0`` the initial state is checkpointed and no step runs.
    Resuming from the written checkpoint reproduces the exact loss log of an
    uninterrupted run (all randomness is (seed, epoch)-derived).

    Two curves are written: ``loss_log.csv`` holds the per-epoch means of the
    training batches (whose views and plans are redrawn every epoch), and
    ``probe_log.csv`` re-scores a small fixed subset after each epoch with
    frozen views/plans, isolating optimization progress from input
    resampling. ``pretrain.probe_groups = 0`` disables the second curve.
    """
    cfg.validate()
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(max(1, torch.get_num_threads()))

    store = TiledPatchStore(data_dir / "manifest.csv")
    groups = select_pretrain_groups(store, cfg)
    if len(groups) < 2:
        raise ConfigError(f"pretraining needs at least 2 groups, found {len(groups)}")

    state = build_state(cfg, m=store.m)
    log = LossLog(out_dir / LOSS_LOG)
    probe_indices = select_probe_indices(len(groups), cfg)
    probe_log = LossLog(out_dir / PROBE_LOG) if probe_indices else None
    final_path = out_dir / CHECKPOINT_DIRNAME

    if resume:
        source = final_path if final_path.exists() else None
        if source is None:
            raise CheckpointError(f"cannot resume: no checkpoint under {out_dir}")
        metadata = load_pretrain_checkpoint(state, source)
        stored_hash = metadata.get("config_hash")
        current_hash = config_hash(cfg)
        if stored_hash != current_hash:
            # JSON round-trip normalizes tuples to lists before diffing.
            current_norm = json.loads(json.dumps(cfg.to_dict()))
            diffs = _config_diff(metadata.get("config", {}), current_norm) or [
                f"config_hash: checkpoint={stored_hash} current={current_hash}"
            ]
            raise ConfigError("resume config mismatch: " + "; ".join(diffs))
        log.truncate(state.epoch)
        if probe_log:
            probe_log.truncate(state.epoch)
    else:
        log.truncate(0)
        if probe_log:
            probe_log.truncate(0)

    write_resolved_config({"command": "pretrain", "config": cfg.to_dict(), "data_dir": str(data_dir)}, out_dir)

    dataset = PretrainGroupDataset(
        store,
        groups,
        aug_cfg=cfg.augmentation,
        ctfm_cfg=cfg.ctfm,
        dsl_cfg=cfg.dsl,
        master_seed=cfg.seed,
        targets_per_group=cfg.pretrain.targets_per_group,
    )
    num_workers = resolve_num_workers()

    for epoch in range(state.epoch, cfg.pretrain.epochs):
        dataset.set_epoch(epoch)
        batches = _epoch_batches(len(groups), cfg.pretrain.batch_size, cfg.seed, epoch)
        loader = DataLoader(
            dataset,
            batch_sampler=batches,
            collate_fn=collate_pretrain,
            num_workers=num_workers,
        )
        branch_sums: dict = {}
        total_sum = 0.0
        steps = 0
        for batch in loader:
            report = pretrain_step(batch, state)
            for stream, value in report.branch_losses.items():
                branch_sums[stream] = branch_sums.get(stream, 0.0) + value
            total_sum += report.total
            steps += 1
        state.epoch = epoch + 1
        branch_means = {k: v / steps for k, v in branch_sums.items()}
        log.append(epoch, branch_means, total_sum / steps)
        if probe_log:
            probe_means, probe_total = _probe_pass(
                dataset, probe_indices, state, cfg.pretrain.batch_size, num_workers
            )
            probe_log.append(epoch, probe_means, probe_total)
        every = cfg.pretrain.checkpoint_every
        if every and state.epoch % every == 0 and state.epoch < cfg.pretrain.epochs:
            save_pretrain_checkpoint(state, out_dir / "checkpoints" / f"epoch_{state.epoch:04d}")
            save_pretrain_checkpoint(state, final_path)

    save_pretrain_checkpoint(state, final_path)
    return final_path
