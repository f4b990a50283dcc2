"""Directory checkpoints: one ``.npy`` per named parameter plus JSON metadata.

Layout of a checkpoint directory::

    ckpt/
      metadata.json            run-level: format_version, kind, epoch,
                               config_hash, seed, stage_widths, ...
      <module>/                one directory per saved module
        metadata.json          optional module-level metadata
        <param.name>.npy       every entry of module.state_dict()
      optimizer/               optional optimizer state
        meta.json  +  <idx>.<key>.npy

Buffers (batch-norm running stats) are saved alongside parameters so a
reloaded model reproduces forward passes bit-identically in eval mode.
Writes go to a temporary sibling directory and are renamed into place.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1
METADATA_FILE = "metadata.json"
OPTIMIZER_DIR = "optimizer"


def _write_json(data: dict, path: Path) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def save_module_arrays(module: torch.nn.Module, directory: Path, metadata: dict | None = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, tensor in module.state_dict().items():
        np.save(directory / f"{name}.npy", tensor.detach().cpu().numpy())
    if metadata is not None:
        _write_json({"format_version": FORMAT_VERSION, **metadata}, directory / METADATA_FILE)


def load_module_arrays(module: torch.nn.Module, directory: Path, where: str) -> None:
    """Fill ``module`` from a checkpoint subdirectory, verifying integrity."""
    if not directory.is_dir():
        raise CheckpointError(f"checkpoint has no '{where}' arrays ({directory} missing)")
    reference = module.state_dict()
    on_disk = {p.name[: -len(".npy")] for p in directory.glob("*.npy")}
    missing = sorted(set(reference) - on_disk)
    if missing:
        raise CheckpointError(f"checkpoint {where} is missing array(s): {', '.join(missing)}")
    unexpected = sorted(on_disk - set(reference))
    if unexpected:
        raise CheckpointError(f"checkpoint {where} has unexpected array(s): {', '.join(unexpected)}")
    loaded = {}
    for name, tensor in reference.items():
        array = np.load(directory / f"{name}.npy")
        if tuple(array.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"checkpoint {where}: parameter '{name}' has shape {tuple(array.shape)}, "
                f"model expects {tuple(tensor.shape)}"
            )
        loaded[name] = torch.from_numpy(array).to(tensor.dtype)
    module.load_state_dict(loaded)


def _save_optimizer(optimizer: torch.optim.Optimizer, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    sd = optimizer.state_dict()
    meta = {"param_groups": sd["param_groups"], "scalars": {}, "arrays": {}}
    for idx, state in sd["state"].items():
        key = str(idx)
        for field, value in state.items():
            if torch.is_tensor(value) and value.ndim > 0:
                np.save(directory / f"{idx}.{field}.npy", value.detach().cpu().numpy())
                meta["arrays"].setdefault(key, []).append(field)
            elif torch.is_tensor(value):
                meta["scalars"].setdefault(key, {})[field] = float(value)
            else:
                meta["scalars"].setdefault(key, {})[field] = value
    _write_json(meta, directory / "meta.json")


def _load_optimizer(optimizer: torch.optim.Optimizer, directory: Path) -> None:
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise CheckpointError(f"checkpoint optimizer state is missing ({meta_path})")
    meta = json.loads(meta_path.read_text())
    state = {}
    for key, fields in meta["arrays"].items():
        entry = state.setdefault(int(key), {})
        for field in fields:
            path = directory / f"{key}.{field}.npy"
            if not path.exists():
                raise CheckpointError(f"checkpoint optimizer is missing array {path.name}")
            entry[field] = torch.from_numpy(np.load(path))
    for key, fields in meta["scalars"].items():
        entry = state.setdefault(int(key), {})
        for field, value in fields.items():
            # Adam tracks its step count as a scalar tensor.
            entry[field] = torch.tensor(float(value)) if field == "step" else value
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_checkpoint(
    path: str | Path,
    modules: dict,
    metadata: dict,
    optimizer: torch.optim.Optimizer | None = None,
    module_metadata: dict | None = None,
) -> Path:
    """Write a complete checkpoint atomically; returns its path."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    for name, module in modules.items():
        sub_meta = (module_metadata or {}).get(name)
        save_module_arrays(module, tmp / name, metadata=sub_meta)
    if optimizer is not None:
        _save_optimizer(optimizer, tmp / OPTIMIZER_DIR)
    _write_json({"format_version": FORMAT_VERSION, **metadata}, tmp / METADATA_FILE)
    if path.exists():
        shutil.rmtree(path)
    tmp.replace(path)
    return path


def read_metadata(path: str | Path) -> dict:
    path = Path(path)
    meta_path = path / METADATA_FILE
    if not meta_path.exists():
        raise CheckpointError(f"{path} is not a checkpoint (no {METADATA_FILE})")
    try:
        metadata = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{meta_path} is corrupt: {exc}") from None
    version = metadata.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {version!r}; this build reads {FORMAT_VERSION}"
        )
    return metadata


def load_checkpoint(
    path: str | Path,
    modules: dict,
    optimizer: torch.optim.Optimizer | None = None,
) -> dict:
    """Restore modules (and optionally optimizer) in place; returns metadata."""
    path = Path(path)
    metadata = read_metadata(path)
    for name, module in modules.items():
        load_module_arrays(module, path / name, where=name)
    if optimizer is not None:
        _load_optimizer(optimizer, path / OPTIMIZER_DIR)
    return metadata
