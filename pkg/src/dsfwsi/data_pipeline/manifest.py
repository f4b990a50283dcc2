"""CSV patch manifests: the on-disk contract between tiling and training.

One row per patch. Target rows carry the row-major slot index inside their
group; the context row of a group uses slot -1. Reading reassembles groups
and validates their integrity so downstream code never sees a torn group.
"""

from __future__ import annotations

import csv
from pathlib import Path

from ..errors import ManifestError
from .tiling import CONTEXT_SLOT, ContextGroup, PatchRecord

MANIFEST_COLUMNS = (
    "patch_id",
    "slide_id",
    "role",
    "origin_x",
    "origin_y",
    "window",
    "output_size",
    "tissue_fraction",
    "group_id",
    "slot_index",
    "label_path",
)

_INT_FIELDS = ("origin_x", "origin_y", "window", "output_size", "slot_index")
_FLOAT_FIELDS = ("tissue_fraction",)


def groups_to_records(groups) -> list:
    records = []
    for group in groups:
        records.append(group.context)
        records.extend(group.targets)
    return records


def write_manifest(groups, path: str | Path) -> Path:
    """Write a manifest atomically (write-then-rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in groups_to_records(groups):
            writer.writerow(
                [
                    rec.patch_id,
                    rec.slide_id,
                    rec.role,
                    rec.origin_x,
                    rec.origin_y,
                    rec.window,
                    rec.output_size,
                    repr(rec.tissue_fraction),
                    rec.group_id,
                    rec.slot_index,
                    rec.label_path or "",
                ]
            )
    tmp.replace(path)
    return path


def _parse_row(row: dict, line: int) -> PatchRecord:
    values = dict(row)
    for name in _INT_FIELDS:
        try:
            values[name] = int(values[name])
        except (ValueError, TypeError):
            raise ManifestError(
                f"line {line}: field '{name}': cannot parse {row.get(name)!r} as an integer"
            ) from None
    for name in _FLOAT_FIELDS:
        try:
            values[name] = float(values[name])
        except (ValueError, TypeError):
            raise ManifestError(
                f"line {line}: field '{name}': cannot parse {row.get(name)!r} as a number"
            ) from None
    if values["role"] not in ("context", "target"):
        raise ManifestError(f"line {line}: field 'role': expected 'context' or 'target', got {row.get('role')!r}")
    if values["role"] == "context" and values["slot_index"] != CONTEXT_SLOT:
        raise ManifestError(f"line {line}: context rows must use slot_index {CONTEXT_SLOT}")
    if values["role"] == "target" and values["slot_index"] < 0:
        raise ManifestError(f"line {line}: target rows must use a non-negative slot_index")
    if not values["label_path"]:
        values["label_path"] = None
    return PatchRecord(**values)


def read_manifest(path: str | Path) -> list:
    """Parse a manifest back into validated context groups (file order)."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, expected a header row") from None
        if tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"{path}: bad header {header!r}; expected {list(MANIFEST_COLUMNS)!r}"
            )
        records = []
        for line, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"line {line}: expected {len(MANIFEST_COLUMNS)} fields, got {len(raw)}")
            records.append(_parse_row(dict(zip(MANIFEST_COLUMNS, raw)), line))

    by_group: dict = {}
    order = []
    for rec in records:
        if rec.group_id not in by_group:
            by_group[rec.group_id] = {"context": None, "targets": {}}
            order.append(rec.group_id)
        bucket = by_group[rec.group_id]
        if rec.role == "context":
            if bucket["context"] is not None:
                raise ManifestError(f"group {rec.group_id} has more than one context patch")
            bucket["context"] = rec
        else:
            if rec.slot_index in bucket["targets"]:
                raise ManifestError(f"group {rec.group_id} has duplicate target slot {rec.slot_index}")
            bucket["targets"][rec.slot_index] = rec

    groups = []
    m_seen = None
    for group_id in order:
        bucket = by_group[group_id]
        if bucket["context"] is None:
            raise ManifestError(f"group {group_id} references unknown patch: no context row")
        slots = bucket["targets"]
        if not slots:
            raise ManifestError(f"group {group_id} references unknown patch: no target rows")
        m = max(slots) + 1
        missing = sorted(set(range(m)) - set(slots))
        if missing:
            raise ManifestError(
                f"group {group_id} references unknown patch: missing target slot(s) {missing}"
            )
        if m_seen is None:
            m_seen = m
        elif m != m_seen:
            raise ManifestError(
                f"group {group_id} has {m} targets but earlier groups have {m_seen}; manifests must be uniform"
            )
        groups.append(
            ContextGroup(
                group_id=group_id,
                context=bucket["context"],
                targets=[slots[i] for i in range(m)],
            )
        )
    return groups
