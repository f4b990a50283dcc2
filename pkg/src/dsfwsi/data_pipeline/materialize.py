"""Materialize a tiled patch directory from a slide dataset.

Output layout::

    tiles/
      manifest.csv    folds.json
      patches/<patch_id>.png      lossless RGB at the output size
      labels/<patch_id>.png       single-channel class indices (when labeled)
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..config import TilingConfig
from ..errors import ConfigError
from .manifest import write_manifest
from .splits import FOLDS_FILENAME, split_folds
from .synthetic import iter_slides
from .tiling import render_label, render_patch, tile_slide


def _save_png(array: np.ndarray, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(array).save(tmp, format="PNG")
    tmp.replace(path)


def tile_dataset(
    dataset_dir: str | Path,
    out_dir: str | Path,
    cfg: TilingConfig,
    num_folds: int,
    seed: int,
) -> list:
    """Tile every slide, write patches + manifest + fold split; returns groups."""
    cfg.validate()
    out_dir = Path(out_dir)
    patches_dir = out_dir / "patches"
    labels_dir = out_dir / "labels"
    patches_dir.mkdir(parents=True, exist_ok=True)

    all_groups = []
    for slide in iter_slides(dataset_dir):
        groups = tile_slide(slide, cfg)
        for group in groups:
            for record in [group.context, *group.targets]:
                _save_png(render_patch(slide, record), patches_dir / f"{record.patch_id}.png")
                if record.label_path is not None:
                    labels_dir.mkdir(exist_ok=True)
                    _save_png(render_label(slide, record), out_dir / record.label_path)
        all_groups.extend(groups)

    if not all_groups:
        raise ConfigError(
            "tiling produced no groups (slides smaller than the context window, "
            "or every window below the tissue threshold)"
        )
    write_manifest(all_groups, out_dir / "manifest.csv")
    folds = split_folds(all_groups, k=num_folds, seed=seed)
    folds.save(out_dir / FOLDS_FILENAME)
    return all_groups
