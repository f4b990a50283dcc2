"""Slide synthesis, tiling, manifests, splits, and torch dataset wrappers."""

from .loaders import (
    NUM_WORKERS_ENV,
    PretrainGroupDataset,
    SegmentationPairDataset,
    TiledPatchStore,
    collate_pairs,
    collate_pretrain,
    resolve_num_workers,
)
from .manifest import MANIFEST_COLUMNS, groups_to_records, read_manifest, write_manifest
from .materialize import tile_dataset
from .splits import FOLDS_FILENAME, FoldSpec, split_folds, subsample_fraction
from .synthetic import (
    DATASET_INDEX,
    generate_slide,
    generate_synthetic_dataset,
    iter_slides,
    load_slide,
    read_dataset_index,
)
from .tiling import (
    CONTEXT_SLOT,
    TISSUE_MAX_RGB,
    ContextGroup,
    PatchRecord,
    SlideSource,
    check_partition,
    compute_tissue_mask,
    render_label,
    render_patch,
    tile_slide,
    tissue_fraction,
    window_starts,
)

__all__ = [
    "NUM_WORKERS_ENV",
    "PretrainGroupDataset",
    "SegmentationPairDataset",
    "TiledPatchStore",
    "collate_pairs",
    "collate_pretrain",
    "resolve_num_workers",
    "MANIFEST_COLUMNS",
    "tile_dataset",
    "groups_to_records",
    "read_manifest",
    "write_manifest",
    "FOLDS_FILENAME",
    "FoldSpec",
    "split_folds",
    "subsample_fraction",
    "DATASET_INDEX",
    "generate_slide",
    "generate_synthetic_dataset",
    "iter_slides",
    "load_slide",
    "read_dataset_index",
    "CONTEXT_SLOT",
    "TISSUE_MAX_RGB",
    "ContextGroup",
    "PatchRecord",
    "SlideSource",
    "check_partition",
    "compute_tissue_mask",
    "render_label",
    "render_patch",
    "tile_slide",
    "tissue_fraction",
    "window_starts",
]
