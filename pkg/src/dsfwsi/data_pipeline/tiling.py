"""Paired context/target tiling of two-level slide pyramids.

A slide is held at two magnifications: a low level (wide field of view) and a
high level that is ``ratio`` times larger per side. Context patches slide over
the low level; each context window is partitioned into a grid of target
windows whose pixels are read from the high level, so every group couples one
coarse view with the m = grid^2 fine views covering exactly the same field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..config import TilingConfig

# Inclusive per-channel ceilings; a pixel is tissue iff all three channels sit
# at or below these values (bright glass background fails the test).
TISSUE_MAX_RGB = (235, 210, 235)

CONTEXT_SLOT = -1


@dataclass(frozen=True)
class SlideSource:
    """An in-memory two-level slide with an optional high-level label map."""

    slide_id: str
    low: np.ndarray  # (H, W, 3) uint8
    high: np.ndarray  # (H*ratio, W*ratio, 3) uint8
    ratio: int
    label_high: np.ndarray | None = None  # (H*ratio, W*ratio) integer classes
    magnification_low: float = 10.0

    def __post_init__(self):
        if self.low.ndim != 3 or self.low.shape[2] != 3:
            raise ValueError(f"slide {self.slide_id}: low level must be (H, W, 3)")
        if self.high.ndim != 3 or self.high.shape[2] != 3:
            raise ValueError(f"slide {self.slide_id}: high level must be (H, W, 3)")
        if self.ratio < 1 or int(self.ratio) != self.ratio:
            raise ValueError(f"slide {self.slide_id}: ratio must be a positive integer")
        expected = (self.low.shape[0] * self.ratio, self.low.shape[1] * self.ratio)
        if self.high.shape[:2] != expected:
            raise ValueError(
                f"slide {self.slide_id}: high level shape {self.high.shape[:2]} "
                f"!= low level shape x ratio {expected}"
            )
        if self.label_high is not None and self.label_high.shape != self.high.shape[:2]:
            raise ValueError(
                f"slide {self.slide_id}: label shape {self.label_high.shape} "
                f"!= high level shape {self.high.shape[:2]}"
            )

    @property
    def magnification_high(self) -> float:
        return self.magnification_low * self.ratio


@dataclass(frozen=True)
class PatchRecord:
    """One manifest row: where a patch came from and how it is materialized."""

    patch_id: str
    slide_id: str
    role: str  # "context" | "target"
    origin_x: int  # pixel coordinates in the patch's source level
    origin_y: int
    window: int  # crop side length in source-level pixels
    output_size: int
    tissue_fraction: float
    group_id: str
    slot_index: int  # CONTEXT_SLOT for context, row-major 0..m-1 for targets
    label_path: str | None = None


@dataclass
class ContextGroup:
    """A context patch together with the target patches tiling its field."""

    group_id: str
    context: PatchRecord
    targets: list  # of PatchRecord, sorted by slot_index (row-major)

    @property
    def m(self) -> int:
        return len(self.targets)

    @property
    def slide_id(self) -> str:
        return self.context.slide_id


def compute_tissue_mask(image: np.ndarray) -> np.ndarray:
    """Boolean mask of tissue pixels for an (H, W, 3) uint8 image."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    r_max, g_max, b_max = TISSUE_MAX_RGB
    return (image[..., 0] <= r_max) & (image[..., 1] <= g_max) & (image[..., 2] <= b_max)


def tissue_fraction(image: np.ndarray) -> float:
    mask = compute_tissue_mask(image)
    return float(mask.mean()) if mask.size else 0.0


def window_starts(extent: int, window: int, step: int) -> list:
    """Origins of full windows of size ``window`` striding by ``step``.

    Windows that would overrun the extent are dropped, never clipped.
    """
    if window <= 0 or step <= 0:
        raise ValueError("window and step must be positive")
    return list(range(0, extent - window + 1, step))


def tile_slide(slide: SlideSource, cfg: TilingConfig) -> list:
    """Enumerate context groups for one slide.

    Pure: identical inputs give identical groups. Context windows whose
    low-level tissue fraction falls below ``cfg.min_tissue_fraction`` are
    dropped with all their targets.
    """
    cfg.validate()
    grid = cfg.grid
    high_window = cfg.target_window * slide.ratio
    height, width = slide.low.shape[:2]
    has_labels = slide.label_high is not None

    groups = []
    for oy in window_starts(height, cfg.context_window, cfg.context_step):
        for ox in window_starts(width, cfg.context_window, cfg.context_step):
            crop = slide.low[oy : oy + cfg.context_window, ox : ox + cfg.context_window]
            frac = tissue_fraction(crop)
            if frac < cfg.min_tissue_fraction:
                continue
            group_id = f"{slide.slide_id}_x{ox}_y{oy}"
            ctx_id = f"{slide.slide_id}_c_x{ox}_y{oy}"
            context = PatchRecord(
                patch_id=ctx_id,
                slide_id=slide.slide_id,
                role="context",
                origin_x=ox,
                origin_y=oy,
                window=cfg.context_window,
                output_size=cfg.output_size,
                tissue_fraction=frac,
                group_id=group_id,
                slot_index=CONTEXT_SLOT,
                label_path=f"labels/{ctx_id}.png" if has_labels else None,
            )
            targets = []
            for row in range(grid):
                for col in range(grid):
                    hx = (ox + col * cfg.target_window) * slide.ratio
                    hy = (oy + row * cfg.target_window) * slide.ratio
                    t_crop = slide.high[hy : hy + high_window, hx : hx + high_window]
                    t_id = f"{slide.slide_id}_t_x{hx}_y{hy}"
                    targets.append(
                        PatchRecord(
                            patch_id=t_id,
                            slide_id=slide.slide_id,
                            role="target",
                            origin_x=hx,
                            origin_y=hy,
                            window=high_window,
                            output_size=cfg.output_size,
                            tissue_fraction=tissue_fraction(t_crop),
                            group_id=group_id,
                            slot_index=row * grid + col,
                            label_path=f"labels/{t_id}.png" if has_labels else None,
                        )
                    )
            groups.append(ContextGroup(group_id=group_id, context=context, targets=targets))
    return groups


def check_partition(group: ContextGroup, ratio: int) -> None:
    """Verify the group's targets exactly tile the context field of view.

    Interval arithmetic on the emitted coordinates: each target rectangle is
    mapped from high-level to low-level units and the union must equal the
    context rectangle with no overlap and no gap.
    """
    ctx = group.context
    cells = set()
    side = None
    for t in group.targets:
        if t.window % ratio != 0 or t.origin_x % ratio != 0 or t.origin_y % ratio != 0:
            raise ValueError(f"group {group.group_id}: target {t.patch_id} not aligned to ratio {ratio}")
        low_w = t.window // ratio
        if side is None:
            side = low_w
        elif side != low_w:
            raise ValueError(f"group {group.group_id}: mixed target window sizes")
        cells.add((t.origin_x // ratio, t.origin_y // ratio))
    grid = ctx.window // side
    expected = {
        (ctx.origin_x + c * side, ctx.origin_y + r * side) for r in range(grid) for c in range(grid)
    }
    if grid * side != ctx.window:
        raise ValueError(f"group {group.group_id}: target size {side} does not divide context window")
    if cells != expected:
        raise ValueError(f"group {group.group_id}: targets do not partition the context window")
    if len(group.targets) != len(expected):
        raise ValueError(f"group {group.group_id}: duplicate target cells")


def render_patch(slide: SlideSource, record: PatchRecord) -> np.ndarray:
    """Materialize a patch as an (S, S, 3) uint8 array (bilinear resample)."""
    src = slide.low if record.role == "context" else slide.high
    crop = src[record.origin_y : record.origin_y + record.window, record.origin_x : record.origin_x + record.window]
    if crop.shape[0] != record.window or crop.shape[1] != record.window:
        raise ValueError(f"patch {record.patch_id} overruns its source level")
    if record.window == record.output_size:
        return crop.copy()
    img = Image.fromarray(crop)
    img = img.resize((record.output_size, record.output_size), Image.BILINEAR)
    return np.asarray(img)


def render_label(slide: SlideSource, record: PatchRecord) -> np.ndarray:
    """Materialize a patch's class-index map (nearest-neighbour resample).

    Labels always live on the high level; a context patch's field of view is
    mapped through the magnification ratio.
    """
    if slide.label_high is None:
        raise ValueError(f"slide {slide.slide_id} has no labels")
    if record.role == "context":
        x0 = record.origin_x * slide.ratio
        y0 = record.origin_y * slide.ratio
        w = record.window * slide.ratio
    else:
        x0, y0, w = record.origin_x, record.origin_y, record.window
    crop = slide.label_high[y0 : y0 + w, x0 : x0 + w]
    if crop.shape != (w, w):
        raise ValueError(f"label for patch {record.patch_id} overruns the label map")
    if w == record.output_size:
        return crop.astype(np.uint8, copy=True)
    img = Image.fromarray(crop.astype(np.uint8))
    img = img.resize((record.output_size, record.output_size), Image.NEAREST)
    return np.asarray(img)
