"""Synthetic two-level slide pyramids with pixel-aligned class labels.

Each slide starts as a smoothed noise field quantile-thresholded into class
regions at the low level, so requested class fractions are honoured almost
exactly. Labels are upsampled pixel-exactly to the high level, the high-level
image is painted from a per-class palette with two scales of texture noise,
and the low-level image is the block mean of the high-level one — the same
relationship real pyramid levels have.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from ..config import SynthConfig
from .tiling import SlideSource

DATASET_FORMAT_VERSION = 1
DATASET_INDEX = "dataset.json"

# Stain-like palette; every base colour sits inside the tissue thresholds so
# foreground classes never read as glass background.
_BASE_PALETTE = np.array(
    [
        (214, 176, 210),  # pale stroma
        (148, 92, 158),  # dense nuclei
        (186, 120, 148),  # eosinophilic mass
        (120, 140, 170),
        (170, 150, 120),
        (104, 112, 124),
    ],
    dtype=np.float32,
)

_MOTTLE_AMPLITUDE = 12.0
_NOISE_AMPLITUDE = 5.0


def class_palette(classes: int) -> np.ndarray:
    """(classes, 3) float32 base colours; extended deterministically if needed."""
    if classes <= len(_BASE_PALETTE):
        return _BASE_PALETTE[:classes].copy()
    extra_rng = np.random.default_rng(1830293)
    extra = extra_rng.uniform(60.0, 200.0, size=(classes - len(_BASE_PALETTE), 3)).astype(np.float32)
    return np.concatenate([_BASE_PALETTE, extra], axis=0)


def _smooth_field(rng: np.random.Generator, size: int, coarse: int, sigma_frac: float) -> np.ndarray:
    """Smoothed noise generated at a coarse grid and bilinearly upsampled.

    Filtering at full slide resolution with a proportionally scaled sigma
    costs tens of seconds per slide; the coarse grid gives the same blob
    structure at a fixed price.
    """
    coarse = min(size, coarse)
    field = gaussian_filter(rng.standard_normal((coarse, coarse)), sigma=max(coarse * sigma_frac, 1.0))
    if coarse == size:
        return field
    img = Image.fromarray(field.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float64)


def generate_slide(slide_id: str, cfg: SynthConfig, seed_seq: np.random.SeedSequence) -> SlideSource:
    rng = np.random.default_rng(seed_seq)
    low = cfg.low_size
    high = low * cfg.ratio
    fractions = np.asarray(cfg.fractions(), dtype=np.float64)

    # Class regions: smooth field cut at the fractions' cumulative quantiles.
    field = _smooth_field(rng, low, coarse=256, sigma_frac=1.0 / 16.0)
    if cfg.classes == 1:
        label_low = np.zeros((low, low), dtype=np.uint8)
    else:
        thresholds = np.quantile(field, np.cumsum(fractions)[:-1])
        label_low = np.digitize(field, thresholds).astype(np.uint8)

    label_high = np.repeat(np.repeat(label_low, cfg.ratio, axis=0), cfg.ratio, axis=1)

    palette = class_palette(cfg.classes)
    image = palette[label_high]  # (high, high, 3) float32
    factor = 4 if high % 4 == 0 else (2 if high % 2 == 0 else 1)
    mottle = gaussian_filter(
        rng.standard_normal((high // factor, high // factor), dtype=np.float32), sigma=8.0 / factor
    )
    if factor > 1:
        mottle = np.repeat(np.repeat(mottle, factor, axis=0), factor, axis=1)
    image += mottle[..., None] * _MOTTLE_AMPLITUDE
    image += rng.standard_normal((high, high, 3), dtype=np.float32) * _NOISE_AMPLITUDE
    np.clip(image, 0.0, 255.0, out=image)
    high_img = image.astype(np.uint8)

    low_img = (
        high_img.reshape(low, cfg.ratio, low, cfg.ratio, 3)
        .mean(axis=(1, 3))
        .round()
        .astype(np.uint8)
    )

    return SlideSource(
        slide_id=slide_id,
        low=low_img,
        high=high_img,
        ratio=cfg.ratio,
        label_high=label_high,
    )


def _save_png(array: np.ndarray, path: Path) -> None:
    tmp = path.with_suffix(".tmp.png")
    Image.fromarray(array).save(tmp, format="PNG")
    tmp.replace(path)


def generate_synthetic_dataset(cfg: SynthConfig, out_dir: str | Path, seed: int | None = None) -> Path:
    """Write a dataset directory; returns the path of its index file.

    Fully deterministic in (cfg, seed): per-slide RNG streams are spawned from
    one root sequence, and PNG encoding is byte-stable.
    """
    cfg.validate()
    master = cfg.seed if seed is None else seed
    root = Path(out_dir)
    slides_dir = root / "slides"
    slides_dir.mkdir(parents=True, exist_ok=True)

    children = np.random.SeedSequence(master).spawn(cfg.slides)
    entries = []
    for i, child in enumerate(children):
        slide_id = f"slide_{i:03d}"
        slide = generate_slide(slide_id, cfg, child)
        low_name = f"slides/{slide_id}_low.png"
        high_name = f"slides/{slide_id}_high.png"
        label_name = f"slides/{slide_id}_label.png"
        _save_png(slide.low, root / low_name)
        _save_png(slide.high, root / high_name)
        _save_png(slide.label_high.astype(np.uint8), root / label_name)
        entries.append(
            {
                "slide_id": slide_id,
                "low": low_name,
                "high": high_name,
                "label": label_name,
                "magnification_low": slide.magnification_low,
                "magnification_high": slide.magnification_high,
            }
        )

    index = {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": master,
        "ratio": cfg.ratio,
        "low_size": cfg.low_size,
        "classes": cfg.classes,
        "class_fractions": list(cfg.fractions()),
        "slides": entries,
    }
    index_path = root / DATASET_INDEX
    tmp = index_path.with_suffix(".tmp")
    tmp.write_text(json.dumps(index, indent=2) + "\n")
    tmp.replace(index_path)
    return index_path


def read_dataset_index(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / DATASET_INDEX
    if not path.exists():
        raise FileNotFoundError(f"no {DATASET_INDEX} under {dataset_dir}")
    index = json.loads(path.read_text())
    version = index.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version {version!r}; this build reads {DATASET_FORMAT_VERSION}")
    return index


def load_slide(dataset_dir: str | Path, entry: dict, ratio: int) -> SlideSource:
    root = Path(dataset_dir)
    low = np.asarray(Image.open(root / entry["low"]).convert("RGB"))
    high = np.asarray(Image.open(root / entry["high"]).convert("RGB"))
    label = np.asarray(Image.open(root / entry["label"]))
    return SlideSource(
        slide_id=entry["slide_id"],
        low=low,
        high=high,
        ratio=ratio,
        label_high=label,
        magnification_low=float(entry.get("magnification_low", 10.0)),
    )


def iter_slides(dataset_dir: str | Path):
    """Yield slides one at a time (a whole dataset may not fit in memory)."""
    index = read_dataset_index(dataset_dir)
    for entry in index["slides"]:
        yield load_slide(dataset_dir, entry, ratio=int(index["ratio"]))
