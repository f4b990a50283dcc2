"""Two-view augmentation with explicit, replayable randomness.

The transform chain is the standard siamese-pretraining recipe (random
resized crop, horizontal flip, colour jitter, grayscale, Gaussian blur,
normalize). torchvision's functional ops do the pixel work, but every random
parameter is drawn from a caller-supplied ``torch.Generator`` — the class
transforms would consume global RNG and break per-patch replayability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from .config import AugmentConfig


@dataclass(frozen=True)
class ViewPair:
    """Two independently augmented views of one patch."""

    view1: torch.Tensor  # (3, S, S) float32, normalized
    view2: torch.Tensor
    seeds: tuple
    patch_id: str = ""


def _rand(g: torch.Generator) -> float:
    return float(torch.rand((), generator=g))


def _randint(g: torch.Generator, low: int, high: int) -> int:
    """Uniform integer in [low, high)."""
    return int(torch.randint(low, high, (), generator=g))


def _uniform(g: torch.Generator, low: float, high: float) -> float:
    return low + (high - low) * _rand(g)


def to_float_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) array, got {getattr(image, 'shape', type(image))}")
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {image.dtype}")
    array = np.ascontiguousarray(image)
    if not array.flags.writeable:  # PIL hands out read-only views
        array = array.copy()
    return torch.from_numpy(array).permute(2, 0, 1).float().div_(255.0)


def normalize_image(image: np.ndarray, mean=None, std=None) -> torch.Tensor:
    """The identity view: scale to [0, 1] and normalize, nothing else."""
    cfg = AugmentConfig()
    mean = cfg.mean if mean is None else mean
    std = cfg.std if std is None else std
    return TF.normalize(to_float_tensor(image), list(mean), list(std))


def _sample_crop(height: int, width: int, scale, ratio, g: torch.Generator):
    """Area/aspect rejection sampling for the resized crop (10 attempts)."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * _uniform(g, scale[0], scale[1])
        aspect = math.exp(_uniform(g, log_ratio[0], log_ratio[1]))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = _randint(g, 0, height - h + 1)
            left = _randint(g, 0, width - w + 1)
            return top, left, h, w
    # Fallback: the largest centered crop with a legal aspect ratio.
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w = width
        h = int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        h = height
        w = int(round(h * ratio[1]))
    else:
        w, h = width, height
    top = (height - h) // 2
    left = (width - w) // 2
    return top, left, h, w


def _color_jitter(img: torch.Tensor, cfg: AugmentConfig, g: torch.Generator) -> torch.Tensor:
    order = torch.randperm(4, generator=g).tolist()
    brightness = _uniform(g, max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness)
    contrast = _uniform(g, max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast)
    saturation = _uniform(g, max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation)
    hue = _uniform(g, -cfg.hue, cfg.hue)
    for op in order:
        if op == 0:
            img = TF.adjust_brightness(img, brightness)
        elif op == 1:
            img = TF.adjust_contrast(img, contrast)
        elif op == 2:
            img = TF.adjust_saturation(img, saturation)
        else:
            img = TF.adjust_hue(img, hue)
    return img


def make_view(image: np.ndarray, generator: torch.Generator, cfg: AugmentConfig) -> torch.Tensor:
    """One augmented, normalized view of a square uint8 patch.

    Deterministic in (image, generator state, cfg). With ``cfg.enabled``
    false, or with all probabilities 0 and a degenerate crop range, the
    output equals the plain normalized input.
    """
    size = cfg.size
    if not isinstance(image, np.ndarray) or image.shape != (size, size, 3):
        raise ValueError(
            f"expected a ({size}, {size}, 3) array, got {getattr(image, 'shape', type(image))}"
        )
    img = to_float_tensor(image)
    if cfg.enabled:
        height, width = img.shape[1], img.shape[2]
        top, left, h, w = _sample_crop(height, width, cfg.crop_scale, cfg.crop_ratio, g=generator)
        if (top, left, h, w) != (0, 0, size, size):
            img = TF.resized_crop(
                img, top, left, h, w, [size, size], InterpolationMode.BILINEAR, antialias=True
            )
        if _rand(generator) < cfg.flip_p:
            img = TF.hflip(img)
        if _rand(generator) < cfg.jitter_p:
            img = _color_jitter(img, cfg, generator)
        if _rand(generator) < cfg.grayscale_p:
            img = TF.rgb_to_grayscale(img, num_output_channels=3)
        if _rand(generator) < cfg.blur_p:
            sigma = _uniform(generator, cfg.blur_sigma[0], cfg.blur_sigma[1])
            img = TF.gaussian_blur(img, [cfg.blur_kernel, cfg.blur_kernel], [sigma, sigma])
    return TF.normalize(img, list(cfg.mean), list(cfg.std))


def make_view_pair(
    image: np.ndarray, cfg: AugmentConfig, seed1: int, seed2: int, patch_id: str = ""
) -> ViewPair:
    """Two views of one patch from two independent seeded streams."""
    g1 = torch.Generator().manual_seed(int(seed1))
    g2 = torch.Generator().manual_seed(int(seed2))
    return ViewPair(
        view1=make_view(image, g1, cfg),
        view2=make_view(image, g2, cfg),
        seeds=(int(seed1), int(seed2)),
        patch_id=patch_id,
    )
