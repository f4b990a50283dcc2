"""Configuration schema for every stage of the pipeline.

All run parameters live in plain dataclasses that round-trip through JSON.
``from_dict`` constructors reject unknown keys so that typos in config files
fail loudly before any work starts, and ``config_hash`` gives a canonical
fingerprint that checkpoints embed for resume-compatibility checks.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Channel widths of the four residual stages of the shared trunk topology.
STAGE_WIDTHS = (64, 128, 256, 512)

ABLATION_NAMES = ("dsl", "ctfm", "mask", "jigsaw")


def _check_unknown_keys(data: dict, cls, where: str) -> None:
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _build(cls, data: dict, where: str):
    """Generic dict -> dataclass with unknown-key rejection and tuple cast."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(data).__name__}")
    _check_unknown_keys(data, cls, where)
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


@dataclass
class AugmentConfig:
    """SimSiam-style two-view augmentation parameters.

    With ``enabled=False`` every stochastic op is skipped and a view is just
    the normalized input (the identity/debug path).
    """

    enabled: bool = True
    size: int = 224
    crop_scale: tuple = (0.2, 1.0)
    crop_ratio: tuple = (0.75, 4.0 / 3.0)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_kernel: int = 23
    blur_sigma: tuple = (0.1, 2.0)
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    @classmethod
    def from_dict(cls, data: dict, where: str = "augmentation") -> "AugmentConfig":
        cfg = _build(cls, data, where)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        _require(self.size > 0, "augmentation.size must be positive")
        for name in ("flip_p", "jitter_p", "grayscale_p", "blur_p"):
            p = getattr(self, name)
            _require(0.0 <= p <= 1.0, f"augmentation.{name} must lie in [0, 1]")
        _require(
            len(self.crop_scale) == 2 and 0.0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0,
            "augmentation.crop_scale must be an ascending pair in (0, 1]",
        )
        _require(
            len(self.crop_ratio) == 2 and 0.0 < self.crop_ratio[0] <= self.crop_ratio[1],
            "augmentation.crop_ratio must be an ascending positive pair",
        )
        for name in ("brightness", "contrast", "saturation"):
            _require(getattr(self, name) >= 0.0, f"augmentation.{name} must be >= 0")
        _require(0.0 <= self.hue <= 0.5, "augmentation.hue must lie in [0, 0.5]")
        _require(
            self.blur_kernel > 0 and self.blur_kernel % 2 == 1,
            "augmentation.blur_kernel must be a positive odd integer",
        )
        _require(
            len(self.blur_sigma) == 2 and 0.0 < self.blur_sigma[0] <= self.blur_sigma[1],
            "augmentation.blur_sigma must be an ascending positive pair",
        )
        _require(len(self.mean) == 3 and len(self.std) == 3, "augmentation mean/std must have 3 channels")
        _require(all(s > 0 for s in self.std), "augmentation.std entries must be positive")

    @classmethod
    def identity(cls, size: int = 224) -> "AugmentConfig":
        return cls(enabled=False, size=size)


@dataclass
class TilingConfig:
    """Geometry of the paired context/target tiling pass.

    ``context_window``/``context_step`` and ``target_window``/``target_step``
    are expressed in low-level pixels; target patches are extracted from the
    high level by scaling with the dataset's magnification ratio. Targets must
    partition their context window exactly, so ``target_step`` has to equal
    ``target_window`` and ``context_window`` must be a multiple of it.
    """

    context_window: int = 1024
    context_step: int = 512
    target_window: int = 256
    target_step: int = 256
    output_size: int = 224
    min_tissue_fraction: float = 0.1

    @classmethod
    def from_dict(cls, data: dict, where: str = "tiling") -> "TilingConfig":
        cfg = _build(cls, data, where)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("context_window", "context_step", "target_window", "target_step", "output_size"):
            _require(getattr(self, name) > 0, f"tiling.{name} must be positive")
        _require(
            self.target_step == self.target_window,
            "tiling.target_step must equal tiling.target_window (targets must partition the context window)",
        )
        _require(
            self.context_window % self.target_window == 0,
            "tiling.context_window must be a multiple of tiling.target_window",
        )
        _require(
            0.0 <= self.min_tissue_fraction <= 1.0,
            "tiling.min_tissue_fraction must lie in [0, 1]",
        )

    @property
    def grid(self) -> int:
        """Targets per context row/column."""
        return self.context_window // self.target_window

    @property
    def targets_per_group(self) -> int:
        return self.grid * self.grid


@dataclass
class SynthConfig:
    """Synthetic slide-pyramid generator parameters."""

    slides: int = 8
    low_size: int = 512
    classes: int = 3
    ratio: int = 2
    class_fractions: tuple | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict, where: str = "synth") -> "SynthConfig":
        cfg = _build(cls, data, where)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        _require(self.slides >= 1, "synth.slides must be >= 1")
        _require(self.low_size >= 16, "synth.low_size must be >= 16")
        _require(self.classes >= 1, "synth.classes must be >= 1")
        _require(
            isinstance(self.ratio, int) and self.ratio >= 1,
            "synth.ratio must be an integer >= 1",
        )
        if self.class_fractions is not None:
            _require(
                len(self.class_fractions) == self.classes,
                "synth.class_fractions must have one entry per class",
            )
            _require(
                all(f > 0 for f in self.class_fractions),
                "synth.class_fractions entries must be positive",
            )
            _require(
                abs(sum(self.class_fractions) - 1.0) < 1e-6,
                "synth.class_fractions must sum to 1",
            )

    def fractions(self) -> tuple:
        if self.class_fractions is not None:
            return tuple(self.class_fractions)
        return tuple(1.0 / self.classes for _ in range(self.classes))


@dataclass
class CtfmConfig:
    """Masked-jigsaw fusion plan sampling parameters."""

    mask_ratio: float = 0.5
    share_plan_across_views: bool = False

    @classmethod
    def from_dict(cls, data: dict, where: str = "ctfm") -> "CtfmConfig":
        cfg = _build(cls, data, where)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        _require(
            0.0 <= self.mask_ratio < 1.0,
            "ctfm.mask_ratio must lie in [0, 1); masking every slot is degenerate",
        )


@dataclass
class DslConfig:
    """Dense per-stage loss weighting and ablation switches."""

    stage_weights: tuple = (0.1, 0.4, 0.7, 1.0)
    dsl_enabled: bool = True
    ctfm_enabled: bool = True
    mask_only: bool = False
    jigsaw_only: bool = False

    @classmethod
    def from_dict(cls, data: dict, where: str = "dsl") -> "DslConfig":
        cfg = _build(cls, data, where)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        _require(
            len(self.stage_weights) == len(STAGE_WIDTHS),
            f"dsl.stage_weights must have {len(STAGE_WIDTHS)} entries",
        )
        _require(all(w >= 0 for w in self.stage_weights), "dsl.stage_weights must be >= 0")
        _require(
            not (self.mask_only and self.jigsaw_only),
            "dsl.mask_only and dsl.jigsaw_only are mutually exclusive",
        )


@dataclass
class PretrainConfig:
    """Self-supervised training loop parameters."""

    epochs: int = 500
    learning_rate: float = 1e-3
    batch_size: int = 32
    optimizer: str = "adam"
    targets_per_group: int | None = None
    fold: int = 0
    pretrain_on: str = "train"
    checkpoint_every: int = 0
    probe_groups: int = 8

    @classmethod
    def from_dict(cls, data: dict, where: str = "pretrain") -> "PretrainConfig":
        cfg = _build(cls, data, where)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        _require(self.epochs >= 0, "pretrain.epochs must be >= 0")
        _require(self.learning_rate > 0, "pretrain.learning_rate must be positive")
        _require(self.batch_size >= 2, "pretrain.batch_size must be >= 2")
        _require(self.optimizer in ("adam", "sgd"), "pretrain.optimizer must be 'adam' or 'sgd'")
        if self.targets_per_group is not None:
            _require(self.targets_per_group >= 1, "pretrain.targets_per_group must be >= 1")
        _require(self.pretrain_on in ("train", "all"), "pretrain.pretrain_on must be 'train' or 'all'")
        _require(self.probe_groups >= 0, "pretrain.probe_groups must be >= 0")
        _require(self.fold >= 0, "pretrain.fold must be >= 0")
        _require(self.checkpoint_every >= 0, "pretrain.checkpoint_every must be >= 0")


@dataclass
class FinetuneConfig:
    """Supervised segmentation fine-tuning parameters."""

    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 64
    fraction: float = 1.0
    fold: int = 0
    num_classes: int = 3
    lambda_context: float = 1.0
    ignore_index: int | None = None
    hook_depth: int = 2
    init: str = "random"
    track_train_f1: bool = False
    early_stop_train_f1: float | None = None

    @classmethod
    def from_dict(cls, data: dict, where: str = "finetune") -> "FinetuneConfig":
        cfg = _build(cls, data, where)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        _require(self.epochs >= 0, "finetune.epochs must be >= 0")
        _require(self.learning_rate > 0, "finetune.learning_rate must be positive")
        _require(self.batch_size >= 1, "finetune.batch_size must be >= 1")
        _require(0.0 < self.fraction <= 1.0, "finetune.fraction must lie in (0, 1]")
        _require(self.fold >= 0, "finetune.fold must be >= 0")
        _require(self.num_classes >= 1, "finetune.num_classes must be >= 1")
        _require(0.0 <= self.lambda_context <= 1.0, "finetune.lambda_context must lie in [0, 1]")
        _require(1 <= self.hook_depth <= 5, "finetune.hook_depth must lie in [1, 5]")
        if self.early_stop_train_f1 is not None:
            _require(
                0.0 < self.early_stop_train_f1 <= 1.0,
                "finetune.early_stop_train_f1 must lie in (0, 1]",
            )


@dataclass
class ExperimentConfig:
    """Top-level config: one JSON file drives tile/pretrain/finetune/evaluate."""

    seed: int = 0
    num_folds: int = 5
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    ctfm: CtfmConfig = field(default_factory=CtfmConfig)
    dsl: DslConfig = field(default_factory=DslConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    _SECTIONS = {
        "augmentation": AugmentConfig,
        "tiling": TilingConfig,
        "ctfm": CtfmConfig,
        "dsl": DslConfig,
        "pretrain": PretrainConfig,
        "finetune": FinetuneConfig,
    }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config must be a mapping, got {type(data).__name__}")
        _check_unknown_keys(data, cls, "config")
        kwargs: dict[str, Any] = {}
        for name in ("seed", "num_folds"):
            if name in data:
                kwargs[name] = data[name]
        for name, section_cls in cls._SECTIONS.items():
            if name in data:
                kwargs[name] = section_cls.from_dict(data[name], where=name)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        _require(self.num_folds >= 1, "num_folds must be >= 1")
        for name in self._SECTIONS:
            getattr(self, name).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(data)


def load_synth_config(path: str | Path) -> SynthConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return SynthConfig.from_dict(data)


def apply_ablations(cfg: ExperimentConfig, names) -> ExperimentConfig:
    """Return a copy of ``cfg`` with the named ablation switches applied."""
    dsl = cfg.dsl
    for name in names:
        if name == "dsl":
            dsl = dataclasses.replace(dsl, dsl_enabled=False)
        elif name == "ctfm":
            dsl = dataclasses.replace(dsl, ctfm_enabled=False)
        elif name == "mask":
            dsl = dataclasses.replace(dsl, mask_only=True, jigsaw_only=False)
        elif name == "jigsaw":
            dsl = dataclasses.replace(dsl, jigsaw_only=True, mask_only=False)
        else:
            raise ConfigError(f"unknown ablation '{name}'; expected one of {ABLATION_NAMES}")
    dsl.validate()
    return dataclasses.replace(cfg, dsl=dsl)


def config_hash(cfg: ExperimentConfig | dict) -> str:
    """Canonical sha256 fingerprint of a config (key-sorted JSON)."""
    data = cfg.to_dict() if isinstance(cfg, ExperimentConfig) else cfg
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def write_resolved_config(data: dict, out_dir: str | Path, name: str = "resolved_config.json") -> Path:
    """Snapshot the fully-resolved parameters of a run beside its outputs."""
    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"package_version": __version__, **data}
    path = out_dir / name
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return path
