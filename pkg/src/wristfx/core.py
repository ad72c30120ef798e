"""Domain types, configuration, run manifests and RNG plumbing.

Everything here is shared by the rest of the package. Types are frozen
dataclasses; images stored on them are made read-only at construction.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np


class View(str, Enum):
    PA = "PA"
    LAT = "LAT"


class Label(str, Enum):
    normal = "normal"
    fracture = "fracture"


class Sex(str, Enum):
    F = "F"
    M = "M"


class Stratum(str, Enum):
    easy = "easy"
    hard = "hard"


class ConfigError(ValueError):
    """Raised for unknown keys, bad values or unreadable config files."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class DataError(ValueError):
    """Invalid or inconsistent input data (manifests, images, annotations)."""


class NumericalError(ArithmeticError):
    """Divergence, non-convergence or a degenerate fit."""


def _frozen_array(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Radiograph:
    image: np.ndarray
    pixel_spacing_mm: float
    view: View
    patient_id: str
    image_id: str
    label: Optional[Label] = None
    age: Optional[float] = None
    sex: Optional[Sex] = None
    stratum: Optional[Stratum] = None

    def __post_init__(self):
        img = _frozen_array(self.image)
        if img.ndim != 2 or img.shape[0] < 2 or img.shape[1] < 2:
            raise DataError(f"{self.image_id}: image must be 2D with at least 2x2 pixels, got {img.shape}")
        if not np.all(np.isfinite(img)):
            raise DataError(f"{self.image_id}: image contains non-finite values")
        if not (self.pixel_spacing_mm and float(self.pixel_spacing_mm) > 0):
            raise DataError(f"{self.image_id}: pixel_spacing_mm must be > 0, got {self.pixel_spacing_mm}")
        if self.age is not None and self.age < 0:
            raise DataError(f"{self.image_id}: negative age")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "pixel_spacing_mm", float(self.pixel_spacing_mm))
        object.__setattr__(self, "view", View(self.view))
        for name, enum in (("label", Label), ("sex", Sex), ("stratum", Stratum)):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, enum(v))

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.patient_id, self.image_id, self.view.value)

    @property
    def is_fracture(self) -> Optional[int]:
        if self.label is None:
            return None
        return int(self.label is Label.fracture)

    def with_image(self, image, pixel_spacing_mm: Optional[float] = None) -> "Radiograph":
        return dataclasses.replace(
            self, image=image,
            pixel_spacing_mm=self.pixel_spacing_mm if pixel_spacing_mm is None else pixel_spacing_mm,
        )


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Three (x, y) keypoints; x is the column coordinate, y the row coordinate."""

    points: np.ndarray
    view: View
    source: str = "annotation"

    def __post_init__(self):
        pts = _frozen_array(self.points)
        if pts.shape != (3, 2):
            raise DataError(f"LandmarkSet needs exactly 3 (x, y) points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError("LandmarkSet has non-finite coordinates")
        if self.source not in ("annotation", "prediction"):
            raise DataError(f"unknown landmark source {self.source!r}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "view", View(self.view))

    def check_inside(self, shape: Sequence[int]) -> None:
        h, w = shape[:2]
        x, y = self.points[:, 0], self.points[:, 1]
        if np.any(x < 0) or np.any(x > w - 1) or np.any(y < 0) or np.any(y > h - 1):
            raise DataError(f"annotated landmarks {self.points.tolist()} fall outside a {h}x{w} image")

    def scaled(self, factor: float) -> "LandmarkSet":
        """Landmarks after resizing the image by `factor` with pixel-centre alignment."""
        return dataclasses.replace(self, points=(self.points + 0.5) * factor - 0.5)

    def to_json(self) -> dict:
        return {"view": self.view.value, "source": self.source, "points": self.points.tolist()}

    @classmethod
    def from_json(cls, d: Mapping) -> "LandmarkSet":
        return cls(points=d["points"], view=d["view"], source=d.get("source", "annotation"))


@dataclass(frozen=True)
class PredictionRecord:
    patient_id: str
    probabilities: dict
    tta_probabilities: dict
    ensemble_probability: float
    threshold: float
    decision: Label
    member_probabilities: Optional[dict] = None
    missing_views: tuple = ()
    landmarks: Optional[dict] = None

    def __post_init__(self):
        probs = list(self.probabilities.values())
        if not probs:
            raise ValueError("PredictionRecord needs at least one view probability")
        for p in probs + [self.ensemble_probability, self.threshold]:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability/threshold {p} outside [0, 1]")
        if abs(self.ensemble_probability - float(np.mean(probs))) > 1e-9:
            raise ValueError("ensemble_probability must be the mean of the view probabilities")
        expected = Label.fracture if self.ensemble_probability >= self.threshold else Label.normal
        if Label(self.decision) is not expected:
            raise ValueError("decision inconsistent with threshold")
        object.__setattr__(self, "decision", Label(self.decision))

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["decision"] = self.decision.value
        d["missing_views"] = list(self.missing_views)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "PredictionRecord":
        d = dict(d)
        d["missing_views"] = tuple(d.get("missing_views", ()))
        return cls(**d)


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    seed: int
    config_digest: str
    fold_checkpoints: list
    thresholds: dict = field(default_factory=dict)
    temperature: dict = field(default_factory=dict)
    block: str = "classifier"
    view: str = "PA"
    mode: str = "cv"
    n_folds: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "fold_checkpoints", [(int(i), str(p)) for i, p in self.fold_checkpoints])
        if self.n_folds is not None and len(self.fold_checkpoints) != self.n_folds:
            raise ValueError(f"expected {self.n_folds} checkpoints, got {len(self.fold_checkpoints)}")
        for k, t in self.thresholds.items():
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"threshold {k}={t} outside [0, 1]")
        for k, t in self.temperature.items():
            if not t > 0:
                raise ValueError(f"temperature {k}={t} must be positive")

    def save(self, run_dir) -> Path:
        path = Path(run_dir) / "run_manifest.json"
        payload = dataclasses.asdict(self)
        payload["fold_checkpoints"] = [list(fc) for fc in self.fold_checkpoints]
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "run_manifest.json"
        try:
            payload = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read run manifest {path}: {e}") from e
        return cls(**payload)

    def checkpoint_paths(self, run_dir) -> list[Path]:
        return [Path(run_dir) / rel for _, rel in self.fold_checkpoints]


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class AugmentPolicy:
    """Probabilities and parameter ranges for training-time augmentation.

    Geometric ops (flip, rotation, shear, downscale, pad, jitter) move the
    landmark targets with the pixels; photometric ones do not touch them.
    Ops run in the order given by `order`.
    """

    order: tuple = ("flip", "rotation", "shear", "downscale", "pad", "jitter",
                    "cutout", "side_pad", "salt_pepper", "blur", "noise", "gamma")
    flip_p: float = 0.5
    rotation_p: float = 0.5
    rotation_deg: tuple = (-15.0, 15.0)
    shear_p: float = 0.5
    shear_deg: tuple = (-5.0, 5.0)
    downscale_p: float = 0.5
    downscale_factor: tuple = (0.85, 1.0)
    pad_p: float = 0.5
    pad_px: tuple = (0.0, 8.0)
    jitter_p: float = 0.5
    jitter_px: tuple = (-6.0, 6.0)
    cutout_p: float = 0.3
    cutout_px: tuple = (4.0, 16.0)
    side_pad_p: float = 0.5
    side_pad_px: tuple = (2.0, 10.0)
    side_pad_intensity: tuple = (0.0, 1.0)
    salt_pepper_p: float = 0.5
    salt_pepper_density: tuple = (0.0, 0.02)
    blur_p: float = 0.5
    blur_sigma: tuple = (0.0, 1.0)
    noise_p: float = 0.5
    noise_sigma: tuple = (0.0, 0.03)
    gamma_p: float = 0.5
    gamma: tuple = (0.8, 1.2)

    OPS = ("flip", "rotation", "shear", "downscale", "pad", "jitter",
           "cutout", "side_pad", "salt_pepper", "blur", "noise", "gamma")

    def validate(self, prefix: str = "") -> None:
        for op in self.order:
            if op not in self.OPS:
                raise ConfigError(f"unknown augmentation op {op!r}", f"{prefix}order")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            key = prefix + f.name
            if f.name.endswith("_p"):
                if not 0.0 <= v <= 1.0:
                    raise ConfigError(f"probability {v} outside [0, 1]", key)
            elif f.name != "order":
                if len(v) != 2 or v[0] > v[1]:
                    raise ConfigError(f"range must be [low, high] with low <= high, got {list(v)}", key)
        if self.downscale_factor[0] <= 0 or self.gamma[0] <= 0:
            raise ConfigError("scale factors must be positive", prefix + "downscale_factor/gamma")

    def disabled(self) -> "AugmentPolicy":
        return dataclasses.replace(self, **{f.name: 0.0 for f in dataclasses.fields(self) if f.name.endswith("_p")})


@dataclass(frozen=True)
class LocalizerConfig:
    """Hourglass landmark localizer and its optimiser."""

    lr: float = 1e-1
    momentum: float = 0.0
    nesterov: bool = False
    weight_decay: float = 0.0
    batch_size: int = 24
    epochs: int = 300
    drops: tuple = (150, 200, 250)
    drop_factor: float = 10.0
    mixup: bool = True
    mixup_alpha: float = 0.4
    input_size: int = 256
    stacks: int = 1
    channels: int = 32
    depth: int = 4
    softmax_temperature: float = 1.0


@dataclass(frozen=True)
class ClassifierConfig:
    """SE-block fracture classifier and its optimiser."""

    lr: float = 1e-1
    momentum: float = 0.0
    nesterov: bool = False
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 300
    drops: tuple = (150, 200, 250)
    drop_factor: float = 10.0
    head_only_epochs: int = 10
    mixup: bool = True
    mixup_alpha: float = 0.7
    dropout: float = 0.5
    input_size: int = 224
    # bottleneck blocks per stage; (3, 4, 6, 3) is the 50-layer network
    blocks: tuple = (3, 4, 6, 3)
    bottleneck: bool = True
    width: int = 64
    se_reduction: int = 16
    pretrained_weights: str = ""
    mode: str = "cv"
    members: int = 9
    val_fraction: float = 0.2


@dataclass(frozen=True)
class RoiConfig:
    pa_side_mm: float = 70.0
    pa_top_padding_mm: float = 15.0
    lat_side_mm: float = 90.0
    lat_top_padding_mm: float = 20.0
    pa_spacing_mm: float = 0.27
    lat_spacing_mm: float = 0.35
    tta_resize_ratio: float = 1.1
    low_pct: float = 5.0
    high_pct: float = 99.0

    def side_mm(self, view) -> float:
        return self.pa_side_mm if View(view) is View.PA else self.lat_side_mm

    def top_padding_mm(self, view) -> float:
        return self.pa_top_padding_mm if View(view) is View.PA else self.lat_top_padding_mm

    def spacing_mm(self, view) -> float:
        return self.pa_spacing_mm if View(view) is View.PA else self.lat_spacing_mm


@dataclass(frozen=True)
class UncertaintyConfig:
    entropy_mode: str = "entropy_of_mean"
    member_counts: tuple = (3, 5, 7, 9)
    t_min: float = 0.05
    t_max: float = 10.0


@dataclass(frozen=True)
class EvaluationConfig:
    n_bootstrap: int = 5000
    ci_level: float = 0.95
    landmark_thresholds_mm: tuple = (1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0)


@dataclass(frozen=True)
class SyntheticConfig:
    """Phantom benchmark sizes and rendering parameters."""

    seed: int = 0
    image_size: int = 128
    pixel_spacing_mm: float = 0.8
    noise_sigma: float = 0.01
    rotation_range_deg: float = 8.0
    easy_contrast: float = 0.5
    hard_contrast: float = 0.08
    easy_width_px: int = 4
    hard_width_px: int = 1
    n_train: int = 600
    n_test1: int = 200
    n_test2: int = 100
    train_fracture_rate: float = 0.5
    test1_fracture_rate: float = 0.62
    test2_fracture_rate: float = 0.2


@dataclass(frozen=True)
class Config:
    profile: str = "full"
    seed: int = 0
    folds: int = 5
    localizer: LocalizerConfig = LocalizerConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    localizer_augment: AugmentPolicy = AugmentPolicy()
    classifier_augment: AugmentPolicy = AugmentPolicy()
    roi: RoiConfig = RoiConfig()
    uncertainty: UncertaintyConfig = UncertaintyConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    synthetic: SyntheticConfig = SyntheticConfig()

    def to_text(self) -> str:
        return "".join(f"{k}: {json.dumps(v)}\n" for k, v in sorted(flatten_config(self).items()))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


# Settings that make the whole pipeline trainable on one CPU core in minutes.
# Full-scale values stay the dataclass defaults.
PROFILES: dict[str, dict[str, Any]] = {
    "full": {},
    "desk": {
        "folds": 2,
        "localizer.epochs": 20,
        "localizer.drops": [13, 17],
        "localizer.batch_size": 16,
        "localizer.lr": 0.05,
        "localizer.momentum": 0.9,
        "localizer.input_size": 32,
        "localizer.channels": 16,
        "localizer.depth": 3,
        "localizer.mixup": False,
        "localizer_augment.flip_p": 0.0,
        "localizer_augment.rotation_deg": [-8.0, 8.0],
        "localizer_augment.shear_deg": [-3.0, 3.0],
        "localizer_augment.downscale_factor": [0.92, 1.0],
        "localizer_augment.pad_px": [0.0, 3.0],
        "localizer_augment.jitter_px": [-4.0, 4.0],
        "localizer_augment.cutout_px": [2.0, 6.0],
        "localizer_augment.side_pad_px": [1.0, 4.0],
        "classifier.epochs": 20,
        "classifier.drops": [13, 17],
        "classifier.head_only_epochs": 2,
        "classifier.lr": 0.05,
        "classifier.momentum": 0.9,
        "classifier.input_size": 48,
        "classifier.blocks": [1, 1, 1],
        "classifier.bottleneck": False,
        "classifier.width": 16,
        "classifier.se_reduction": 4,
        "classifier.members": 9,
        "classifier_augment.rotation_deg": [-5.0, 5.0],
        "classifier_augment.shear_deg": [-3.0, 3.0],
        "classifier_augment.downscale_factor": [0.95, 1.0],
        "classifier_augment.pad_px": [0.0, 2.0],
        "classifier_augment.jitter_px": [-2.0, 2.0],
        "classifier_augment.cutout_px": [2.0, 6.0],
        "classifier_augment.cutout_p": 0.0,
        "classifier_augment.side_pad_px": [1.0, 3.0],
        "classifier_augment.salt_pepper_p": 0.0,
        "classifier_augment.blur_p": 0.0,
        "classifier_augment.noise_sigma": [0.0, 0.01],
        "roi.pa_spacing_mm": 70.0 / 52,
        "roi.lat_spacing_mm": 90.0 / 52,
        "evaluation.n_bootstrap": 1000,
    },
}

# Grid the optimiser hyperparameters were searched over (SGD throughout).
HYPERPARAMETER_GRID = {
    "classifier": {"lr": (1e-1, 1e-2, 1e-3), "momentum": (0.0, 0.5, 0.9),
                   "weight_decay": (0.0, 1e-3, 1e-4, 3e-4), "nesterov": (True, False)},
    "localizer": {"lr": (1e-1, 1e-2, 1e-3), "momentum": (0.0, 0.5, 0.9),
                  "weight_decay": (0.0, 1e-4), "nesterov": (True, False)},
}

ENV_PREFIX = "WRISTFX_"


def flatten_config(cfg, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out.update(flatten_config(v, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key)
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", key)
        if default and not isinstance(default[0], str):
            kind = type(default[0])
            try:
                return tuple(kind(x) for x in value)
            except (TypeError, ValueError):
                raise ConfigError(f"list items must be numbers, got {value!r}", key) from None
        return tuple(value)
    raise ConfigError(f"unsupported value {value!r}", key)


def build_config(overrides: Mapping[str, Any]) -> Config:
    """Apply flat dotted-key overrides (profile first) to the defaults and validate."""
    overrides = dict(overrides)
    profile = overrides.pop("profile", "full")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}", "profile")
    merged = {**PROFILES[profile], **overrides}
    defaults = flatten_config(Config())
    values = dict(defaults)
    for key, raw in merged.items():
        if key not in defaults:
            raise ConfigError("unknown configuration key", key)
        values[key] = _coerce(key, raw, defaults[key])
    values["profile"] = profile
    return validate_config(_unflatten(values))


def _unflatten(values: Mapping[str, Any]) -> Config:
    sections: dict[str, dict] = {}
    top: dict[str, Any] = {}
    for key, v in values.items():
        if "." in key:
            sec, name = key.split(".", 1)
            sections.setdefault(sec, {})[name] = tuple(v) if isinstance(v, list) else v
        else:
            top[key] = v
    built = {}
    for sec, kw in sections.items():
        default = getattr(Config(), sec)
        built[sec] = dataclasses.replace(default, **kw)
    return Config(**top, **built)


def validate_config(cfg: Config) -> Config:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(msg, key)

    need(cfg.folds >= 2, "folds", "need at least 2 folds")
    for name in ("localizer", "classifier"):
        sec = getattr(cfg, name)
        need(sec.lr > 0, f"{name}.lr", "must be > 0")
        need(0.0 <= sec.momentum < 1.0, f"{name}.momentum", "must be in [0, 1)")
        need(not sec.nesterov or sec.momentum > 0, f"{name}.nesterov", "requires momentum > 0")
        need(sec.weight_decay >= 0, f"{name}.weight_decay", "must be >= 0")
        need(sec.batch_size >= 1, f"{name}.batch_size", "must be >= 1")
        need(sec.epochs >= 1, f"{name}.epochs", "must be >= 1")
        need(list(sec.drops) == sorted(set(sec.drops)), f"{name}.drops", "must be strictly increasing")
        need(all(0 < d < sec.epochs for d in sec.drops), f"{name}.drops", "must lie inside (0, epochs)")
        need(sec.drop_factor > 1, f"{name}.drop_factor", "must be > 1")
        need(sec.mixup_alpha > 0, f"{name}.mixup_alpha", "must be > 0")
        need(sec.input_size >= 16, f"{name}.input_size", "must be >= 16")
    loc, clf = cfg.localizer, cfg.classifier
    need(loc.stacks >= 1, "localizer.stacks", "must be >= 1")
    need(loc.channels >= 4, "localizer.channels", "must be >= 4")
    need(1 <= loc.depth and loc.input_size // 2 >= 2 ** loc.depth, "localizer.depth",
         "too deep for the input size")
    need(loc.softmax_temperature > 0, "localizer.softmax_temperature", "must be > 0")
    need(0 <= clf.head_only_epochs < clf.epochs, "classifier.head_only_epochs", "must be in [0, epochs)")
    need(0.0 <= clf.dropout < 1.0, "classifier.dropout", "must be in [0, 1)")
    need(len(clf.blocks) >= 1 and all(b >= 1 for b in clf.blocks), "classifier.blocks", "need >= 1 block per stage")
    need(clf.width >= 4 and clf.se_reduction >= 1, "classifier.width", "width >= 4 and se_reduction >= 1")
    need(clf.mode in ("cv", "deep_ensemble"), "classifier.mode", "must be 'cv' or 'deep_ensemble'")
    need(clf.members >= 1, "classifier.members", "must be >= 1")
    need(0.0 < clf.val_fraction < 1.0, "classifier.val_fraction", "must be in (0, 1)")
    roi = cfg.roi
    for k in ("pa_side_mm", "lat_side_mm", "pa_spacing_mm", "lat_spacing_mm"):
        need(getattr(roi, k) > 0, f"roi.{k}", "must be > 0")
    for k in ("pa_top_padding_mm", "lat_top_padding_mm"):
        need(getattr(roi, k) >= 0, f"roi.{k}", "must be >= 0")
    need(roi.tta_resize_ratio >= 1.0, "roi.tta_resize_ratio", "must be >= 1")
    need(0 <= roi.low_pct < roi.high_pct <= 100, "roi.low_pct", "need 0 <= low_pct < high_pct <= 100")
    unc = cfg.uncertainty
    need(unc.entropy_mode in ("entropy_of_mean", "mean_of_entropies"), "uncertainty.entropy_mode",
         "must be 'entropy_of_mean' or 'mean_of_entropies'")
    need(all(m >= 1 for m in unc.member_counts), "uncertainty.member_counts", "must be positive")
    need(0 < unc.t_min < 1 < unc.t_max, "uncertainty.t_min", "need 0 < t_min < 1 < t_max")
    ev = cfg.evaluation
    need(ev.n_bootstrap >= 1, "evaluation.n_bootstrap", "must be >= 1")
    need(0 < ev.ci_level < 1, "evaluation.ci_level", "must be in (0, 1)")
    syn = cfg.synthetic
    need(syn.image_size >= 64, "synthetic.image_size", "phantom needs at least 64 px")
    need(syn.pixel_spacing_mm > 0, "synthetic.pixel_spacing_mm", "must be > 0")
    need(syn.noise_sigma >= 0, "synthetic.noise_sigma", "must be >= 0")
    need(syn.hard_contrast < syn.easy_contrast, "synthetic.hard_contrast", "must be below easy_contrast")
    for k in ("n_train", "n_test1", "n_test2"):
        need(getattr(syn, k) >= 1, f"synthetic.{k}", "must be >= 1")
    for k in ("train_fracture_rate", "test1_fracture_rate", "test2_fracture_rate"):
        need(0.0 <= getattr(syn, k) <= 1.0, f"synthetic.{k}", "must be in [0, 1]")
    cfg.localizer_augment.validate("localizer_augment.")
    cfg.classifier_augment.validate("classifier_augment.")
    return cfg


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse `key: value` lines; values are JSON, bare words are strings."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"line {lineno}: expected 'key: value'")
        key, raw = (s.strip() for s in line.split(":", 1))
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key", key)
        out[key] = value
    return out


def env_overrides(environ: Mapping[str, str]) -> dict[str, Any]:
    """`WRISTFX_CLASSIFIER__LR=0.01` overrides `classifier.lr`."""
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def load_config(path=None, environ: Optional[Mapping[str, str]] = None, **overrides) -> Config:
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text()))
    if environ is not None:
        values.update(env_overrides(environ))
    values.update(overrides)
    return build_config(values)


def save_config(cfg: Config, path) -> Path:
    path = Path(path)
    path.write_text(cfg.to_text())
    return path


# ---------------------------------------------------------------------------
# randomness

@dataclass(frozen=True)
class RngState:
    """Root of all randomness for a run; hands out independent named streams."""

    seed: int

    def _entropy(self, keys) -> list[int]:
        words = [self.seed]
        for k in keys:
            if isinstance(k, (int, np.integer)):
                words.append(int(k))
            else:
                words.append(int.from_bytes(hashlib.sha256(str(k).encode()).digest()[:4], "little"))
        return words

    def generator(self, *keys) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self._entropy(keys)))

    def int_seed(self, *keys) -> int:
        return int(np.random.SeedSequence(self._entropy(keys)).generate_state(1)[0])

    def torch_generator(self, *keys):
        import torch

        g = torch.Generator()
        g.manual_seed(self.int_seed(*keys))
        return g


def seed_all(seed: int) -> RngState:
    """Seed the global numpy/torch generators and switch torch to deterministic kernels."""
    import random

    import torch

    seed = int(seed)
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    os.environ.setdefault("PYTHONHASHSEED", str(seed))
    return RngState(seed)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
