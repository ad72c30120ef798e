"""Deterministic wrist phantoms with exact landmarks and controllable fracture difficulty.

Each case renders a PA-style image (radius and ulna as two vertical
capsules, a carpal capsule above them) and a LAT-style image (one wider
superimposed capsule). A fracture is a thin low-intensity band across the
radius near its distal end. The easy and hard strata share the rendering
process and differ only in the band's contrast and width, so for a fixed
seed the two strata produce identical images outside the band.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import DataError, LandmarkSet, Radiograph, RngState, Stratum, SyntheticConfig, View
from .imaging import write_landmarks, write_manifest, write_png8, write_png16

EASY_DEFAULTS = {"fracture_contrast": 0.5, "fracture_width_px": 4}
HARD_DEFAULTS = {"fracture_contrast": 0.08, "fracture_width_px": 1}


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    n_cases: int = 100
    fracture_rate: float = 0.5
    stratum: Stratum = Stratum.easy
    fracture_contrast: float = 0.5
    fracture_width_px: int = 4
    noise_sigma: float = 0.01
    rotation_range_deg: float = 8.0
    image_size: int = 128
    pixel_spacing_mm: float = 0.8
    id_prefix: str = "case"

    def __post_init__(self):
        object.__setattr__(self, "stratum", Stratum(self.stratum))
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        if not 0.0 <= self.fracture_rate <= 1.0:
            raise ValueError("fracture_rate must be in [0, 1]")
        if self.stratum is Stratum.hard and self.fracture_contrast >= EASY_DEFAULTS["fracture_contrast"]:
            raise ValueError("hard stratum needs a lower fracture contrast than the easy stratum")
        if self.image_size * self.pixel_spacing_mm < 80.0:
            raise DataError(
                f"a {self.image_size}px image at {self.pixel_spacing_mm} mm "
                f"({self.image_size * self.pixel_spacing_mm:.0f} mm) is too small for the phantom (80 mm)"
            )

    @classmethod
    def for_stratum(cls, stratum, **kw) -> "PhantomSpec":
        defaults = EASY_DEFAULTS if Stratum(stratum) is Stratum.easy else HARD_DEFAULTS
        return cls(stratum=Stratum(stratum), **{**defaults, **kw})


@dataclass(frozen=True, eq=False)
class PhantomCase:
    radiograph: Radiograph
    landmarks: LandmarkSet
    fracture_mask: np.ndarray

    def __iter__(self):
        return iter((self.radiograph, self.landmarks, self.fracture_mask))


def _capsule(px, py, x, y0, y1, r):
    """Anti-aliased coverage of a vertical capsule: segment x, y0..y1, radius r."""
    cy = np.clip(py, y0, y1)
    d = np.hypot(px - x, py - cy) - r
    return np.clip(0.5 - d, 0.0, 1.0)


def _ellipse(px, py, x, y, a, b):
    d = (np.hypot((px - x) / a, (py - y) / b) - 1.0) * min(a, b)
    return np.clip(0.5 - d, 0.0, 1.0)


def _band(px, py, x, y, angle, width):
    """Coverage of a straight band through (x, y), `angle` from horizontal."""
    nx, ny = -np.sin(angle), np.cos(angle)
    d = np.abs((px - x) * nx + (py - y) * ny) - width / 2.0
    return np.clip(0.5 - d, 0.0, 1.0)


def _draw_case_params(rng: np.random.Generator, mm: float) -> dict:
    """All random draws for one case, made in a fixed order for both views."""
    return {
        "theta": rng.uniform(-1.0, 1.0),
        "shift": rng.uniform(-5.0, 5.0, size=2) * mm,
        "bone": rng.uniform(0.6, 0.8),
        "tissue": rng.uniform(0.18, 0.28),
        "radius_r": rng.uniform(9.0, 11.0),
        "ulna_r": rng.uniform(5.5, 7.0),
        "gap": rng.uniform(3.0, 5.0),
        "radius_top": rng.uniform(-4.0, 4.0),
        "ulna_drop": rng.uniform(2.0, 5.0),
        "carpal_gap": rng.uniform(1.5, 3.0),
        "lat_r": rng.uniform(11.0, 13.0),
        "lat_top": rng.uniform(-4.0, 4.0),
        "frac_depth": rng.uniform(4.0, 8.0),
        "frac_angle": rng.uniform(-12.0, 12.0),
        "lat_frac_depth": rng.uniform(4.0, 8.0),
        "lat_frac_angle": rng.uniform(-12.0, 12.0),
        "gradient": rng.uniform(-0.04, 0.04, size=2),
        "age": float(np.round(rng.uniform(18, 90), 1)),
        "sex": "F" if rng.random() < 0.5 else "M",
        "noise_seed_pa": int(rng.integers(2**31)),
        "noise_seed_lat": int(rng.integers(2**31)),
    }


def _local_grid(n: int, theta: float, shift):
    """Pixel coordinates expressed in the phantom's own (unrotated, unshifted) frame."""
    c = (n - 1) / 2.0
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    dx, dy = xs - c - shift[0], ys - c - shift[1]
    ct, st = np.cos(theta), np.sin(theta)
    return ct * dx + st * dy, -st * dx + ct * dy


def _to_image(points_local, n: int, theta: float, shift) -> np.ndarray:
    c = (n - 1) / 2.0
    ct, st = np.cos(theta), np.sin(theta)
    p = np.asarray(points_local, dtype=np.float64)
    x = ct * p[:, 0] - st * p[:, 1] + c + shift[0]
    y = st * p[:, 0] + ct * p[:, 1] + c + shift[1]
    return np.stack([x, y], axis=1)


def _render(spec: PhantomSpec, prm: dict, view: View, fractured: bool):
    n, mm = spec.image_size, 1.0 / spec.pixel_spacing_mm
    theta = np.deg2rad(prm["theta"] * spec.rotation_range_deg)
    lx, ly = _local_grid(n, theta, prm["shift"])
    bottom = n * 2.0
    tissue = _capsule(lx, ly, 0.0, -28 * mm, bottom, 30 * mm) * prm["tissue"]
    bone = prm["bone"]
    if view is View.PA:
        rr, ru = prm["radius_r"] * mm, prm["ulna_r"] * mm
        half = (rr + ru + prm["gap"] * mm) / 2.0
        xr, xu = -half + (ru - rr) / 2.0, half + (ru - rr) / 2.0
        top_r = prm["radius_top"] * mm
        top_u = top_r + prm["ulna_drop"] * mm
        radius = _capsule(lx, ly, xr, top_r, bottom, rr)
        ulna = _capsule(lx, ly, xu, top_u, bottom, ru)
        ch = 5.0 * mm
        carpal_y = top_r - rr - prm["carpal_gap"] * mm - ch
        carpal_x = (xr + xu) / 2.0
        carpal = _ellipse(lx, ly, carpal_x, carpal_y, half + 0.6 * rr, ch)
        bones = np.maximum.reduce([radius, ulna, carpal])
        points = [(xu, top_u - 0.5 * ru), (xr, top_r - 0.5 * rr), (carpal_x, carpal_y)]
        axis_x, axis_top = xr, top_r - rr
        depth, angle = prm["frac_depth"] * mm, np.deg2rad(prm["frac_angle"])
    else:
        rl = prm["lat_r"] * mm
        top = prm["lat_top"] * mm
        shaft = _capsule(lx, ly, 0.0, top, bottom, rl)
        inner = _capsule(lx, ly, 0.0, top + 3 * mm, bottom, 0.55 * rl)
        ch = 6.0 * mm
        carpal_y = top - rl - prm["carpal_gap"] * mm - ch
        carpal = _ellipse(lx, ly, 0.0, carpal_y, 0.8 * rl, ch)
        bones = np.maximum.reduce([shaft, carpal])
        points = [(-0.6 * rl, top - 0.3 * rl), (0.6 * rl, top - 0.3 * rl), (0.0, carpal_y)]
        radius = shaft
        axis_x, axis_top = 0.0, top - rl
        depth, angle = prm["lat_frac_depth"] * mm, np.deg2rad(prm["lat_frac_angle"])
        bones = np.clip(bones + 0.12 * inner, 0.0, 1.12)
    base = np.maximum(tissue, bones * bone) + 0.05
    base = base + prm["gradient"][0] * lx / n + prm["gradient"][1] * ly / n

    band_y = axis_top + depth
    band = _band(lx, ly, axis_x, band_y, angle, spec.fracture_width_px) * radius if fractured else np.zeros_like(base)
    image = base - spec.fracture_contrast * bone * band
    noise_seed = prm["noise_seed_pa" if view is View.PA else "noise_seed_lat"]
    image = image + np.random.default_rng(noise_seed).normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    mask = band > 0.5
    lm = _to_image(points, n, theta, prm["shift"])
    return image, lm, mask


def generate(spec: PhantomSpec) -> list[PhantomCase]:
    """Render `spec.n_cases` cases, each as a PA and a LAT image (PA first)."""
    root = RngState(spec.seed)
    n_frac = int(round(spec.fracture_rate * spec.n_cases))
    labels = np.zeros(spec.n_cases, dtype=bool)
    labels[:n_frac] = True
    root.generator("labels").shuffle(labels)
    mm = 1.0 / spec.pixel_spacing_mm
    out = []
    for i in range(spec.n_cases):
        prm = _draw_case_params(root.generator("case", i), mm)
        pid = f"{spec.id_prefix}-{i:04d}"
        for view in (View.PA, View.LAT):
            image, pts, mask = _render(spec, prm, view, bool(labels[i]))
            r = Radiograph(
                image=image, pixel_spacing_mm=spec.pixel_spacing_mm, view=view,
                patient_id=pid, image_id=f"{pid}_{view.value}",
                label="fracture" if labels[i] else "normal",
                age=prm["age"], sex=prm["sex"], stratum=spec.stratum,
            )
            lm = LandmarkSet(points=pts, view=view, source="annotation")
            lm.check_inside(image.shape)
            out.append(PhantomCase(r, lm, mask))
    return out


def matched_filter_score(r: Radiograph, lm: LandmarkSet) -> float:
    """Baseline fracture score: strongest dark transverse line below the radius top.

    Scans a window under the distal-radius landmark, correlating each row
    profile against a zero-mean line template. Needs no training.
    """
    img = r.image
    mm = 1.0 / r.pixel_spacing_mm
    if r.view is View.PA:
        x, y = lm.points[1]
    else:
        x, y = lm.points[:2].mean(axis=0)
    h, w = img.shape
    c0, c1 = int(max(x - 5 * mm, 0)), int(min(x + 5 * mm, w - 1)) + 1
    r0, r1 = int(max(y, 0)), int(min(y + 20 * mm, h - 1)) + 1
    profile = img[r0:r1, c0:c1].mean(axis=1)
    if profile.size < 7:
        return 0.0
    template = np.array([0.5, 0.5, -1.0, 0.5, 0.5]) / 1.5
    response = -np.correlate(profile - profile.mean(), template, mode="valid")
    return float(-response.min())


# ---------------------------------------------------------------------------
# benchmark

SPLITS = ("train", "test1", "test2")


def benchmark_specs(cfg: SyntheticConfig) -> dict[str, PhantomSpec]:
    common = dict(noise_sigma=cfg.noise_sigma, rotation_range_deg=cfg.rotation_range_deg,
                  image_size=cfg.image_size, pixel_spacing_mm=cfg.pixel_spacing_mm)
    easy = dict(fracture_contrast=cfg.easy_contrast, fracture_width_px=cfg.easy_width_px)
    hard = dict(fracture_contrast=cfg.hard_contrast, fracture_width_px=cfg.hard_width_px)
    base = cfg.seed * 1000
    return {
        "train": PhantomSpec(seed=base + 1, n_cases=cfg.n_train, fracture_rate=cfg.train_fracture_rate,
                             stratum="easy", id_prefix=f"s{cfg.seed}-train", **easy, **common),
        "test1": PhantomSpec(seed=base + 2, n_cases=cfg.n_test1, fracture_rate=cfg.test1_fracture_rate,
                             stratum="easy", id_prefix=f"s{cfg.seed}-test1", **easy, **common),
        "test2": PhantomSpec(seed=base + 3, n_cases=cfg.n_test2, fracture_rate=cfg.test2_fracture_rate,
                             stratum="hard", id_prefix=f"s{cfg.seed}-test2", **hard, **common),
    }


def split_benchmark(spec_easy: PhantomSpec, spec_hard: PhantomSpec, n_train: int = 600, n_test1: int = 200,
                    n_test2: int = 100, train_rate: float = 0.5, test1_rate: float = 0.62,
                    test2_rate: float = 0.2) -> dict[str, list[PhantomCase]]:
    """Train and test #1 from the easy stratum, test #2 from the hard one.

    Train and test #1 use seeds `spec_easy.seed` and `spec_easy.seed + 1`;
    test #2 uses `spec_hard.seed`, which must not collide with them.
    """
    if spec_easy.stratum is not Stratum.easy or spec_hard.stratum is not Stratum.hard:
        raise ValueError("split_benchmark needs an easy and a hard spec")
    if spec_hard.seed in (spec_easy.seed, spec_easy.seed + 1):
        raise ValueError("seed ranges of the easy and hard specs overlap")
    specs = {
        "train": dataclasses.replace(spec_easy, n_cases=n_train, fracture_rate=train_rate,
                                     id_prefix=f"{spec_easy.id_prefix}-train"),
        "test1": dataclasses.replace(spec_easy, seed=spec_easy.seed + 1, n_cases=n_test1,
                                     fracture_rate=test1_rate, id_prefix=f"{spec_easy.id_prefix}-test1"),
        "test2": dataclasses.replace(spec_hard, n_cases=n_test2, fracture_rate=test2_rate,
                                     id_prefix=f"{spec_hard.id_prefix}-test2"),
    }
    return _check_disjoint({k: generate(s) for k, s in specs.items()})


def _check_disjoint(splits: dict[str, list[PhantomCase]]) -> dict[str, list[PhantomCase]]:
    seen: dict[str, str] = {}
    for name, cases in splits.items():
        for pid in {c.radiograph.patient_id for c in cases}:
            if pid in seen and seen[pid] != name:
                raise DataError(f"patient {pid} appears in both {seen[pid]} and {name}")
            seen[pid] = name
    return splits


def build_benchmark(cfg: SyntheticConfig) -> dict[str, list[PhantomCase]]:
    return _check_disjoint({k: generate(s) for k, s in benchmark_specs(cfg).items()})


def write_split(cases: list[PhantomCase], out_dir, name: str) -> Path:
    """Write images, masks, a JSON-lines manifest and its landmark file."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    records, landmarks = [], {}
    for case in cases:
        r = case.radiograph
        rel = f"images/{r.image_id}.png"
        write_png16(r.image, out_dir / rel)
        write_png8(case.fracture_mask.astype(float), out_dir / f"masks/{r.image_id}.png")
        records.append({
            "patient_id": r.patient_id, "image_id": r.image_id, "view": r.view.value,
            "pixel_spacing_mm": r.pixel_spacing_mm, "path": rel,
            "label": r.label.value if r.label else None, "age": r.age,
            "sex": r.sex.value if r.sex else None,
            "stratum": r.stratum.value if r.stratum else None, "orientation": "up",
            "mask_path": f"masks/{r.image_id}.png",
        })
        landmarks[r.image_id] = case.landmarks
    manifest = write_manifest(records, out_dir / f"{name}.jsonl")
    write_landmarks(landmarks, out_dir / f"{name}.landmarks.json")
    return manifest


def write_benchmark(cfg: SyntheticConfig, out_dir, splits: Optional[dict] = None) -> dict[str, Path]:
    splits = build_benchmark(cfg) if splits is None else splits
    return {name: write_split(cases, out_dir, name) for name, cases in splits.items()}
