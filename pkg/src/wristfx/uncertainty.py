"""Multi-view ensembling, temperature scaling and ensemble uncertainty for OOD audits."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .augment import tta_variants
from .core import (Config, DataError, Label, LandmarkSet, PredictionRecord, Radiograph, RunManifest, View,
                   build_config, parse_config_text)
from .imaging import RoiImage, roi_for_view
from .metrics import aupr, auroc, bootstrap_ci
from .models import load_checkpoint, predict_landmarks
from .training import ensemble_threshold

log = logging.getLogger(__name__)

MODES = ("cv_multiview", "deep_ensemble")
RUN_DIRS = {"localizer": "localizer_{view}", "classifier": "classifier_{view}"}


@dataclass(frozen=True)
class EnsembleSpec:
    """Which trained runs make up an ensemble.

    For deep ensembles `member_count` truncates each view's member list.
    """
    member_manifests: list
    mode: str = "cv_multiview"
    member_count: Optional[int] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.member_manifests:
            raise ValueError("ensemble has no members")
        if self.mode == "deep_ensemble":
            if self.member_count is None:
                raise ValueError("deep ensembles need member_count")
            for m in self.member_manifests:
                if len(m.fold_checkpoints) < self.member_count:
                    raise ValueError(f"{m.run_id}: {len(m.fold_checkpoints)} members available, "
                                     f"{self.member_count} requested")


@dataclass(frozen=True)
class UncertaintyRecord:
    mean_probability: float
    entropy: float
    predictive_variance: float
    temperature_applied: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.entropy <= math.log(2) + 1e-12:
            raise ValueError(f"binary entropy {self.entropy} outside [0, ln 2]")
        if not 0.0 <= self.predictive_variance <= 0.25 + 1e-12:
            raise ValueError(f"variance {self.predictive_variance} outside [0, 0.25]")


def binary_entropy(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log(p), 0.0) + np.where(p < 1, (1 - p) * np.log1p(-p), 0.0))
    return np.maximum(h, 0.0)


def uncertainty_of(member_probs: Sequence[float], temperature: float = 1.0,
                   entropy_mode: str = "entropy_of_mean") -> UncertaintyRecord:
    """Predictive entropy of the member mean and the population variance across members.

    `entropy_mode="mean_of_entropies"` averages the members' entropies instead.
    """
    p = np.asarray(member_probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("no member probabilities")
    mean = float(p.mean())
    if entropy_mode == "entropy_of_mean":
        h = float(binary_entropy(mean))
    elif entropy_mode == "mean_of_entropies":
        h = float(binary_entropy(p).mean())
    else:
        raise ValueError(f"unknown entropy mode {entropy_mode!r}")
    return UncertaintyRecord(mean, min(h, math.log(2)), float(p.var()), temperature)


def ood_auroc(uncertainties_in, uncertainties_out) -> float:
    """AUROC of uncertainty as a detector, OOD as the positive class."""
    return auroc(uncertainties_out, uncertainties_in)


# ---------------------------------------------------------------------------
# temperature scaling

def _margins(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 2:
        if z.shape[1] != 2:
            raise ValueError("binary logits must have 2 columns")
        return z[:, 1] - z[:, 0]
    return z.ravel()


def nll(logits, labels, temperature: float = 1.0) -> float:
    m = _margins(logits) / temperature
    y = np.asarray(labels).astype(int)
    # -log sigmoid(+-m) computed stably
    s = np.where(y == 1, -m, m)
    return float(np.mean(np.logaddexp(0.0, s)))


def calibrate_temperature(logits_val, labels_val, t_min: float = 0.05, t_max: float = 10.0) -> float:
    """Validation-NLL minimising temperature on [t_min, t_max] (bounded Brent search).

    Falls back to T = 1 if the search does not beat it, so NLL never increases.
    """
    y = np.asarray(labels_val).astype(int)
    if len(np.unique(y)) < 2:
        raise ValueError("temperature calibration needs both classes")
    if len(y) != len(_margins(logits_val)):
        raise ValueError("logits and labels differ in length")
    res = minimize_scalar(lambda t: nll(logits_val, y, t), bounds=(t_min, t_max), method="bounded",
                          options={"xatol": 1e-6})
    t = float(res.x)
    return t if nll(logits_val, y, t) <= nll(logits_val, y, 1.0) else 1.0


def scaled_probability(logits, temperature: float = 1.0) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-_margins(logits) / temperature))


# ---------------------------------------------------------------------------
# loaded pipeline

@dataclass
class ViewModels:
    view: View
    classifiers: list
    temperatures: list
    threshold: float
    localizers: list = field(default_factory=list)


@dataclass
class Pipeline:
    """Trained localizers and classifiers for each view, plus the config they were trained with."""
    views: dict
    cfg: Config
    spec: Optional[EnsembleSpec] = None

    @property
    def threshold(self) -> float:
        return ensemble_threshold([v.threshold for v in self.views.values()])

    @classmethod
    def load(cls, runs_dir, cfg: Optional[Config] = None, member_count: Optional[int] = None,
             views: Sequence[str] = ("PA", "LAT"), localizer_dir=None) -> "Pipeline":
        runs_dir = Path(runs_dir)
        loaded, manifests = {}, []
        for v in views:
            cdir = runs_dir / RUN_DIRS["classifier"].format(view=v)
            cm = RunManifest.load(cdir)
            manifests.append(cm)
            if cfg is None and (cdir / "config.txt").is_file():
                cfg = build_config(parse_config_text((cdir / "config.txt").read_text()))
            paths = cm.checkpoint_paths(cdir)
            names = [p for _, p in cm.fold_checkpoints]
            if member_count is not None:
                if member_count > len(paths):
                    raise DataError(f"{cdir}: {len(paths)} members available, {member_count} requested")
                paths, names = paths[:member_count], names[:member_count]
            clfs = [load_checkpoint(p)[0] for p in paths]
            temps = [cm.temperature.get(Path(n).stem, 1.0) for n in names]
            ldir = Path(localizer_dir or runs_dir) / RUN_DIRS["localizer"].format(view=v)
            locs = []
            if (ldir / "run_manifest.json").is_file():
                lm = RunManifest.load(ldir)
                locs = [load_checkpoint(p)[0] for p in lm.checkpoint_paths(ldir)]
            loaded[View(v)] = ViewModels(View(v), clfs, temps, cm.thresholds.get(View(v).value, 0.5), locs)
        mode = "deep_ensemble" if manifests[0].mode == "deep_ensemble" else "cv_multiview"
        n = member_count if mode == "deep_ensemble" else None
        if mode == "deep_ensemble" and n is None:
            n = min(len(m.fold_checkpoints) for m in manifests)
        return cls(loaded, cfg if cfg is not None else build_config({}), EnsembleSpec(manifests, mode, n))


def tta_member_probabilities(classifiers, temperatures, roi_image: np.ndarray, input_size: int,
                             ratio: float) -> np.ndarray:
    """(M, 10) fracture probabilities: each member on each test-time variant."""
    import torch

    x = torch.from_numpy(tta_variants(roi_image, input_size, ratio))
    out = []
    with torch.no_grad():
        for model, t in zip(classifiers, temperatures):
            model.eval()
            out.append(scaled_probability(model(x).double().numpy(), t))
    return np.array(out)


@dataclass(frozen=True, eq=False)
class ViewPrediction:
    probability: float
    member_probabilities: np.ndarray
    tta_probabilities: np.ndarray
    landmarks: LandmarkSet
    roi: RoiImage


def predict_view(vm: ViewModels, r: Radiograph, cfg: Config,
                 landmarks: Optional[LandmarkSet] = None) -> ViewPrediction:
    if landmarks is None:
        if not vm.localizers:
            raise DataError(f"{r.image_id}: no localizer loaded and no landmarks supplied")
        landmarks = predict_landmarks(vm.localizers, r.image, vm.view)
    roi = roi_for_view(r, landmarks, cfg.roi)
    probs = tta_member_probabilities(vm.classifiers, vm.temperatures, roi.image, cfg.classifier.input_size,
                                     cfg.roi.tta_resize_ratio)
    members = probs.mean(axis=1)
    return ViewPrediction(float(members.mean()), members, probs.mean(axis=0), landmarks, roi)


def aggregate(view_probabilities: dict, threshold: float) -> tuple[float, Label]:
    """Mean of the view probabilities and the thresholded decision."""
    if not view_probabilities:
        raise DataError("no view probabilities to aggregate")
    p = float(np.mean(list(view_probabilities.values())))
    return p, Label.fracture if p >= threshold else Label.normal


def predict_case(pa: Optional[Radiograph], lat: Optional[Radiograph], pipeline: Pipeline,
                 landmarks: Optional[dict] = None, return_views: bool = False):
    """Ensemble prediction for one patient.

    A missing view falls back to the other view's probability and is listed
    in `missing_views`.
    """
    landmarks = landmarks or {}
    views, missing = {}, []
    for view, r in ((View.PA, pa), (View.LAT, lat)):
        if r is None or view not in pipeline.views:
            missing.append(view.value)
            continue
        if r.view is not view:
            raise DataError(f"{r.image_id}: expected a {view.value} image, got {r.view.value}")
        views[view] = predict_view(pipeline.views[view], r, pipeline.cfg, landmarks.get(r.image_id))
    if not views:
        raise DataError("case has neither view")
    if missing:
        log.warning("patient %s: missing view(s) %s, using single-view probability",
                    (pa or lat).patient_id, ",".join(missing))
    probs = {v.value: p.probability for v, p in views.items()}
    # single-view fallback uses that view's own threshold
    threshold = pipeline.threshold if not missing else pipeline.views[next(iter(views))].threshold
    ens, decision = aggregate(probs, threshold)
    rec = PredictionRecord(
        patient_id=(pa or lat).patient_id,
        probabilities=probs,
        tta_probabilities={v.value: p.tta_probabilities.tolist() for v, p in views.items()},
        ensemble_probability=ens,
        threshold=threshold,
        decision=decision,
        member_probabilities={v.value: p.member_probabilities.tolist() for v, p in views.items()},
        missing_views=tuple(missing),
        landmarks={v.value: p.landmarks.points.tolist() for v, p in views.items()},
    )
    return (rec, views) if return_views else rec


def case_member_probabilities(rec: PredictionRecord) -> np.ndarray:
    """Per-member case probability: mean over the available views."""
    if not rec.member_probabilities:
        raise DataError(f"{rec.patient_id}: prediction has no member probabilities")
    rows = [np.asarray(v, dtype=np.float64) for v in rec.member_probabilities.values()]
    n = min(len(r) for r in rows)
    return np.mean([r[:n] for r in rows], axis=0)


# ---------------------------------------------------------------------------
# OOD audit

def _auc_ci(score_in, score_out, n_bootstrap, seed, fn=auroc):
    s = np.concatenate([score_in, score_out])
    y = np.r_[np.zeros(len(score_in)), np.ones(len(score_out))].astype(int)
    return bootstrap_ci(lambda p, lab: fn(p[lab == 1], p[lab == 0]), s, y, n_bootstrap, seed)


def ood_report(members_in: np.ndarray, members_out: np.ndarray, member_counts=(3, 5, 7, 9),
               n_bootstrap: int = 1000, seed: int = 0, entropy_mode: str = "entropy_of_mean") -> dict:
    """Entropy and variance OOD detection for ensembles truncated to each member count."""
    members_in, members_out = np.atleast_2d(members_in), np.atleast_2d(members_out)
    available = min(members_in.shape[1], members_out.shape[1])
    rows, hist = [], {}
    for m in member_counts:
        if m > available:
            raise ValueError(f"{m} members requested, {available} available")
        u_in = [uncertainty_of(p[:m], entropy_mode=entropy_mode) for p in members_in]
        u_out = [uncertainty_of(p[:m], entropy_mode=entropy_mode) for p in members_out]
        h_in, h_out = np.array([u.entropy for u in u_in]), np.array([u.entropy for u in u_out])
        v_in, v_out = np.array([u.predictive_variance for u in u_in]), np.array([u.predictive_variance for u in u_out])
        rows.append({
            "member_count": m,
            "entropy_auroc": ood_auroc(h_in, h_out),
            "entropy_auroc_ci": list(_auc_ci(h_in, h_out, n_bootstrap, seed)),
            "variance_auroc": ood_auroc(v_in, v_out),
            "variance_auroc_ci": list(_auc_ci(v_in, v_out, n_bootstrap, seed + 1)),
            "entropy_aupr": aupr(h_out, h_in),
            "entropy_aupr_ci": list(_auc_ci(h_in, h_out, n_bootstrap, seed + 2, aupr)),
            "variance_aupr": aupr(v_out, v_in),
            "variance_aupr_ci": list(_auc_ci(v_in, v_out, n_bootstrap, seed + 3, aupr)),
        })
        hist[m] = (h_in, h_out)
    return {"rows": rows, "n_in": len(members_in), "n_out": len(members_out), "entropy_mode": entropy_mode,
            "_entropies": hist}


def write_ood_report(report: dict, out_dir, bins: int = 20) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    body = {k: v for k, v in report.items() if not k.startswith("_")}
    jpath = out_dir / "ood_report.json"
    jpath.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    cpath = out_dir / "entropy_histogram.csv"
    edges = np.linspace(0.0, math.log(2), bins + 1)
    with cpath.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["member_count", "bin_low", "bin_high", "in_count", "ood_count"])
        for m, (h_in, h_out) in report["_entropies"].items():
            c_in, _ = np.histogram(np.clip(h_in, 0, edges[-1]), edges)
            c_out, _ = np.histogram(np.clip(h_out, 0, edges[-1]), edges)
            for lo, hi, a, b in zip(edges[:-1], edges[1:], c_in, c_out):
                w.writerow([m, f"{lo:.6f}", f"{hi:.6f}", int(a), int(b)])
    return jpath, cpath
