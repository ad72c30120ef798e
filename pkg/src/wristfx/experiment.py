"""End-to-end phantom experiments: train both views, predict, score strata, audit uncertainty."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy import ndimage

from .augment import tta_side, tta_variants
from .core import Config, LandmarkSet, PredictionRecord, Radiograph, RunManifest, Stratum, View
from .imaging import normalize_contrast, resize_bilinear, roi_for_view
from .metrics import auroc_labels, landmark_recall
from .models import grad_cam, load_checkpoint, predict_landmarks
from .synthetic import PhantomCase, build_benchmark
from .training import make_rois, train_classifier, train_deep_ensemble, train_localizer
from .uncertainty import RUN_DIRS, Pipeline, case_member_probabilities, ood_report, predict_case, write_ood_report

log = logging.getLogger(__name__)

VIEWS = ("PA", "LAT")


def prepared(cases: list[PhantomCase], view: Optional[str] = None,
             low_pct: float = 5.0, high_pct: float = 99.0) -> list[PhantomCase]:
    """Contrast-normalise phantom images (same preprocessing as the manifest loader)."""
    out = []
    for c in cases:
        if view is not None and c.radiograph.view.value != view:
            continue
        r = c.radiograph
        out.append(PhantomCase(r.with_image(normalize_contrast(r.image, low_pct, high_pct)), c.landmarks,
                               c.fracture_mask))
    return out


def train_views(train_cases: list[PhantomCase], cfg: Config, runs_dir, views=VIEWS,
                classifier_cfg: Optional[Config] = None) -> Path:
    """Localizer then classifier per view; classifier ROIs come from predicted landmarks."""
    runs_dir = Path(runs_dir)
    ccfg = classifier_cfg or cfg
    for view in views:
        cases = prepared(train_cases, view, cfg.roi.low_pct, cfg.roi.high_pct)
        pairs = [(c.radiograph, c.landmarks) for c in cases]
        ldir = runs_dir / RUN_DIRS["localizer"].format(view=view)
        t0 = time.time()
        lman = train_localizer(pairs, cfg, ldir, view=view)
        locs = [load_checkpoint(p)[0] for p in lman.checkpoint_paths(ldir)]
        predicted = {r.image_id: predict_landmarks(locs, r.image, view) for r, _ in pairs}
        rois = make_rois(pairs, ccfg, landmarks=predicted)
        t1 = time.time()
        train_classifier(rois, ccfg, runs_dir / RUN_DIRS["classifier"].format(view=view), view=view)
        log.info("view %s: localizer %.0fs, classifier %.0fs", view, t1 - t0, time.time() - t1)
    return runs_dir


def by_patient(cases: list[PhantomCase]) -> dict[str, dict[str, PhantomCase]]:
    out: dict[str, dict[str, PhantomCase]] = defaultdict(dict)
    for c in cases:
        out[c.radiograph.patient_id][c.radiograph.view.value] = c
    return dict(out)


@dataclass
class CasePrediction:
    record: PredictionRecord
    label: int
    stratum: str
    cases: dict
    views: dict = field(repr=False, default_factory=dict)


def predict_cases(pipeline: Pipeline, cases: list[PhantomCase], keep_views: bool = False) -> list[CasePrediction]:
    cases = prepared(cases, None, pipeline.cfg.roi.low_pct, pipeline.cfg.roi.high_pct)
    out = []
    for pid, views in sorted(by_patient(cases).items()):
        pa, lat = views.get("PA"), views.get("LAT")
        rec, vp = predict_case(pa.radiograph if pa else None, lat.radiograph if lat else None, pipeline,
                               return_views=True)
        first = next(iter(views.values())).radiograph
        out.append(CasePrediction(rec, int(first.is_fracture), first.stratum.value, views,
                                  vp if keep_views else {}))
    return out


def stratum_aurocs(preds: list[CasePrediction]) -> dict[str, float]:
    p = np.array([c.record.ensemble_probability for c in preds])
    y = np.array([c.label for c in preds])
    s = np.array([c.stratum for c in preds])
    out = {"pooled": auroc_labels(p, y)}
    for st in (Stratum.easy.value, Stratum.hard.value):
        m = s == st
        if m.any() and len(set(y[m])) == 2:
            out[st] = auroc_labels(p[m], y[m])
    return out


def landmark_recall_px(preds: list[CasePrediction], thresholds_px=(3.0, 5.0)) -> dict[float, float]:
    """Landmark recall in image pixels over every predicted view of every case."""
    pred, gt = [], []
    for c in preds:
        for view, lm in c.record.landmarks.items():
            truth = c.cases[view].landmarks
            pred.append(LandmarkSet(points=np.asarray(lm), view=truth.view, source="prediction"))
            gt.append(truth)
    return landmark_recall(pred, gt, 1.0, thresholds_px)


# ---------------------------------------------------------------------------
# GradCAM localisation

def roi_mask(r: Radiograph, mask: np.ndarray, lm: LandmarkSet, cfg: Config) -> np.ndarray:
    """The fracture mask cropped with the same geometry as the classifier ROI."""
    m = roi_for_view(r.with_image(mask.astype(np.float64)), lm, cfg.roi).image
    return m > 0.5


def dilate_3x(mask: np.ndarray) -> np.ndarray:
    """Grow a thin band so its thickness triples (dilate by the thickness on each side)."""
    if not mask.any():
        return mask
    cols = np.count_nonzero(mask.any(axis=0))
    thickness = max(1, int(np.ceil(mask.sum() / max(cols, 1))))
    return ndimage.binary_dilation(mask, iterations=thickness)


def roi_gradcam(classifiers, roi_image: np.ndarray, input_size: int, ratio: float) -> tuple[np.ndarray, np.ndarray]:
    """Member-averaged GradCAM of the unflipped centre crop, placed back on the ROI grid.

    Returns (heat on the ROI grid, raw penultimate-resolution heat).
    """
    x = tta_variants(roi_image, input_size, ratio)[4]
    heat = np.mean([grad_cam(m, x).heat for m in classifiers], axis=0)
    side = tta_side(input_size, ratio)
    full = np.zeros((side, side))
    off = (side - input_size) // 2
    full[off:off + input_size, off:off + input_size] = resize_bilinear(heat, input_size, input_size)
    if side != roi_image.shape[0]:
        full = resize_bilinear(full, *roi_image.shape)
    return full, heat


def center_of_mass(heat: np.ndarray) -> Optional[tuple[float, float]]:
    total = heat.sum()
    if not total > 0:
        return None
    ys, xs = np.indices(heat.shape)
    return float((ys * heat).sum() / total), float((xs * heat).sum() / total)


def overlay_rgb(roi_image: np.ndarray, heat: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """Blend a blue-to-red heat colouring over the grayscale ROI; returns uint8 RGB."""
    h = heat / heat.max() if heat.max() > 0 else heat
    colour = np.stack([h, np.zeros_like(h), 1.0 - h], axis=-1)
    gray = np.repeat(np.clip(roi_image, 0, 1)[..., None], 3, axis=-1)
    return np.round(255 * ((1 - alpha) * gray + alpha * colour)).astype(np.uint8)


def gradcam_hits(pipeline: Pipeline, preds: list[CasePrediction], view: str = "PA") -> dict:
    """For true positives: does the GradCAM centre of mass fall inside the dilated fracture mask?"""
    cfg = pipeline.cfg
    size = cfg.classifier.input_size
    vm = pipeline.views[View(view)]
    hits, total, nonneg, shaped = 0, 0, True, True
    for c in preds:
        if not (c.label == 1 and c.record.decision.value == "fracture") or View(view) not in c.views:
            continue
        vp = c.views[View(view)]
        case = c.cases[view]
        mask = dilate_3x(roi_mask(case.radiograph, case.fracture_mask, vp.landmarks, cfg))
        full, heat = roi_gradcam(vm.classifiers, vp.roi.image, size, cfg.roi.tta_resize_ratio)
        x = tta_variants(vp.roi.image, size, cfg.roi.tta_resize_ratio)[4]
        with torch.no_grad():
            feats = vm.classifiers[0].features(torch.from_numpy(x[None])).shape
        shaped &= heat.shape == tuple(feats[2:])
        nonneg &= bool(np.all(heat >= 0))
        total += 1
        com = center_of_mass(full)
        if com is None:
            continue
        iy, ix = int(round(com[0])), int(round(com[1]))
        if 0 <= iy < mask.shape[0] and 0 <= ix < mask.shape[1] and mask[iy, ix]:
            hits += 1
    return {"true_positives": total, "hits": hits, "fraction": hits / total if total else None,
            "non_negative": nonneg, "penultimate_shaped": shaped}


# ---------------------------------------------------------------------------
# full runs

@dataclass
class SeedResult:
    seed: int
    auroc: dict
    landmark_recall: dict
    seconds: float
    threshold: float

    @property
    def drop(self) -> float:
        return self.auroc["easy"] - self.auroc["hard"]

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["landmark_recall"] = {str(k): v for k, v in self.landmark_recall.items()}
        d["drop"] = self.drop
        return d


def seed_config(cfg: Config, seed: int) -> Config:
    return dataclasses.replace(cfg, seed=seed, synthetic=dataclasses.replace(cfg.synthetic, seed=seed))


def run_seed(cfg: Config, seed: int, out_dir, keep_views: bool = False):
    """Train on the easy split of one seed and score test #1, test #2 and their union."""
    t0 = time.time()
    cfg = seed_config(cfg, seed)
    out_dir = Path(out_dir)
    splits = build_benchmark(cfg.synthetic)
    runs = train_views(splits["train"], cfg, out_dir / "runs")
    pipeline = Pipeline.load(out_dir / "runs", cfg)
    preds = predict_cases(pipeline, splits["test1"] + splits["test2"], keep_views=keep_views)
    res = SeedResult(seed, stratum_aurocs(preds), landmark_recall_px(preds), time.time() - t0, pipeline.threshold)
    (out_dir / "result.json").write_text(json.dumps(res.to_json(), indent=2, sort_keys=True) + "\n")
    (out_dir / "predictions.json").write_text(
        json.dumps([dict(c.record.to_json(), label=c.label, stratum=c.stratum) for c in preds]) + "\n")
    log.info("seed %d: %s (%.0fs)", seed, res.auroc, res.seconds)
    return res, pipeline, preds, splits, runs


def run_deep_ensemble(cfg: Config, splits: dict, localizer_runs, out_dir, n_members: Optional[int] = None,
                      views=VIEWS) -> Pipeline:
    """Deep-ensemble classifiers on the seed's training split, reusing its localizers for ROIs."""
    out_dir = Path(out_dir)
    for view in views:
        cases = prepared(splits["train"], view, cfg.roi.low_pct, cfg.roi.high_pct)
        pairs = [(c.radiograph, c.landmarks) for c in cases]
        ldir = Path(localizer_runs) / RUN_DIRS["localizer"].format(view=view)
        locs = [load_checkpoint(p)[0] for p in RunManifest.load(ldir).checkpoint_paths(ldir)]
        predicted = {r.image_id: predict_landmarks(locs, r.image, view) for r, _ in pairs}
        rois = make_rois(pairs, cfg, landmarks=predicted)
        train_deep_ensemble(rois, cfg, out_dir / RUN_DIRS["classifier"].format(view=view), view, n_members)
    return Pipeline.load(out_dir, cfg, localizer_dir=localizer_runs)


def audit(pipeline: Pipeline, splits: dict, out_dir, member_counts=(3, 5, 7, 9), n_bootstrap: int = 1000,
          seed: int = 0) -> dict:
    """Easy test set as in-distribution, hard test set as OOD."""
    preds_in = predict_cases(pipeline, splits["test1"])
    preds_out = predict_cases(pipeline, splits["test2"])
    m_in = np.array([case_member_probabilities(c.record) for c in preds_in])
    m_out = np.array([case_member_probabilities(c.record) for c in preds_out])
    report = ood_report(m_in, m_out, member_counts, n_bootstrap, seed, pipeline.cfg.uncertainty.entropy_mode)
    write_ood_report(report, out_dir)
    return report
