"""Classification, agreement and landmark metrics with stratified bootstrap intervals."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import LandmarkSet, NumericalError, Sex

METRICS = ("auroc", "aupr", "sensitivity", "specificity", "precision", "f1", "balanced_accuracy")


def _nonempty(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    return a


def auroc(scores_pos, scores_neg) -> float:
    """P(pos > neg) + 0.5 P(tie), computed from mid-ranks."""
    pos, neg = _nonempty(scores_pos, "scores_pos"), _nonempty(scores_neg, "scores_neg")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def aupr(scores_pos, scores_neg) -> float:
    """Average precision: sum over score thresholds of precision times recall gained.

    Tied scores form one threshold, so ties are not rewarded by their order.
    """
    pos = _nonempty(scores_pos, "scores_pos")
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    scores = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, y = scores[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall_gain = np.diff(np.r_[0.0, tp]) / pos.size
    return float(np.sum(precision * recall_gain))


def auroc_labels(scores, labels) -> float:
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(int)
    return auroc(scores[labels == 1], scores[labels == 0])


def aupr_labels(scores, labels) -> float:
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(int)
    return aupr(scores[labels == 1], scores[labels == 0])


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else float(num / den)


def confusion_metrics(decisions, labels) -> dict[str, Optional[float]]:
    """Sensitivity, specificity, precision, F1 and balanced accuracy; undefined ones are None."""
    d = np.asarray(decisions).astype(int).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if d.size == 0 or d.size != y.size:
        raise ValueError(f"need equal-length nonempty inputs, got {d.size} and {y.size}")
    tp = int(np.sum((d == 1) & (y == 1)))
    tn = int(np.sum((d == 0) & (y == 0)))
    fp = int(np.sum((d == 1) & (y == 0)))
    fn = int(np.sum((d == 0) & (y == 1)))
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    prec = _ratio(tp, tp + fp)
    f1 = None if prec is None or sens is None or prec + sens == 0 else 2 * prec * sens / (prec + sens)
    bal = None if sens is None or spec is None else (sens + spec) / 2
    return {"sensitivity": sens, "specificity": spec, "precision": prec, "f1": f1, "balanced_accuracy": bal}


def balanced_accuracy(sensitivity: float, specificity: float) -> float:
    return (sensitivity + specificity) / 2.0


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# bootstrap

class UndefinedMetric(ValueError):
    pass


@dataclass(frozen=True)
class BootstrapResult:
    low: float
    high: float
    samples: np.ndarray = field(repr=False)
    redraws: int = 0


def bootstrap_distribution(metric_fn: Callable, predictions, labels, n_iter: int = 5000, seed: int = 0,
                           level: float = 0.95) -> BootstrapResult:
    """Stratified bootstrap: resample each label stratum with replacement at its own size.

    A resample on which `metric_fn` is undefined (returns None/NaN or raises
    UndefinedMetric/ValueError) is redrawn; more than 10*n_iter attempts in
    total is an error.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    preds = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if preds.shape[0] != y.shape[0] or y.size == 0:
        raise ValueError("predictions and labels must be nonempty and equal length")
    strata = [np.flatnonzero(y == v) for v in np.unique(y)]
    rng = np.random.default_rng(seed)
    out = np.empty(n_iter)
    attempts = done = 0
    while done < n_iter:
        if attempts >= 10 * n_iter:
            raise NumericalError(f"metric undefined on too many resamples ({attempts - done} redraws)")
        attempts += 1
        idx = np.concatenate([s[rng.integers(0, s.size, s.size)] for s in strata])
        try:
            v = metric_fn(preds[idx], y[idx])
        except ValueError:
            v = None
        if v is None or not math.isfinite(v):
            continue
        out[done] = v
        done += 1
    a = (1 - level) / 2
    low, high = np.percentile(out, [100 * a, 100 * (1 - a)])
    return BootstrapResult(float(low), float(high), out, attempts - n_iter)


def bootstrap_ci(metric_fn: Callable, predictions, labels, n_iter: int = 5000, seed: int = 0,
                 level: float = 0.95) -> tuple[float, float]:
    r = bootstrap_distribution(metric_fn, predictions, labels, n_iter, seed, level)
    return r.low, r.high


# ---------------------------------------------------------------------------
# agreement

def quadratic_kappa(table) -> float:
    """Cohen's kappa with quadratic weights on a k x k table of counts.

    Zero expected disagreement (both raters constant on the same category)
    is defined as perfect agreement, 1.0.
    """
    o = np.asarray(table, dtype=np.float64)
    if o.ndim != 2 or o.shape[0] != o.shape[1]:
        raise ValueError(f"rater table must be square, got {o.shape}")
    if np.any(o < 0) or np.any(o != np.round(o)):
        raise ValueError("rater table must hold non-negative integer counts")
    n = o.sum()
    if n <= 0:
        raise ValueError("rater table is empty")
    k = o.shape[0]
    if k == 1:
        return 1.0
    i, j = np.indices((k, k))
    w = (i - j) ** 2 / (k - 1) ** 2
    e = np.outer(o.sum(axis=1), o.sum(axis=0)) / n
    expected = float(np.sum(w * e))
    if expected == 0.0:
        return 1.0
    return 1.0 - float(np.sum(w * o)) / expected


def rater_table(a: Sequence[int], b: Sequence[int], k: int) -> np.ndarray:
    t = np.zeros((k, k), dtype=int)
    for x, y in zip(a, b, strict=True):
        t[x, y] += 1
    return t


# ---------------------------------------------------------------------------
# landmarks

def landmark_distances_mm(pred: Sequence[LandmarkSet], gt: Sequence[LandmarkSet], spacing_mm) -> np.ndarray:
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions vs {len(gt)} annotations")
    spacing = np.broadcast_to(np.asarray(spacing_mm, dtype=np.float64), (len(pred),))
    d = [s * np.linalg.norm(np.asarray(p.points) - np.asarray(g.points), axis=1)
         for p, g, s in zip(pred, gt, spacing)]
    return np.concatenate(d) if d else np.zeros(0)


def landmark_recall(pred, gt, spacing_mm, thresholds_mm) -> dict[float, float]:
    """Fraction of keypoints within each distance threshold (pixel distance x spacing)."""
    d = landmark_distances_mm(pred, gt, spacing_mm)
    if d.size == 0:
        raise ValueError("no landmarks to score")
    return {float(t): float(np.mean(d <= t)) for t in thresholds_mm}


# ---------------------------------------------------------------------------
# confounders

@dataclass(frozen=True)
class Coefficient:
    estimate: float
    std_error: float
    z: float
    p_value: float


@dataclass(frozen=True)
class RegressionResult:
    coefficients: dict
    n: int
    n_excluded: int
    iterations: int

    def to_json(self) -> dict:
        return {"n": self.n, "n_excluded": self.n_excluded, "iterations": self.iterations,
                "coefficients": {k: vars(c) for k, c in self.coefficients.items()}}


def wald_p_value(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


def logistic_irls(x: np.ndarray, y: np.ndarray, max_iter: int = 100, tol: float = 1e-8):
    """Newton/IRLS fit; returns (beta, covariance, iterations).

    Complete or quasi-complete separation shows up as diverging coefficients
    with fitted probabilities collapsing onto 0/1, and raises NumericalError.
    """
    beta = np.zeros(x.shape[1])
    for it in range(1, max_iter + 1):
        eta = x @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        w = p * (1 - p)
        if np.max(np.abs(eta)) > 30 or np.mean(w < 1e-10) > 0.5:
            raise NumericalError("separation: fitted probabilities collapse to 0/1 (a covariate predicts the label)")
        hess = x.T @ (w[:, None] * x)
        try:
            step = np.linalg.solve(hess, x.T @ (y - p))
        except np.linalg.LinAlgError:
            raise NumericalError("singular information matrix (collinear covariates or separation)") from None
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            eta = x @ beta
            if np.max(np.abs(eta)) > 30:
                raise NumericalError("separation: fitted probabilities collapse to 0/1")
            p = 1.0 / (1.0 + np.exp(-eta))
            cov = np.linalg.inv(x.T @ ((p * (1 - p))[:, None] * x))
            return beta, cov, it
    raise NumericalError(f"IRLS did not converge in {max_iter} iterations (possible separation)")


def _sex_code(s) -> Optional[float]:
    if s is None:
        return None
    if isinstance(s, (int, float, np.integer, np.floating)) and not isinstance(s, bool):
        return None if np.isnan(s) else float(s)
    return 1.0 if Sex(s) is Sex.M else 0.0


def confounder_regression(probabilities, age, sex, labels, max_iter: int = 100,
                          tol: float = 1e-8) -> RegressionResult:
    """Logistic regression of the label on model probability, age and sex (M=1).

    Rows with a missing age or sex are dropped.
    """
    rows = []
    n_in = len(labels)
    for p, a, s, y in zip(probabilities, age, sex, labels, strict=True):
        sc = _sex_code(s)
        if a is None or sc is None or (isinstance(a, float) and math.isnan(a)):
            continue
        rows.append((1.0, float(p), float(a), sc, int(y)))
    if len(rows) < 10:
        raise ValueError(f"need >= 10 complete cases, got {len(rows)}")
    m = np.array(rows)
    x, y = m[:, :4], m[:, 4]
    beta, cov, it = logistic_irls(x, y, max_iter, tol)
    se = np.sqrt(np.diag(cov))
    names = ("intercept", "probability", "age", "sex")
    coefs = {n: Coefficient(float(b), float(e), float(b / e), wald_p_value(b / e))
             for n, b, e in zip(names, beta, se)}
    return RegressionResult(coefs, len(rows), n_in - len(rows), it)


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class MetricValue:
    point: float
    low: float
    high: float


@dataclass
class MetricReport:
    metrics: dict
    n_bootstrap: int
    seed: int
    n_positive: int = 0
    n_negative: int = 0
    threshold: Optional[float] = None
    flags: list = field(default_factory=list)

    def value(self, name: str) -> Optional[float]:
        m = self.metrics.get(name)
        return None if m is None else m.point

    def to_json(self) -> dict:
        return {"metrics": {k: (None if v is None else vars(v)) for k, v in self.metrics.items()},
                "n_bootstrap": self.n_bootstrap, "seed": self.seed, "n_positive": self.n_positive,
                "n_negative": self.n_negative, "threshold": self.threshold, "flags": list(self.flags)}


def _threshold_metric(name: str, threshold: float):
    def fn(p, y):
        return confusion_metrics(p >= threshold, y)[name]
    return fn


def _ranking_metric(name: str):
    f = auroc_labels if name == "auroc" else aupr_labels

    def fn(p, y):
        if (name == "auroc" and len(np.unique(y)) < 2) or not np.any(y == 1):
            return None
        return f(p, y)
    return fn


def metric_report(probabilities, labels, threshold: float, n_bootstrap: int = 5000,
                  seed: int = 0) -> MetricReport:
    """Point estimates and stratified-bootstrap 95% intervals for every metric.

    Metrics undefined on the full sample (e.g. AUROC on a single-class set)
    are reported as None.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    out, flags = {}, []
    for i, name in enumerate(METRICS):
        fn = _ranking_metric(name) if name in ("auroc", "aupr") else _threshold_metric(name, threshold)
        point = fn(p, y)
        if point is None:
            out[name] = None
            continue
        lo, hi = bootstrap_ci(fn, p, y, n_bootstrap, seed + i)
        if not lo <= point <= hi:
            flags.append(f"{name}: point {point:.4f} outside CI [{lo:.4f}, {hi:.4f}]")
        out[name] = MetricValue(float(point), lo, hi)
    return MetricReport(out, n_bootstrap, seed, int(np.sum(y == 1)), int(np.sum(y == 0)), threshold, flags)


def _fmt(v: Optional[MetricValue]) -> str:
    return "" if v is None else f"{v.point:.2f} ({v.low:.2f} - {v.high:.2f})"


def write_report_json(reports: dict, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    body = {name: r.to_json() for name, r in reports.items()}
    if extra:
        body.update(extra)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def write_report_csv(rows: dict, path) -> Path:
    """One row per (dataset, model) with "point (low - high)" cells per metric."""
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dataset", "model", *METRICS])
        for (dataset, model), rep in rows.items():
            w.writerow([dataset, model, *(_fmt(rep.metrics.get(m)) for m in METRICS)])
    return path
