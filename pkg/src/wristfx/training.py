"""Grouped cross-validation, SGD schedules, threshold selection and the two trainers."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import apply_policy, mixup, tta_side, tta_variants
from .core import Config, DataError, NumericalError, LandmarkSet, Radiograph, RngState, RunManifest, View
from .imaging import RoiImage, resize_bilinear, roi_for_view
from .models import (HourglassLocalizer, SEResNetClassifier, classifier_meta, load_pretrained,
                     localizer_input, localizer_meta, parameter_digest, save_checkpoint)

log = logging.getLogger(__name__)


class TrainingDivergence(NumericalError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# folds

@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: frozenset
    val_ids: frozenset

    def __post_init__(self):
        if self.train_ids & self.val_ids:
            raise ValueError(f"fold {self.fold_index}: patients in both train and val")


def _patient_of(item) -> str:
    if isinstance(item, str):
        return item
    if hasattr(item, "patient_id"):
        return item.patient_id
    return _patient_of(item[0])


def _label_of(item) -> Optional[int]:
    if isinstance(item, str):
        return None
    if hasattr(item, "patient_id"):
        lab = getattr(item, "label", None)
        if lab is None:
            return None
        return int(item.is_fracture) if isinstance(item, Radiograph) else int(lab)
    if isinstance(item[0], str) and len(item) > 1 and isinstance(item[1], (bool, int, np.integer)):
        return int(item[1])  # (patient_id, label)
    return _label_of(item[0])


def make_folds(dataset: Sequence, k: int, seed: int = 0) -> list[FoldSplit]:
    """Patient-grouped k-fold, stratified on the patient-level label.

    Patients are shuffled within each label group and dealt round-robin,
    continuing the deal across groups so fold sizes differ by at most one.
    """
    if k < 2:
        raise ValueError("need k >= 2 folds")
    labels: dict[str, int] = {}
    for item in dataset:
        pid, lab = _patient_of(item), _label_of(item)
        labels[pid] = max(labels.get(pid, -1), -1 if lab is None else lab)
    if len(labels) < k:
        raise ValueError(f"{len(labels)} patients cannot fill {k} folds")
    rng = RngState(seed).generator("folds", k)
    members = [[] for _ in range(k)]
    slot = 0
    for lab in sorted(set(labels.values())):
        group = sorted(p for p, v in labels.items() if v == lab)
        rng.shuffle(group)
        for pid in group:
            members[slot % k].append(pid)
            slot += 1
    everyone = frozenset(labels)
    return [FoldSplit(i, everyone - frozenset(m), frozenset(m)) for i, m in enumerate(members)]


def holdout_split(dataset: Sequence, val_fraction: float, seed: int = 0) -> FoldSplit:
    """Single grouped train/val split (used by deep ensembles)."""
    k = max(2, int(round(1.0 / val_fraction)))
    return make_folds(dataset, k, seed)[0]


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class Schedule:
    epochs: int = 300
    lr: float = 1e-1
    drops: tuple = (150, 200, 250)
    drop_factor: float = 10.0
    momentum: float = 0.0
    nesterov: bool = False
    batch: int = 32
    weight_decay: float = 0.0
    head_only_epochs: int = 0

    def __post_init__(self):
        if list(self.drops) != sorted(set(self.drops)) or any(d >= self.epochs for d in self.drops):
            raise ValueError("drops must be strictly increasing and below epochs")
        if not self.drop_factor > 1:
            raise ValueError("drop_factor must be > 1")

    @classmethod
    def from_block(cls, block_cfg) -> "Schedule":
        return cls(epochs=block_cfg.epochs, lr=block_cfg.lr, drops=tuple(block_cfg.drops),
                   drop_factor=block_cfg.drop_factor, momentum=block_cfg.momentum,
                   nesterov=block_cfg.nesterov, batch=block_cfg.batch_size,
                   weight_decay=block_cfg.weight_decay,
                   head_only_epochs=getattr(block_cfg, "head_only_epochs", 0))


def lr_at(schedule: Schedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.epochs})")
    n_drops = sum(1 for d in schedule.drops if d <= epoch)
    return schedule.lr * schedule.drop_factor ** (-n_drops)


def _optimizer(params, schedule: Schedule):
    return torch.optim.SGD(params, lr=schedule.lr, momentum=schedule.momentum,
                           nesterov=schedule.nesterov, weight_decay=schedule.weight_decay)


# ---------------------------------------------------------------------------
# thresholds

def f1_at(probs: np.ndarray, labels: np.ndarray, t: float) -> float:
    pred = probs >= t
    tp = np.sum(pred & (labels == 1))
    fp = np.sum(pred & (labels == 0))
    fn = np.sum(~pred & (labels == 1))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def threshold_candidates(probs: np.ndarray) -> np.ndarray:
    u = np.unique(probs)
    return np.unique(np.concatenate([[0.0], (u[:-1] + u[1:]) / 2.0, [1.0]]))


def select_threshold(oof: Sequence[tuple[float, int]]) -> float:
    """F1-maximising threshold over {0, midpoints of sorted unique probabilities, 1}.

    Ties go to the smallest threshold.
    """
    probs = np.array([p for p, _ in oof], dtype=np.float64)
    labels = np.array([int(y) for _, y in oof])
    if len(set(labels.tolist())) < 2:
        raise ValueError("threshold selection needs both labels")
    best_t, best_f1 = 0.0, -1.0
    for t in threshold_candidates(probs):
        f1 = f1_at(probs, labels, t)
        if f1 > best_f1:
            best_t, best_f1 = float(t), f1
    return best_t


def ensemble_threshold(view_thresholds: Sequence[float]) -> float:
    return float(np.mean(view_thresholds))


# ---------------------------------------------------------------------------
# shared training helpers

def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def landmark_l1(preds: list[torch.Tensor], targets: torch.Tensor, size: int) -> torch.Tensor:
    """L1 on coordinates normalised by the input side, summed over hourglass stacks."""
    return sum(F.l1_loss(p / size, targets / size) for p in preds)


def batch_loss(model, x: np.ndarray, y: np.ndarray, loss_fn: Callable, alpha: Optional[float] = None,
               rng: Optional[np.random.Generator] = None, lam=None) -> torch.Tensor:
    """Loss on a (possibly mixed-up) batch; partners are a random permutation of the batch."""
    if alpha is not None or lam is not None:
        perm = rng.permutation(len(x)) if rng is not None else np.arange(len(x))
        mb = mixup(x, y, x[perm], y[perm], alpha if alpha is not None else 1.0, rng, lam=lam)
        x, y = mb.x_mix, mb.y_mix
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    yt = torch.from_numpy(np.ascontiguousarray(y, dtype=np.float32))
    return loss_fn(model(xt), yt)


def _init_model(factory: Callable, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


class MetricsLog:
    """Per-epoch JSON lines: epoch, lr, train_loss, val_metric."""

    def __init__(self, path: Path):
        self.path = path
        self.path.write_text("")
        self.records: list[dict] = []

    def write(self, **rec):
        self.records.append(rec)
        with self.path.open("a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _check_finite(loss: torch.Tensor, epoch: int):
    if not torch.isfinite(loss):
        raise TrainingDivergence(epoch, f"loss={loss.item()}")


# ---------------------------------------------------------------------------
# localizer

@dataclass(frozen=True, eq=False)
class LocalizerSample:
    patient_id: str
    image: np.ndarray
    target: np.ndarray


def localizer_samples(pairs, input_size: int) -> list[LocalizerSample]:
    out = []
    for r, lm in pairs:
        if lm is None:
            raise DataError(f"{r.image_id}: no landmark annotation for localizer training")
        inp, scale = localizer_input(r.image, input_size)
        out.append(LocalizerSample(r.patient_id, inp, (lm.points + 0.5) / scale - 0.5))
    return out


def _localizer_epoch_val(model, samples, size) -> float:
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)[:, None])
        y = torch.from_numpy(np.stack([s.target for s in samples]).astype(np.float32))
        return float(F.l1_loss(model(x)[-1] / size, y / size))


def train_localizer(pairs, cfg: Config, out_dir, view="PA", folds: Optional[list[FoldSplit]] = None,
                    mixup_enabled: Optional[bool] = None) -> RunManifest:
    """Train one localizer per fold, keeping each fold's lowest-validation-loss checkpoint."""
    pairs = list(pairs)
    if not pairs:
        raise DataError("empty localizer training set")
    lcfg = cfg.localizer
    use_mixup = lcfg.mixup if mixup_enabled is None else mixup_enabled
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = localizer_samples(pairs, lcfg.input_size)
    folds = make_folds([r for r, _ in pairs], cfg.folds, cfg.seed) if folds is None else folds
    schedule = Schedule.from_block(lcfg)
    root = RngState(cfg.seed)
    mlog = MetricsLog(out_dir / "metrics.jsonl")
    checkpoints = []
    for fold in folds:
        train = [s for s in samples if s.patient_id in fold.train_ids]
        val = [s for s in samples if s.patient_id in fold.val_ids]
        rng = root.generator("localizer", view, fold.fold_index)
        model = _init_model(lambda: HourglassLocalizer.from_config(lcfg),
                            root.int_seed("localizer-init", view, fold.fold_index))
        opt = _optimizer(model.parameters(), schedule)
        best = math.inf
        ckpt = out_dir / f"fold{fold.fold_index}.pt"
        for epoch in range(schedule.epochs):
            lr = lr_at(schedule, epoch)
            for g in opt.param_groups:
                g["lr"] = lr
            model.train()
            order = rng.permutation(len(train))
            losses = []
            for start in range(0, len(order), schedule.batch):
                idx = order[start:start + schedule.batch]
                if len(idx) < 2 and len(order) > 1:
                    continue
                xs, ys = [], []
                for i in idx:
                    img, pts = apply_policy(train[i].image, train[i].target, cfg.localizer_augment, rng)
                    xs.append(img[None])
                    ys.append(pts)
                x, y = np.stack(xs), np.stack(ys)
                loss = batch_loss(model, x, y, lambda p, t: landmark_l1(p, t, lcfg.input_size),
                                  alpha=lcfg.mixup_alpha if use_mixup else None, rng=rng)
                _check_finite(loss, epoch)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(loss.item())
            val_loss = _localizer_epoch_val(model, val, lcfg.input_size) if val else float(np.mean(losses))
            if not math.isfinite(val_loss):
                raise TrainingDivergence(epoch, "validation loss")
            if val_loss < best:
                best = val_loss
                save_checkpoint(model, ckpt, {**localizer_meta(lcfg), "fold": fold.fold_index, "view": str(View(view).value),
                                              "epoch": epoch, "val_loss": val_loss})
            mlog.write(fold=fold.fold_index, epoch=epoch, lr=lr, train_loss=float(np.mean(losses)),
                       val_metric=val_loss, best_val=best)
            log.info("localizer %s fold %d epoch %d loss %.4f val %.4f", view, fold.fold_index, epoch,
                     np.mean(losses), val_loss)
        checkpoints.append((fold.fold_index, ckpt.name))
    manifest = RunManifest(run_id=f"localizer-{View(view).value}-{cfg.digest[:10]}", seed=cfg.seed,
                           config_digest=cfg.digest, fold_checkpoints=checkpoints, block="localizer",
                           view=View(view).value, n_folds=len(folds))
    manifest.save(out_dir)
    (out_dir / "config.txt").write_text(cfg.to_text())
    return manifest


# ---------------------------------------------------------------------------
# classifier

@dataclass(frozen=True, eq=False)
class RoiSample:
    patient_id: str
    image: np.ndarray  # ROI resized to the TTA side
    label: int
    roi: Optional[RoiImage] = None


def make_rois(pairs, cfg: Config, landmarks: Optional[dict] = None) -> list[RoiSample]:
    """Crop ROIs with the given landmarks (predicted ones by default) and resize for training."""
    side = tta_side(cfg.classifier.input_size, cfg.roi.tta_resize_ratio)
    out = []
    for r, lm in pairs:
        lm = landmarks.get(r.image_id, lm) if landmarks is not None else lm
        if lm is None:
            raise DataError(f"{r.image_id}: no landmarks to crop the ROI from")
        if r.label is None:
            raise DataError(f"{r.image_id}: classifier training needs a label")
        roi = roi_for_view(r, lm, cfg.roi)
        out.append(RoiSample(r.patient_id, resize_bilinear(roi.image, side, side), r.is_fracture, roi))
    return out


def _random_crop(img: np.ndarray, size: int, rng) -> np.ndarray:
    s = img.shape[0]
    y, x = rng.integers(0, s - size + 1, size=2)
    return img[y:y + size, x:x + size]


def _center_crop(img: np.ndarray, size: int) -> np.ndarray:
    c = (img.shape[0] - size) // 2
    return img[c:c + size, c:c + size]


def classifier_batch(samples, idx, cfg: Config, rng, augment: bool = True):
    size = cfg.classifier.input_size
    xs, ys = [], []
    for i in idx:
        s = samples[i]
        img = apply_policy(s.image, None, cfg.classifier_augment, rng)[0] if augment else s.image
        crop = _random_crop(img, size, rng) if augment else _center_crop(img, size)
        xs.append(np.repeat(crop[None], 3, axis=0))
        ys.append(np.eye(2)[s.label])
    return np.stack(xs).astype(np.float32), np.stack(ys)


def _balanced_accuracy(probs: np.ndarray, labels: np.ndarray, t: float = 0.5) -> float:
    pred = probs >= t
    pos, neg = labels == 1, labels == 0
    sens = pred[pos].mean() if pos.any() else 0.0
    spec = (~pred[neg]).mean() if neg.any() else 0.0
    return float((sens + spec) / 2)


@torch.no_grad()
def tta_logits(model, roi_images: Sequence[np.ndarray], input_size: int, ratio: float,
               batch: int = 200) -> np.ndarray:
    """(N, 10, 2) logits over the ten test-time variants of each ROI."""
    model.eval()
    out = []
    pending = []
    for img in roi_images:
        pending.append(tta_variants(img, input_size, ratio))
    arr = np.concatenate(pending) if pending else np.zeros((0, 3, input_size, input_size), np.float32)
    for start in range(0, len(arr), batch):
        out.append(model(torch.from_numpy(arr[start:start + batch])).double().numpy())
    logits = np.concatenate(out) if out else np.zeros((0, 2))
    return logits.reshape(-1, 10, 2)


def probs_from_logits(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True))[..., 1]


def _fit_classifier(model, train, val, cfg: Config, schedule: Schedule, rng, mlog: MetricsLog,
                    ckpt: Path, meta: dict, use_mixup: bool, fold_index: int, torch_seed: int = 0) -> dict:
    # dropout draws from torch's global generator; give each fit its own stream
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(torch_seed)
        return _fit_loop(model, train, val, cfg, schedule, rng, mlog, ckpt, meta, use_mixup, fold_index)


def _fit_loop(model, train, val, cfg, schedule, rng, mlog, ckpt, meta, use_mixup, fold_index) -> dict:
    ccfg = cfg.classifier
    opt = _optimizer(model.parameters(), schedule)
    best = -1.0
    digests = []
    for epoch in range(schedule.epochs):
        lr = lr_at(schedule, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        head_only = epoch < schedule.head_only_epochs
        model.train()
        for p in model.backbone_parameters():
            p.requires_grad_(not head_only)
        if head_only:
            # frozen backbone also keeps its batch-norm statistics
            model.backbone.eval()
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), schedule.batch):
            idx = order[start:start + schedule.batch]
            if len(idx) < 2 and len(order) > 1:
                continue
            x, y = classifier_batch(train, idx, cfg, rng)
            loss = batch_loss(model, x, y, soft_cross_entropy,
                              alpha=ccfg.mixup_alpha if use_mixup else None, rng=rng)
            _check_finite(loss, epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        for p in model.backbone_parameters():
            p.requires_grad_(True)
        digests.append({"epoch": epoch, "backbone": parameter_digest(model.backbone_parameters()),
                        "head": parameter_digest(model.head_parameters())})
        if val:
            model.eval()
            x, _ = classifier_batch(val, np.arange(len(val)), cfg, rng, augment=False)
            with torch.no_grad():
                probs = probs_from_logits(model(torch.from_numpy(x)).double().numpy())
            metric = _balanced_accuracy(probs, np.array([s.label for s in val]))
        else:
            metric = -float(np.mean(losses))
        if metric > best:
            best = metric
            save_checkpoint(model, ckpt, {**meta, "fold": fold_index, "epoch": epoch, "val_balanced_accuracy": metric})
        mlog.write(fold=fold_index, epoch=epoch, lr=lr, train_loss=float(np.mean(losses)), val_metric=metric,
                   best_val=best, head_only=head_only)
        log.info("classifier fold %d epoch %d loss %.4f val_ba %.4f", fold_index, epoch, np.mean(losses), metric)
    return {"best": best, "digests": digests}


def _load_weights(model, path):
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def train_classifier(rois: Sequence[RoiSample], cfg: Config, out_dir, view="PA",
                     folds: Optional[list[FoldSplit]] = None) -> RunManifest:
    """K-fold classifier training from pre-cropped ROIs.

    Each fold keeps its best validation balanced-accuracy checkpoint. The
    out-of-fold TTA probabilities are written to `oof.json` and the view's
    F1-optimal threshold is stored in the manifest.
    """
    rois = list(rois)
    if not rois:
        raise DataError("empty classifier training set")
    ccfg = cfg.classifier
    if ccfg.mode == "deep_ensemble":
        return train_deep_ensemble(rois, cfg, out_dir, view)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = make_folds(rois, cfg.folds, cfg.seed) if folds is None else folds
    schedule = Schedule.from_block(ccfg)
    root = RngState(cfg.seed)
    mlog = MetricsLog(out_dir / "metrics.jsonl")
    meta = {**classifier_meta(ccfg), "view": View(view).value}
    checkpoints, oof, history = [], [], {}
    for fold in folds:
        train = [s for s in rois if s.patient_id in fold.train_ids]
        val = [s for s in rois if s.patient_id in fold.val_ids]
        rng = root.generator("classifier", view, fold.fold_index)
        model = _init_model(lambda: SEResNetClassifier.from_config(ccfg),
                            root.int_seed("classifier-init", view, fold.fold_index))
        if ccfg.pretrained_weights:
            load_pretrained(model, ccfg.pretrained_weights)
        ckpt = out_dir / f"fold{fold.fold_index}.pt"
        history[fold.fold_index] = _fit_classifier(model, train, val, cfg, schedule, rng, mlog, ckpt, meta,
                                                   ccfg.mixup, fold.fold_index,
                                                   root.int_seed("classifier-dropout", view, fold.fold_index))
        checkpoints.append((fold.fold_index, ckpt.name))
        if val:
            _load_weights(model, ckpt)
            probs = probs_from_logits(
                tta_logits(model, [s.image for s in val], ccfg.input_size, stored_roi_ratio(cfg))).mean(axis=1)
            oof += [(s.patient_id, float(p), s.label) for s, p in zip(val, probs)]
    (out_dir / "oof.json").write_text(json.dumps(oof) + "\n")
    (out_dir / "digests.json").write_text(json.dumps(history) + "\n")
    labels = {y for _, _, y in oof}
    threshold = select_threshold([(p, y) for _, p, y in oof]) if len(labels) == 2 else 0.5
    manifest = RunManifest(run_id=f"classifier-{View(view).value}-{cfg.digest[:10]}", seed=cfg.seed,
                           config_digest=cfg.digest, fold_checkpoints=checkpoints,
                           thresholds={View(view).value: threshold},
                           temperature={f"fold{i}": 1.0 for i, _ in checkpoints},
                           block="classifier", view=View(view).value, mode="cv", n_folds=len(folds))
    manifest.save(out_dir)
    (out_dir / "config.txt").write_text(cfg.to_text())
    return manifest


def stored_roi_ratio(cfg: Config) -> float:
    # the stored ROI is already at the TTA side, so variants crop it directly
    return tta_side(cfg.classifier.input_size, cfg.roi.tta_resize_ratio) / cfg.classifier.input_size


def train_deep_ensemble(rois: Sequence[RoiSample], cfg: Config, out_dir, view="PA",
                        n_members: Optional[int] = None) -> RunManifest:
    """Independently initialised members on one grouped train/val split, no mixup, no pretraining.

    Each member's temperature is fitted on the validation split.
    """
    from .uncertainty import calibrate_temperature

    ccfg = cfg.classifier
    n_members = ccfg.members if n_members is None else n_members
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = holdout_split(rois, ccfg.val_fraction, cfg.seed)
    train = [s for s in rois if s.patient_id in split.train_ids]
    val = [s for s in rois if s.patient_id in split.val_ids]
    schedule = Schedule.from_block(ccfg)
    schedule = Schedule(**{**schedule.__dict__, "head_only_epochs": 0})
    root = RngState(cfg.seed)
    mlog = MetricsLog(out_dir / "metrics.jsonl")
    meta = {**classifier_meta(ccfg), "view": View(view).value}
    checkpoints, temps, val_logits = [], {}, {}
    labels = np.array([s.label for s in val])
    for m in range(n_members):
        rng = root.generator("member", view, m)
        model = _init_model(lambda: SEResNetClassifier.from_config(ccfg), root.int_seed("member-init", view, m))
        ckpt = out_dir / f"member{m}.pt"
        _fit_classifier(model, train, val, cfg, schedule, rng, mlog, ckpt, meta, False, m,
                        root.int_seed("member-dropout", view, m))
        _load_weights(model, ckpt)
        z = tta_logits(model, [s.image for s in val], ccfg.input_size, stored_roi_ratio(cfg)).mean(axis=1)
        val_logits[m] = z.tolist()
        temps[f"member{m}"] = calibrate_temperature(z, labels, cfg.uncertainty.t_min, cfg.uncertainty.t_max) \
            if len(set(labels.tolist())) == 2 else 1.0
        checkpoints.append((m, ckpt.name))
    (out_dir / "val_logits.json").write_text(json.dumps({"labels": labels.tolist(), "logits": val_logits}) + "\n")
    manifest = RunManifest(run_id=f"ensemble-{View(view).value}-{cfg.digest[:10]}", seed=cfg.seed,
                           config_digest=cfg.digest, fold_checkpoints=checkpoints,
                           thresholds={View(view).value: 0.5}, temperature=temps, block="classifier",
                           view=View(view).value, mode="deep_ensemble", n_folds=n_members)
    manifest.save(out_dir)
    (out_dir / "config.txt").write_text(cfg.to_text())
    return manifest
