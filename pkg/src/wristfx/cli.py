"""`wristfx` command line: generate | train | infer | evaluate | calibrate | audit.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical failure.
stdout carries exactly one JSON status line; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .core import (ConfigError, DataError, LandmarkSet, NumericalError, PredictionRecord, RunManifest, View,
                   load_config, seed_all)
from .imaging import ingest, load_annotated, read_landmarks, read_manifest
from .metrics import METRICS, landmark_recall, metric_report, write_report_csv, write_report_json
from .models import load_checkpoint, predict_landmarks
from .synthetic import write_benchmark
from .training import make_rois, stored_roi_ratio, train_classifier, train_localizer, tta_logits
from .uncertainty import (RUN_DIRS, Pipeline, calibrate_temperature, case_member_probabilities, ood_report,
                          predict_case, write_ood_report)

log = logging.getLogger("wristfx")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args, **extra):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    overrides.update(extra)
    return load_config(getattr(args, "config", None), environ=os.environ, **overrides)


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise DataError(f"output directory {p} is not writable: {e}") from e
    return p


def _pairs_by_patient(radiographs):
    out = defaultdict(dict)
    for r in radiographs:
        out[r.patient_id][r.view.value] = r
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> list[Path]:
    cfg = load_config(args.spec, environ=os.environ)
    out = _out_dir(args.out)
    paths = write_benchmark(cfg.synthetic, out)
    return list(paths.values())


def cmd_train(args) -> list[Path]:
    cfg = _config(args)
    seed_all(cfg.seed)
    out = _out_dir(args.out)
    pairs = load_annotated(args.data, args.view, True, cfg.roi.low_pct, cfg.roi.high_pct)
    if not pairs:
        raise DataError(f"{args.data}: no {args.view} images")
    if args.block == "localizer":
        missing = [r.image_id for r, lm in pairs if lm is None]
        if missing:
            raise DataError(f"{len(missing)} images lack landmark annotations, e.g. {missing[0]}")
        man = train_localizer(pairs, cfg, out, view=args.view)
    else:
        landmarks = None
        if args.localizer:
            lman = RunManifest.load(args.localizer)
            locs = [load_checkpoint(p)[0] for p in lman.checkpoint_paths(args.localizer)]
            landmarks = {r.image_id: predict_landmarks(locs, r.image, args.view) for r, _ in pairs}
        man = train_classifier(make_rois(pairs, cfg, landmarks), cfg, out, view=args.view)
    return [out / "run_manifest.json", out / "metrics.jsonl"] + man.checkpoint_paths(out)


def _write_overlay(out_dir: Path, pid: str, view: str, vm, vp, cfg) -> Path:
    from .experiment import overlay_rgb, roi_gradcam

    full, _ = roi_gradcam(vm.classifiers, vp.roi.image, cfg.classifier.input_size, cfg.roi.tta_resize_ratio)
    path = out_dir / f"{pid}_{view}_gradcam.png"
    Image.fromarray(overlay_rgb(vp.roi.image, full, 0.4)).save(path)
    return path


def cmd_infer(args) -> list[Path]:
    pipeline = Pipeline.load(args.runs, member_count=args.members)
    cfg = pipeline.cfg
    images = ingest(args.pa_manifest, True, cfg.roi.low_pct, cfg.roi.high_pct)
    if args.lat_manifest:
        images += ingest(args.lat_manifest, True, cfg.roi.low_pct, cfg.roi.high_pct)
    out_path = Path(args.out)
    _out_dir(out_path.parent)
    cam_dir = _out_dir(args.gradcam) if args.gradcam else None
    artifacts = [out_path]
    records = []
    for pid, views in sorted(_pairs_by_patient(images).items()):
        rec, vps = predict_case(views.get("PA"), views.get("LAT"), pipeline, return_views=True)
        d = rec.to_json()
        d["image_ids"] = {v: r.image_id for v, r in views.items()}
        records.append(d)
        if cam_dir is not None:
            for view, vp in vps.items():
                artifacts.append(_write_overlay(cam_dir, pid, view.value, pipeline.views[view], vp, cfg))
    out_path.write_text(json.dumps(records, indent=1, sort_keys=True) + "\n")
    return artifacts


def _table(paths: Sequence[str], field: str) -> dict:
    """patient_id -> value from manifests (JSON lines) or plain {patient_id: value} JSON objects."""
    out = {}
    for p in paths:
        try:
            obj = json.loads(Path(p).read_text())
        except json.JSONDecodeError:
            obj = None
        except OSError as e:
            raise DataError(f"cannot read {p}: {e}") from e
        if isinstance(obj, dict) and "patient_id" not in obj:
            out.update({str(k): v for k, v in obj.items()})
            continue
        for rec in read_manifest(p):
            pid, v = str(rec["patient_id"]), rec.get(field)
            if pid in out and out[pid] != v:
                raise DataError(f"patient {pid}: conflicting {field} values {out[pid]!r} and {v!r}")
            out[pid] = v
    return out


def _landmark_section(records, label_paths, landmark_paths, thresholds_mm) -> dict:
    gt = {}
    for p in landmark_paths:
        gt.update(read_landmarks(p))
    spacing = {}
    for p in label_paths:
        for rec in read_manifest(p):
            if "image_id" in rec and rec.get("pixel_spacing_mm"):
                spacing[rec["image_id"]] = float(rec["pixel_spacing_mm"])
    out = {}
    for view in ("PA", "LAT"):
        pred, truth, sp = [], [], []
        for rec in records:
            pts = (rec.get("landmarks") or {}).get(view)
            iid = (rec.get("image_ids") or {}).get(view)
            if pts is None or iid is None or iid not in gt:
                continue
            if iid not in spacing:
                raise DataError(f"{iid}: no pixel spacing available for landmark evaluation")
            pred.append(LandmarkSet(points=np.asarray(pts), view=view, source="prediction"))
            truth.append(gt[iid])
            sp.append(spacing[iid])
        if pred:
            rec_t = landmark_recall(pred, truth, sp, thresholds_mm)
            out[view] = {"n_images": len(pred), "recall": {f"{t:g}mm": v for t, v in rec_t.items()}}
    return out


def cmd_evaluate(args) -> list[Path]:
    cfg = _config(args)
    try:
        records = json.loads(Path(args.predictions).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read predictions {args.predictions}: {e}") from e
    labels = _table(args.labels, "label")
    strata = _table(args.strata, "stratum") if args.strata else {}
    ids = [str(r["patient_id"]) for r in records]
    missing = [i for i in ids if labels.get(i) is None]
    if missing:
        raise DataError(f"{len(missing)} predictions have no label, e.g. {missing[0]}")
    y = np.array([1 if labels[i] in ("fracture", 1, True) else 0 for i in ids])
    p = np.array([r["ensemble_probability"] for r in records])
    thr = float(records[0]["threshold"]) if records else 0.5
    n_boot = args.n_bootstrap or cfg.evaluation.n_bootstrap
    reports = {"pooled": metric_report(p, y, thr, n_boot, cfg.seed)}
    for st in sorted({strata.get(i) for i in ids} - {None}):
        m = np.array([strata.get(i) == st for i in ids])
        reports[f"stratum:{st}"] = metric_report(p[m], y[m], thr, n_boot, cfg.seed)
    deltas = {}
    for name, rep in reports.items():
        if name == "pooled":
            continue
        deltas[name] = {k: (None if rep.value(k) is None or reports["pooled"].value(k) is None
                            else rep.value(k) - reports["pooled"].value(k)) for k in METRICS}
    extra = {"delta_vs_pooled": deltas}
    if args.landmarks:
        extra["landmarks"] = _landmark_section(records, args.labels, args.landmarks,
                                               cfg.evaluation.landmark_thresholds_mm)
    out = Path(args.out)
    _out_dir(out.parent)
    write_report_json(reports, out, extra)
    csv_path = write_report_csv({(name, "ensemble"): r for name, r in reports.items()}, out.with_suffix(".csv"))
    return [out, csv_path]


def cmd_calibrate(args) -> list[Path]:
    """Fit per-member temperatures on a labelled manifest and write recalibrated run copies."""
    pipeline = Pipeline.load(args.runs, views=args.views)
    cfg = pipeline.cfg
    out = _out_dir(args.out)
    artifacts = []
    for view in args.views:
        src = Path(args.runs) / RUN_DIRS["classifier"].format(view=view)
        dst = out / RUN_DIRS["classifier"].format(view=view)
        if dst.resolve() != src.resolve():
            shutil.copytree(src, dst, dirs_exist_ok=True)
        vm = pipeline.views[View(view)]
        pairs = load_annotated(args.data, view, True, cfg.roi.low_pct, cfg.roi.high_pct)
        lms = {r.image_id: predict_landmarks(vm.localizers, r.image, view) for r, _ in pairs} \
            if vm.localizers else None
        rois = make_rois(pairs, cfg, lms)
        labels = np.array([s.label for s in rois])
        man = RunManifest.load(dst)
        temps = dict(man.temperature)
        for (i, name), model in zip(man.fold_checkpoints, vm.classifiers):
            z = tta_logits(model, [s.image for s in rois], cfg.classifier.input_size, stored_roi_ratio(cfg)).mean(axis=1)
            temps[Path(name).stem] = calibrate_temperature(z, labels, cfg.uncertainty.t_min, cfg.uncertainty.t_max)
        RunManifest(**{**man.__dict__, "temperature": temps}).save(dst)
        artifacts.append(dst / "run_manifest.json")
        ldir = Path(args.runs) / RUN_DIRS["localizer"].format(view=view)
        if ldir.is_dir() and (out / ldir.name).resolve() != ldir.resolve():
            shutil.copytree(ldir, out / ldir.name, dirs_exist_ok=True)
    return artifacts


def _member_matrix(path, counts) -> np.ndarray:
    try:
        records = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read predictions {path}: {e}") from e
    rows = []
    for r in records:
        r = {k: v for k, v in r.items() if k in PredictionRecord.__dataclass_fields__}
        rows.append(case_member_probabilities(PredictionRecord.from_json(r)))
    if not rows:
        raise DataError(f"{path}: no predictions")
    n = min(len(r) for r in rows)
    if max(counts) > n:
        raise UsageError(f"{path}: {n} ensemble members available, {max(counts)} requested")
    return np.array([r[:n] for r in rows])


def cmd_audit(args) -> list[Path]:
    cfg = _config(args)
    try:
        counts = sorted({int(c) for c in str(args.members).split(",")})
    except ValueError:
        raise UsageError(f"--members must be a comma-separated list of integers, got {args.members!r}") from None
    m_in, m_out = _member_matrix(args.in_dist, counts), _member_matrix(args.ood, counts)
    out = _out_dir(args.out)
    report = ood_report(m_in, m_out, counts, args.n_bootstrap or cfg.evaluation.n_bootstrap, cfg.seed,
                        cfg.uncertainty.entropy_mode)
    return list(write_ood_report(report, out))


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wristfx", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="write the synthetic phantom benchmark")
    g.add_argument("--spec", help="config file (synthetic.* keys)")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a localizer or classifier for one view")
    t.add_argument("--block", choices=("localizer", "classifier"), required=True)
    t.add_argument("--view", choices=("PA", "LAT"), required=True)
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="training manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--localizer", help="localizer run dir used to crop classifier ROIs")
    t.add_argument("--seed", type=int)

    i = sub.add_parser("infer", help="predict cases")
    i.add_argument("--pa-manifest", required=True)
    i.add_argument("--lat-manifest")
    i.add_argument("--runs", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--gradcam")
    i.add_argument("--members", type=int, help="truncate deep ensembles to this many members")

    e = sub.add_parser("evaluate", help="metrics with bootstrap CIs, pooled and per stratum")
    e.add_argument("--predictions", required=True)
    e.add_argument("--labels", required=True, nargs="+")
    e.add_argument("--strata", nargs="+")
    e.add_argument("--landmarks", nargs="+", help="ground-truth landmark files")
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--n-bootstrap", type=int)

    c = sub.add_parser("calibrate", help="refit member temperatures on labelled data")
    c.add_argument("--runs", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--views", nargs="+", default=["PA", "LAT"], choices=("PA", "LAT"))
    c.add_argument("--out", required=True)

    a = sub.add_parser("audit", help="deep-ensemble OOD audit")
    a.add_argument("--in-dist", required=True)
    a.add_argument("--ood", required=True)
    a.add_argument("--members", default="3,5,7,9")
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--n-bootstrap", type=int)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer, "evaluate": cmd_evaluate,
            "calibrate": cmd_calibrate, "audit": cmd_audit}


def main(argv: Optional[Sequence[str]] = None) -> int:
    status = {"command": None, "exit_code": EXIT_OK, "artifacts": []}
    try:
        args = build_parser().parse_args(argv)
        status["command"] = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError("a subcommand is required: " + " | ".join(COMMANDS))
        status["artifacts"] = [str(p) for p in COMMANDS[args.command](args)]
    except (UsageError, ConfigError) as e:
        status.update(exit_code=EXIT_USAGE, error=str(e))
    except (DataError, OSError) as e:
        status.update(exit_code=EXIT_DATA, error=str(e))
    except NumericalError as e:
        status.update(exit_code=EXIT_NUMERICAL, error=str(e))
        if getattr(e, "epoch", None) is not None:
            status["epoch"] = e.epoch
    if status["exit_code"]:
        print(f"error: {status['error']}", file=sys.stderr)
        status["artifacts"] = []
    print(json.dumps(status, sort_keys=True))
    return status["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
