"""Ingestion, contrast normalisation, physical resampling and ROI cropping."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .core import DataError, LandmarkSet, Radiograph, View


@dataclass(frozen=True, eq=False)
class RoiImage:
    image: np.ndarray
    source_image_id: str
    view: View
    crop_center_px: tuple
    side_mm: float
    top_padding_mm: float
    pixel_spacing_mm: float

    @property
    def side_px(self) -> int:
        return self.image.shape[0]

    def geometry(self) -> dict:
        return {
            "source_image_id": self.source_image_id,
            "view": View(self.view).value,
            "crop_center_px": list(self.crop_center_px),
            "side_mm": self.side_mm,
            "top_padding_mm": self.top_padding_mm,
            "pixel_spacing_mm": self.pixel_spacing_mm,
            "side_px": self.side_px,
        }


def percentile(values: np.ndarray, pct: float) -> float:
    # nearest order statistic; keeps normalize_contrast idempotent
    return float(np.percentile(values, pct, method="nearest"))


def normalize_contrast(image, low_pct: float = 5.0, high_pct: float = 99.0) -> np.ndarray:
    """Clip to the [low_pct, high_pct] percentile range and rescale to [0, 1].

    A constant image (zero dynamic range) maps to all zeros.
    """
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise DataError("normalize_contrast: image contains non-finite values")
    if not 0 <= low_pct < high_pct <= 100:
        raise ValueError(f"need 0 <= low_pct < high_pct <= 100, got {low_pct}, {high_pct}")
    lo, hi = percentile(img, low_pct), percentile(img, high_pct)
    if hi <= lo:
        return np.zeros_like(img)
    return (np.clip(img, lo, hi) - lo) / (hi - lo)


def bilinear_sample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at fractional (row, col) positions; edges are clamped."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    r = np.clip(np.asarray(rows, dtype=np.float64), 0, h - 1)
    c = np.clip(np.asarray(cols, dtype=np.float64), 0, w - 1)
    r0 = np.minimum(np.floor(r).astype(int), h - 2) if h > 1 else np.zeros_like(r, dtype=int)
    c0 = np.minimum(np.floor(c).astype(int), w - 2) if w > 1 else np.zeros_like(c, dtype=int)
    fr, fc = r - r0, c - c0
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bottom = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return top * (1 - fr) + bottom * fr


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with pixel-centre alignment: output pixel i samples input at (i + 0.5) * scale - 0.5."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    rows = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    cols = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    # separable: interpolate along columns, then rows
    c = np.clip(cols, 0, w - 1)
    c0 = np.minimum(np.floor(c).astype(int), max(w - 2, 0))
    fc = c - c0
    c1 = np.minimum(c0 + 1, w - 1)
    tmp = img[:, c0] * (1 - fc) + img[:, c1] * fc
    r = np.clip(rows, 0, h - 1)
    r0 = np.minimum(np.floor(r).astype(int), max(h - 2, 0))
    fr = (r - r0)[:, None]
    r1 = np.minimum(r0 + 1, h - 1)
    return tmp[r0] * (1 - fr) + tmp[r1] * fr


def resampled_shape(shape, spacing_mm: float, target_spacing_mm: float) -> tuple[int, int]:
    f = spacing_mm / target_spacing_mm
    return int(round(shape[0] * f)), int(round(shape[1] * f))


def resample_to_spacing(r: Radiograph, target_spacing_mm: float) -> Radiograph:
    if not target_spacing_mm > 0:
        raise ValueError(f"target spacing must be > 0, got {target_spacing_mm}")
    out_h, out_w = resampled_shape(r.image.shape, r.pixel_spacing_mm, target_spacing_mm)
    if out_h < 2 or out_w < 2:
        raise DataError(f"{r.image_id}: resampling to {target_spacing_mm} mm gives a {out_h}x{out_w} image")
    if (out_h, out_w) == r.image.shape and r.pixel_spacing_mm == target_spacing_mm:
        return r
    return r.with_image(resize_bilinear(r.image, out_h, out_w), pixel_spacing_mm=target_spacing_mm)


def resample_landmarks(lm: LandmarkSet, src_shape, dst_shape) -> LandmarkSet:
    sy = dst_shape[0] / src_shape[0]
    sx = dst_shape[1] / src_shape[1]
    pts = lm.points.copy()
    pts[:, 0] = (pts[:, 0] + 0.5) * sx - 0.5
    pts[:, 1] = (pts[:, 1] + 0.5) * sy - 0.5
    return dataclasses.replace(lm, points=pts)


def roi_center(lm: LandmarkSet, top_padding_mm: float, spacing_mm: float) -> tuple[float, float]:
    """Landmark centre of mass moved `top_padding_mm` towards row 0."""
    cx, cy = lm.points.mean(axis=0)
    return float(cx), float(cy - top_padding_mm / spacing_mm)


def crop_square(image: np.ndarray, cx: float, cy: float, side: int) -> np.ndarray:
    """Square `side` x `side` crop centred on (cx, cy); outside pixels are 0."""
    h, w = image.shape
    x0 = int(np.floor(cx - side / 2 + 0.5))
    y0 = int(np.floor(cy - side / 2 + 0.5))
    out = np.zeros((side, side), dtype=np.float64)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + side, w), min(y0 + side, h)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = image[sy0:sy1, sx0:sx1]
    return out


def crop_origin(cx: float, cy: float, side: int) -> tuple[int, int]:
    return int(np.floor(cx - side / 2 + 0.5)), int(np.floor(cy - side / 2 + 0.5))


def crop_roi(r: Radiograph, lm: LandmarkSet, side_mm: float, top_padding_mm: float) -> RoiImage:
    spacing = r.pixel_spacing_mm
    side = int(round(side_mm / spacing))
    h, w = r.image.shape
    if side < 2:
        raise DataError(f"{r.image_id}: ROI of {side_mm} mm is under 2 px at {spacing} mm")
    if side > h and side > w:
        raise DataError(f"{r.image_id}: ROI side {side}px exceeds both image dimensions {h}x{w}")
    cx, cy = roi_center(lm, top_padding_mm, spacing)
    return RoiImage(
        image=crop_square(r.image, cx, cy, side),
        source_image_id=r.image_id,
        view=r.view,
        crop_center_px=(cx, cy),
        side_mm=float(side_mm),
        top_padding_mm=float(top_padding_mm),
        pixel_spacing_mm=spacing,
    )


def roi_for_view(r: Radiograph, lm: LandmarkSet, roi_cfg) -> RoiImage:
    """Full classifier preprocessing: resample to the view's spacing, then crop.

    `r` is expected to be contrast-normalised already.
    """
    target = roi_cfg.spacing_mm(r.view)
    rs = resample_to_spacing(r, target)
    lm_rs = resample_landmarks(lm, r.image.shape, rs.image.shape)
    return crop_roi(rs, lm_rs, roi_cfg.side_mm(r.view), roi_cfg.top_padding_mm(r.view))


# ---------------------------------------------------------------------------
# file formats

def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix.lower() == ".npy":
            return np.load(path, allow_pickle=False).astype(np.float64)
        with Image.open(path) as im:
            return np.array(im).astype(np.float64)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def write_png16(image: np.ndarray, path) -> Path:
    """Store a [0, 1] float image as 16-bit grayscale PNG."""
    a = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(a * 65535).astype(np.uint16)).save(path)
    return Path(path)


def write_png8(image: np.ndarray, path) -> Path:
    a = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path)
    return Path(path)


def export_roi(roi: RoiImage, path) -> tuple[Path, Path]:
    """PNG of the ROI plus a `.json` sidecar with the crop geometry."""
    path = Path(path)
    write_png16(roi.image, path)
    side = path.with_suffix(".json")
    side.write_text(json.dumps(roi.geometry(), indent=2) + "\n")
    return path, side


MANIFEST_FIELDS = ("patient_id", "image_id", "view", "pixel_spacing_mm", "path",
                   "label", "age", "sex", "stratum", "orientation")


def read_manifest(path) -> list[dict]:
    """Records from a JSON-lines manifest (a JSON array is accepted too)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    stripped = text.lstrip()
    try:
        if stripped.startswith("["):
            return list(json.loads(stripped))
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON lines: {e}") from e


def write_manifest(records: Iterable[dict], path) -> Path:
    path = Path(path)
    with path.open("w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def _image_scale(img: np.ndarray, path: Path) -> np.ndarray:
    if path.suffix.lower() == ".png":
        return img / 65535.0 if img.max(initial=0) > 255 else img / 255.0
    return img


def ingest(manifest_path, normalize: bool = False, low_pct: float = 5.0,
           high_pct: float = 99.0) -> list[Radiograph]:
    """Load and validate every image listed in a manifest.

    Pixel spacing comes from the record or, failing that, from a
    `<image>.json` sidecar. Records with `orientation: "down"` are flipped
    vertically so that the distal end is always towards row 0.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    seen: set = set()
    out = []
    for rec in read_manifest(manifest_path):
        image_id = str(rec.get("image_id", ""))
        if not image_id:
            raise DataError(f"{manifest_path}: record without image_id: {rec}")
        img_path = root / rec["path"]
        meta = dict(rec)
        sidecar = img_path.with_suffix(".json")
        if meta.get("pixel_spacing_mm") is None and sidecar.is_file():
            meta = {**json.loads(sidecar.read_text()), **{k: v for k, v in rec.items() if v is not None}}
        spacing = meta.get("pixel_spacing_mm")
        pair = list(spacing) if isinstance(spacing, (list, tuple)) else [spacing, spacing]
        try:
            sr, sc = (float(v) for v in pair)
        except (TypeError, ValueError):
            sr = sc = float("nan")
        if len(pair) != 2 or not (sr > 0 and sc > 0):
            raise DataError(f"{image_id}: missing or invalid pixel_spacing_mm ({spacing})")
        if not img_path.is_file():
            raise DataError(f"{image_id}: image file not found: {img_path}")
        img = _image_scale(read_image(img_path), img_path)
        if sr != sc:
            # anisotropic (row, col) spacing: resample onto the finer isotropic grid
            fine = min(sr, sc)
            img = resize_bilinear(img, max(2, int(round(img.shape[0] * sr / fine))),
                                  max(2, int(round(img.shape[1] * sc / fine))))
        spacing = min(sr, sc)
        if meta.get("orientation", "up") == "down":
            img = img[::-1].copy()
        if normalize:
            img = normalize_contrast(img, low_pct, high_pct)
        r = Radiograph(
            image=img,
            pixel_spacing_mm=float(spacing),
            view=meta.get("view"),
            patient_id=str(meta["patient_id"]),
            image_id=image_id,
            label=meta.get("label"),
            age=meta.get("age"),
            sex=meta.get("sex"),
            stratum=meta.get("stratum"),
        )
        if r.key in seen:
            raise DataError(f"duplicate (patient_id, image_id, view) {r.key} in {manifest_path}")
        seen.add(r.key)
        out.append(r)
    return out


def read_landmarks(path) -> dict[str, LandmarkSet]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read landmarks {path}: {e}") from e
    return {k: LandmarkSet.from_json(v) for k, v in payload.items()}


def write_landmarks(landmarks: dict, path) -> Path:
    payload = {k: v.to_json() for k, v in sorted(landmarks.items())}
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")
    return Path(path)


def landmarks_path_for(manifest_path) -> Path:
    """Conventional location of the annotation file that accompanies a manifest."""
    p = Path(manifest_path)
    return p.with_name(p.stem + ".landmarks.json")


def load_annotated(manifest_path, view: Optional[str] = None, normalize: bool = True,
                   low_pct: float = 5.0, high_pct: float = 99.0):
    """(Radiograph, LandmarkSet | None) pairs, optionally restricted to one view."""
    images = ingest(manifest_path, normalize=normalize, low_pct=low_pct, high_pct=high_pct)
    lm_path = landmarks_path_for(manifest_path)
    landmarks = read_landmarks(lm_path) if lm_path.is_file() else {}
    pairs = []
    for r in images:
        if view is not None and r.view is not View(view):
            continue
        lm = landmarks.get(r.image_id)
        if lm is not None:
            lm.check_inside(r.image.shape)
        pairs.append((r, lm))
    return pairs
