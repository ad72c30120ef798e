"""Training augmentation, mixup and the deterministic test-time variants."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import AugmentPolicy
from .imaging import RoiImage, resize_bilinear

GEOMETRIC = {"flip", "rotation", "shear", "downscale", "pad", "jitter"}

__all__ = ["AugmentPolicy", "MixupBatch", "apply_policy", "mixup", "tta_variants", "tta_side", "warp_affine"]


def _about_center(m: np.ndarray, h: int, w: int) -> np.ndarray:
    """Conjugate a 2x2 (x, y) linear map so it acts about the image centre."""
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    a = np.eye(3)
    a[:2, :2] = m
    a[:2, 2] = c - m @ c
    return a


def _translation(dx: float, dy: float) -> np.ndarray:
    a = np.eye(3)
    a[:2, 2] = (dx, dy)
    return a


def warp_affine(image: np.ndarray, forward: np.ndarray, order: int = 1) -> np.ndarray:
    """Warp with a 3x3 forward map in (x, y) pixel coordinates; exposed area is 0."""
    inv = np.linalg.inv(forward)
    # scipy works in (row, col); swap axes of the inverse map
    p = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
    m = p @ inv @ p
    return ndimage.affine_transform(image, m[:2, :2], offset=m[:2, 2], order=order,
                                    mode="constant", cval=0.0, prefilter=False)


def _geometric_step(op: str, policy: AugmentPolicy, h: int, w: int, rng) -> Optional[np.ndarray]:
    if op == "flip":
        return np.array([[-1.0, 0, w - 1], [0, 1, 0], [0, 0, 1]])
    if op == "rotation":
        t = np.deg2rad(rng.uniform(*policy.rotation_deg))
        return _about_center(np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]), h, w)
    if op == "shear":
        s = np.tan(np.deg2rad(rng.uniform(*policy.shear_deg)))
        return _about_center(np.array([[1.0, s], [0.0, 1.0]]), h, w)
    if op == "downscale":
        f = rng.uniform(*policy.downscale_factor)
        return _about_center(np.eye(2) * f, h, w)
    if op == "pad":
        # zero-pad every side by p pixels, then fit back into the original frame
        p = rng.uniform(*policy.pad_px)
        return _about_center(np.diag([w / (w + 2 * p), h / (h + 2 * p)]), h, w)
    if op == "jitter":
        dx, dy = rng.uniform(*policy.jitter_px, size=2)
        return _translation(dx, dy)
    raise ValueError(op)


def _photometric(op: str, img: np.ndarray, policy: AugmentPolicy, rng) -> np.ndarray:
    h, w = img.shape
    if op == "cutout":
        s = int(round(rng.uniform(*policy.cutout_px)))
        y, x = int(rng.integers(0, max(h - s, 0) + 1)), int(rng.integers(0, max(w - s, 0) + 1))
        img = img.copy()
        img[y:y + s, x:x + s] = 0.0
        return img
    if op == "side_pad":
        s = int(round(rng.uniform(*policy.side_pad_px)))
        side = int(rng.integers(4))
        value = rng.uniform(*policy.side_pad_intensity)
        img = img.copy()
        if s > 0:
            if side == 0:
                img[:s] = value
            elif side == 1:
                img[-s:] = value
            elif side == 2:
                img[:, :s] = value
            else:
                img[:, -s:] = value
        return img
    if op == "salt_pepper":
        density = rng.uniform(*policy.salt_pepper_density)
        hit = rng.random(img.shape) < density
        salt = rng.random(img.shape) < 0.5
        img = img.copy()
        img[hit & salt] = 1.0
        img[hit & ~salt] = 0.0
        return img
    if op == "blur":
        sigma = rng.uniform(*policy.blur_sigma)
        return ndimage.gaussian_filter(img, sigma) if sigma > 0 else img
    if op == "noise":
        sigma = rng.uniform(*policy.noise_sigma)
        return img + rng.normal(0.0, sigma, size=img.shape)
    if op == "gamma":
        g = rng.uniform(*policy.gamma)
        return np.power(np.clip(img, 0.0, 1.0), g)
    raise ValueError(op)


def apply_policy(image: np.ndarray, targets: Optional[np.ndarray], policy: AugmentPolicy,
                 rng: np.random.Generator):
    """Randomly augment an image in [0, 1] and move (x, y) targets with it.

    Consecutive geometric ops are folded into one affine warp, so the image
    is resampled at most once per geometric run.
    """
    img = np.asarray(image, dtype=np.float64)
    pts = None if targets is None else np.asarray(targets, dtype=np.float64).reshape(-1, 2).copy()
    h, w = img.shape
    pending = np.eye(3)
    warped = False

    def flush():
        nonlocal img, pts, pending, warped
        if warped:
            if np.allclose(pending, [[-1, 0, w - 1], [0, 1, 0], [0, 0, 1]]):
                img = img[:, ::-1].copy()
            else:
                img = warp_affine(img, pending)
            if pts is not None:
                pts = pts @ pending[:2, :2].T + pending[:2, 2]
        pending, warped = np.eye(3), False

    for op in policy.order:
        if rng.random() >= getattr(policy, f"{op}_p"):
            continue
        if op in GEOMETRIC:
            pending = _geometric_step(op, policy, h, w, rng) @ pending
            warped = True
        else:
            flush()
            img = _photometric(op, img, policy, rng)
    flush()
    img = np.clip(img, 0.0, 1.0)
    return img, pts


@dataclass(frozen=True, eq=False)
class MixupBatch:
    x_mix: np.ndarray
    y_mix: np.ndarray
    lambdas: np.ndarray


def mixup(x1, y1, x2, y2, alpha: float, rng: Optional[np.random.Generator] = None,
          lam=None) -> MixupBatch:
    """Per-item convex combinations with weights drawn from Beta(alpha, alpha).

    `lam` forces the mixing weights (scalar or one per item), which is how
    endpoint behaviour is tested.
    """
    x1, x2 = np.asarray(x1), np.asarray(x2)
    y1, y2 = np.asarray(y1, dtype=np.float64), np.asarray(y2, dtype=np.float64)
    if x1.shape != x2.shape or y1.shape != y2.shape or len(x1) != len(y1):
        raise ValueError(f"mixup shape mismatch: {x1.shape}/{x2.shape}, {y1.shape}/{y2.shape}")
    n = len(x1)
    if lam is None:
        if not alpha > 0:
            raise ValueError("alpha must be > 0")
        lam = rng.beta(alpha, alpha, size=n)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy()
    lx = lam.reshape((n,) + (1,) * (x1.ndim - 1)).astype(x1.dtype if x1.dtype.kind == "f" else np.float64)
    ly = lam.reshape((n,) + (1,) * (y1.ndim - 1))
    return MixupBatch(x_mix=lx * x1 + (1 - lx) * x2, y_mix=ly * y1 + (1 - ly) * y2, lambdas=lam)


def tta_side(input_size: int, ratio: float) -> int:
    """Side of the resized ROI; keeps (side - input) even so the centre crop is symmetric."""
    return input_size + 2 * int(round((ratio - 1.0) * input_size / 2.0))


def five_crop(image: np.ndarray, size: int) -> list[np.ndarray]:
    s = image.shape[0]
    c = (s - size) // 2
    e = s - size
    return [image[:size, :size], image[:size, e:], image[e:, :size], image[e:, e:],
            image[c:c + size, c:c + size]]


def tta_variants(roi, input_size: int, ratio: float = 1.1) -> np.ndarray:
    """Ten 3-channel inputs: five crops of the unflipped and of the flipped ROI."""
    img = roi.image if isinstance(roi, RoiImage) else np.asarray(roi, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"ROI must be square, got {img.shape}")
    side = tta_side(input_size, ratio)
    if side < input_size:
        raise ValueError(f"resized ROI ({side}px) is smaller than the model input ({input_size}px)")
    big = img if img.shape[0] == side else resize_bilinear(img, side, side)
    crops = five_crop(big, input_size) + five_crop(big[:, ::-1], input_size)
    out = np.stack(crops).astype(np.float32)
    return np.repeat(out[:, None], 3, axis=1)
