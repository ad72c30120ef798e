"""Hourglass landmark localizer, SE-ResNet fracture classifier and GradCAM."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ClassifierConfig, DataError, LandmarkSet, LocalizerConfig, View

N_LANDMARKS = 3


# ---------------------------------------------------------------------------
# soft-argmax

def soft_argmax(heatmap, temperature: float = 1.0) -> tuple[float, float]:
    """Expected (x, y) grid position under a spatial softmax of `heatmap`."""
    h = np.asarray(heatmap, dtype=np.float64) / temperature
    p = np.exp(h - h.max())
    p /= p.sum()
    rows, cols = np.indices(h.shape)
    return float((p * cols).sum()), float((p * rows).sum())


def soft_argmax_grad(heatmap, temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Analytic d(x)/d(heatmap) and d(y)/d(heatmap)."""
    h = np.asarray(heatmap, dtype=np.float64) / temperature
    p = np.exp(h - h.max())
    p /= p.sum()
    rows, cols = np.indices(h.shape)
    x, y = (p * cols).sum(), (p * rows).sum()
    return p * (cols - x) / temperature, p * (rows - y) / temperature


class SoftArgmax2d(nn.Module):
    """(B, K, H, W) maps -> (B, K, 2) expected (x, y) coordinates in grid units."""

    def __init__(self, temperature: float = 1.0):
        super().__init__()
        self.temperature = temperature

    def forward(self, heatmaps: torch.Tensor) -> torch.Tensor:
        b, k, h, w = heatmaps.shape
        p = F.softmax(heatmaps.reshape(b, k, h * w) / self.temperature, dim=-1).reshape(b, k, h, w)
        xs = torch.arange(w, dtype=p.dtype, device=p.device)
        ys = torch.arange(h, dtype=p.dtype, device=p.device)
        x = (p.sum(dim=2) * xs).sum(dim=-1)
        y = (p.sum(dim=3) * ys).sum(dim=-1)
        return torch.stack([x, y], dim=-1)


# ---------------------------------------------------------------------------
# localizer

class Residual(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout),
        )
        self.skip = nn.Identity() if cin == cout else nn.Sequential(
            nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        return F.relu(self.body(x) + self.skip(x))


class Hourglass(nn.Module):
    def __init__(self, depth: int, ch: int):
        super().__init__()
        self.up = Residual(ch, ch)
        self.down = Residual(ch, ch)
        self.inner = Hourglass(depth - 1, ch) if depth > 1 else Residual(ch, ch)
        self.out = Residual(ch, ch)

    def forward(self, x):
        skip = self.up(x)
        y = self.out(self.inner(self.down(F.max_pool2d(x, 2))))
        return skip + F.interpolate(y, size=skip.shape[-2:], mode="nearest")


class HourglassLocalizer(nn.Module):
    """Stacked hourglass with a soft-argmax head on every stack.

    `forward` returns a list (one entry per stack) of (B, 3, 2) coordinates
    in input-pixel units; the last entry is the prediction.
    """

    def __init__(self, input_size: int = 256, channels: int = 32, depth: int = 4, stacks: int = 1,
                 softmax_temperature: float = 1.0):
        super().__init__()
        self.input_size = input_size
        self.stride = 2 if input_size <= 128 else 4
        c = channels
        stem = [nn.Conv2d(1, c // 2, 3, padding=1, stride=1 if self.stride == 2 else 2, bias=False),
                nn.BatchNorm2d(c // 2), nn.ReLU(inplace=True), Residual(c // 2, c), nn.MaxPool2d(2)]
        self.stem = nn.Sequential(*stem)
        self.hourglasses = nn.ModuleList([Hourglass(depth, c) for _ in range(stacks)])
        self.features = nn.ModuleList([
            nn.Sequential(Residual(c, c), nn.Conv2d(c, c, 1, bias=False), nn.BatchNorm2d(c), nn.ReLU(inplace=True))
            for _ in range(stacks)])
        self.heads = nn.ModuleList([nn.Conv2d(c, N_LANDMARKS, 1) for _ in range(stacks)])
        self.remap_heat = nn.ModuleList([nn.Conv2d(N_LANDMARKS, c, 1) for _ in range(stacks - 1)])
        self.remap_feat = nn.ModuleList([nn.Conv2d(c, c, 1) for _ in range(stacks - 1)])
        self.soft_argmax = SoftArgmax2d(softmax_temperature)

    @classmethod
    def from_config(cls, cfg: LocalizerConfig) -> "HourglassLocalizer":
        return cls(cfg.input_size, cfg.channels, cfg.depth, cfg.stacks, cfg.softmax_temperature)

    def heatmaps(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[-2:] != (self.input_size, self.input_size) or x.shape[1] != 1:
            raise ValueError(f"localizer expects (B, 1, {self.input_size}, {self.input_size}), got {tuple(x.shape)}")
        h = self.stem(x)
        maps = []
        for i, hg in enumerate(self.hourglasses):
            f = self.features[i](hg(h))
            m = self.heads[i](f)
            maps.append(m)
            if i < len(self.remap_heat):
                h = h + self.remap_feat[i](f) + self.remap_heat[i](m)
        return maps

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [(self.soft_argmax(m) + 0.5) * self.stride - 0.5 for m in self.heatmaps(x)]


def localizer_input(image: np.ndarray, size: int) -> tuple[np.ndarray, float]:
    """Zero-pad to a square (bottom/right) and resize to `size`; returns (input, scale).

    A point (x, y) on the input maps back to ((x + 0.5) * scale - 0.5, ...).
    """
    from .imaging import resize_bilinear

    h, w = image.shape
    s = max(h, w)
    sq = np.zeros((s, s), dtype=np.float64)
    sq[:h, :w] = image
    return resize_bilinear(sq, size, size), s / size


def localizer_forward(model: HourglassLocalizer, image: np.ndarray, view) -> LandmarkSet:
    """Predict landmarks for one (normalised) image of any size."""
    return predict_landmarks([model], image, view)


@torch.no_grad()
def predict_landmarks(models, image: np.ndarray, view) -> LandmarkSet:
    """Average the landmark predictions of several localizers (one per fold)."""
    size = models[0].input_size
    inp, scale = localizer_input(image, size)
    x = torch.from_numpy(inp.astype(np.float32))[None, None]
    coords = []
    for m in models:
        m.eval()
        coords.append(m(x)[-1][0].double().numpy())
    pts = (np.mean(coords, axis=0) + 0.5) * scale - 0.5
    return LandmarkSet(points=pts, view=View(view), source="prediction")


# ---------------------------------------------------------------------------
# classifier

class SqueezeExcite(nn.Module):
    def __init__(self, ch: int, reduction: int):
        super().__init__()
        mid = max(ch // reduction, 1)
        self.fc1 = nn.Conv2d(ch, mid, 1)
        self.fc2 = nn.Conv2d(mid, ch, 1)

    def forward(self, x):
        s = F.adaptive_avg_pool2d(x, 1)
        return x * torch.sigmoid(self.fc2(F.relu(self.fc1(s))))


class SEBasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, planes, stride, reduction):
        super().__init__()
        cout = planes * self.expansion
        self.conv1 = nn.Conv2d(cin, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.se = SqueezeExcite(cout, reduction)
        self.down = None if stride == 1 and cin == cout else nn.Sequential(
            nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.se(self.bn2(self.conv2(out)))
        return F.relu(out + (x if self.down is None else self.down(x)))


class SEBottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, stride, reduction):
        super().__init__()
        cout = planes * self.expansion
        self.conv1 = nn.Conv2d(cin, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.se = SqueezeExcite(cout, reduction)
        self.down = None if stride == 1 and cin == cout else nn.Sequential(
            nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.se(self.bn3(self.conv3(out)))
        return F.relu(out + (x if self.down is None else self.down(x)))


@dataclass
class ClassifierOutput:
    logits: torch.Tensor
    penultimate_features: torch.Tensor


class SEResNetClassifier(nn.Module):
    """SE-ResNet backbone, then global pooling, dropout and a 2-way linear head.

    blocks=(3, 4, 6, 3) with bottlenecks and width 64 is the 50-layer
    network; inputs below 128 px get a stride-1 3x3 stem instead of the
    7x7 stride-2 stem plus max-pool.
    """

    def __init__(self, input_size: int = 224, blocks=(3, 4, 6, 3), bottleneck: bool = True, width: int = 64,
                 se_reduction: int = 16, dropout: float = 0.5, n_classes: int = 2):
        super().__init__()
        self.input_size = input_size
        block = SEBottleneck if bottleneck else SEBasicBlock
        if input_size < 128:
            stem = [nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True)]
        else:
            stem = [nn.Conv2d(3, width, 7, 2, 3, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True),
                    nn.MaxPool2d(3, 2, 1)]
        layers = list(stem)
        cin = width
        for i, n in enumerate(blocks):
            planes = width * 2 ** i
            for j in range(n):
                layers.append(block(cin, planes, 2 if (j == 0 and i > 0) else 1, se_reduction))
                cin = planes * block.expansion
        self.backbone = nn.Sequential(*layers)
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(cin, n_classes)
        self.n_features = cin

    @classmethod
    def from_config(cls, cfg: ClassifierConfig) -> "SEResNetClassifier":
        return cls(cfg.input_size, tuple(cfg.blocks), cfg.bottleneck, cfg.width, cfg.se_reduction, cfg.dropout)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"classifier expects (B, 3, H, W) input, got {tuple(x.shape)}")
        return self.backbone(x)

    def head(self, feats: torch.Tensor) -> torch.Tensor:
        return self.fc(self.dropout(torch.flatten(F.adaptive_avg_pool2d(feats, 1), 1)))

    def head_parameters(self):
        return list(self.fc.parameters())

    def backbone_parameters(self):
        return list(self.backbone.parameters())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def forward_with_features(self, x: torch.Tensor) -> ClassifierOutput:
        feats = self.features(x)
        return ClassifierOutput(self.head(feats), feats)


def classifier_forward(model: SEResNetClassifier, batch) -> list[ClassifierOutput]:
    x = torch.as_tensor(np.asarray(batch, dtype=np.float32)) if not torch.is_tensor(batch) else batch
    with torch.no_grad():
        out = model.forward_with_features(x)
    return [ClassifierOutput(out.logits[i], out.penultimate_features[i]) for i in range(len(x))]


def load_pretrained(model: nn.Module, path) -> list[str]:
    """Load backbone weights from a state-dict archive; the 2-way head stays random."""
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises several unrelated types for bad archives
        raise DataError(f"cannot load pretrained weights {path}: {e}") from e
    state = state.get("state_dict", state)
    own = model.state_dict()
    usable = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape and not k.startswith("fc.")}
    model.load_state_dict(usable, strict=False)
    return sorted(usable)


# ---------------------------------------------------------------------------
# GradCAM

@dataclass(frozen=True, eq=False)
class GradCamMap:
    heat: np.ndarray
    target_class: int


def grad_cam_from(features: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """ReLU of the feature maps weighted by their spatially averaged gradients."""
    alpha = gradients.mean(axis=(-2, -1))
    cam = np.tensordot(alpha, features, axes=(0, 0))
    return np.maximum(cam, 0.0)


def grad_cam(model, x, target_class: int = 1) -> GradCamMap:
    """GradCAM for one input on the model's penultimate feature maps.

    `model` must expose `features(x)` and `head(features)`.
    """
    x = torch.as_tensor(np.asarray(x, dtype=np.float32)) if not torch.is_tensor(x) else x
    if x.ndim == 3:
        x = x[None]
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            feats = model.features(x)
            feats.retain_grad()
            logits = model.head(feats)
            score = logits[0, target_class]
            if not score.requires_grad:
                raise RuntimeError("target logit does not depend on the penultimate features")
            model.zero_grad(set_to_none=True)
            score.backward()
            if feats.grad is None:
                raise RuntimeError("no gradient reached the penultimate features")
            heat = grad_cam_from(feats[0].detach().double().numpy(), feats.grad[0].double().numpy())
    finally:
        model.train(was_training)
    return GradCamMap(heat=heat, target_class=target_class)


# ---------------------------------------------------------------------------
# checkpoints

def parameter_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: nn.Module, path, meta: dict) -> Path:
    path = Path(path)
    torch.save({"state_dict": model.state_dict(), "meta": meta}, path)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def build_model(meta: dict) -> nn.Module:
    arch = meta["arch"]
    if arch == "hourglass":
        return HourglassLocalizer(meta["input_size"], meta["channels"], meta["depth"], meta["stacks"],
                                  meta.get("softmax_temperature", 1.0))
    if arch == "seresnet":
        return SEResNetClassifier(meta["input_size"], tuple(meta["blocks"]), meta["bottleneck"], meta["width"],
                                  meta["se_reduction"], meta["dropout"])
    raise DataError(f"unknown architecture {arch!r}")


def localizer_meta(cfg: LocalizerConfig) -> dict:
    return {"arch": "hourglass", "input_size": cfg.input_size, "channels": cfg.channels, "depth": cfg.depth,
            "stacks": cfg.stacks, "softmax_temperature": cfg.softmax_temperature}


def classifier_meta(cfg: ClassifierConfig) -> dict:
    return {"arch": "seresnet", "input_size": cfg.input_size, "blocks": list(cfg.blocks),
            "bottleneck": cfg.bottleneck, "width": cfg.width, "se_reduction": cfg.se_reduction,
            "dropout": cfg.dropout}


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        model = build_model(payload["meta"])
        model.load_state_dict(payload["state_dict"])
    except DataError:
        raise
    except Exception as e:
        raise DataError(f"corrupted checkpoint {path}: {e}") from e
    model.eval()
    return model, payload["meta"]
