"""Image-quality and geometry metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionMismatch, MissingLayer

PSNR_IDENTICAL = math.inf  # serialised as JSON ``Infinity``


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0, mask=None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _check(a, b)
    err = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask, bool)
        if m.shape != a.shape[: m.ndim]:
            raise DimensionMismatch("mask shape does not match image")
        err = err[m]
    mse = float(np.mean(err))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_map(a, b, data_range: float = 1.0, win: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Per-pixel SSIM with a separable Gaussian window; border pixels are cropped."""
    a, b = _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = _gaussian_window(win, sigma)

    def blur(x):
        return correlate1d(correlate1d(x, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")

    C1 = (0.01 * data_range) ** 2
    C2 = (0.03 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    va = blur(a * a) - mu_a**2
    vb = blur(b * b) - mu_b**2
    vab = blur(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + C1) * (2 * vab + C2)) / ((mu_a**2 + mu_b**2 + C1) * (va + vb + C2))
    pad = (win - 1) // 2
    return s[pad:-pad, pad:-pad].mean(axis=-1)


def ssim(a, b, data_range: float = 1.0, mask=None) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03).

    With ``mask`` the SSIM map is averaged over masked pixels only.
    """
    a, b = _check(a, b)
    if min(a.shape[:2]) < 11:
        raise DimensionMismatch("SSIM needs images of at least 11x11 pixels")
    s = ssim_map(a, b, data_range)
    if mask is None:
        return float(s.mean())
    m = np.asarray(mask, bool)[5:-5, 5:-5]
    if not m.any():
        raise ValueError("SSIM mask is empty after border crop")
    return float(s[m].mean())


def normal_mae(a, b, mask=None) -> float:
    """Mean angular error in degrees between unit normal maps."""
    a, b = _check(a, b)
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    if mask is not None:
        m = np.asarray(mask, bool)
        if m.shape != cos.shape:
            raise DimensionMismatch("mask shape does not match normal map")
        cos = cos[m]
    return float(np.degrees(np.mean(np.arccos(cos))))


@dataclass
class LayerMetrics:
    psnr: float
    ssim: float


@dataclass
class Metrics:
    layers: dict = field(default_factory=dict)  # name -> LayerMetrics
    normal_mae: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "layers": {k: asdict(v) for k, v in sorted(self.layers.items())},
            "normal_mae": self.normal_mae,
            "extra": dict(sorted(self.extra.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls({k: LayerMetrics(**v) for k, v in d["layers"].items()}, d.get("normal_mae"), dict(d.get("extra", {})))

    def flat(self) -> dict:
        out = {}
        for name, lm in sorted(self.layers.items()):
            out[f"{name}.psnr"] = lm.psnr
            out[f"{name}.ssim"] = lm.ssim
        if self.normal_mae is not None:
            out["normal_mae"] = self.normal_mae
        out.update({k: v for k, v in sorted(self.extra.items())})
        return out


def evaluate_layers(pred: dict, gt: dict, names, mask=None) -> Metrics:
    """Per-layer PSNR/SSIM between predicted and ground-truth layers."""
    m = Metrics()
    for name in names:
        if name not in gt:
            raise MissingLayer(f"ground-truth layer {name!r} missing")
        if name not in pred:
            raise MissingLayer(f"predicted layer {name!r} missing")
        m.layers[name] = LayerMetrics(psnr(pred[name], gt[name], mask=mask), ssim(pred[name], gt[name], mask=mask))
    return m


def write_report(path, metrics: Metrics, info: dict | None = None) -> None:
    """``report.json`` (strict-ish JSON; ``Infinity`` for identical PSNR) and a ``report.txt``
    with ``key = value`` lines followed by the same JSON block."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"metrics": metrics.to_dict(), "info": info or {}}
    text = json.dumps(payload, indent=2, sort_keys=True)
    path.write_text(text + "\n")
    lines = [f"{k} = {v!r}" for k, v in metrics.flat().items()]
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n\n" + text + "\n")


def read_report(path) -> tuple[Metrics, dict]:
    payload = json.loads(Path(path).read_text())
    return Metrics.from_dict(payload["metrics"]), payload.get("info", {})
