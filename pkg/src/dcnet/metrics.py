"""Picture quality indices for fused hyperspectral estimates.

All functions take ground truth first.  Inputs are ``HsiCube`` objects or
``height x width x bands`` arrays with values nominally in [0, 1].
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, DomainError

PSNR_CAP = 99.0

# column order and ideal direction, as in the usual fusion benchmark tables
COLUMNS = ("PSNR", "SAM", "ERGAS", "SSIM", "UQI")
IDEAL = {"PSNR": ("up", None), "SAM": ("down", 0.0), "ERGAS": ("down", 0.0), "SSIM": ("up", 1.0), "UQI": ("up", 1.0)}


def _pair(gt, est):
    a = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    b = np.asarray(getattr(est, "data", est), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: ground truth {a.shape} vs estimate {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise DimensionError(f"expected height x width x bands, got {a.shape}")
    return a, b


def rmse_per_band(gt, est) -> np.ndarray:
    a, b = _pair(gt, est)
    return np.sqrt(np.mean((a - b) ** 2, axis=(0, 1)))


def psnr(gt, est) -> float:
    """Band-averaged PSNR with peak 1.0; each band capped at 99 dB."""
    a, b = _pair(gt, est)
    mse = np.mean((a - b) ** 2, axis=(0, 1))
    with np.errstate(divide="ignore"):
        per_band = np.where(mse > 0, 10.0 * np.log10(1.0 / np.where(mse > 0, mse, 1.0)), PSNR_CAP)
    return float(np.mean(np.minimum(per_band, PSNR_CAP)))


def sam(gt, est, return_skipped=False):
    """Mean spectral angle in degrees.

    Pixels where either spectrum has norm below 1e-12 are skipped.
    """
    a, b = _pair(gt, est)
    x = a.reshape(-1, a.shape[2])
    y = b.reshape(-1, b.shape[2])
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    ok = (nx >= 1e-12) & (ny >= 1e-12)
    # 2 atan2(|u - v|, |u + v|) stays accurate near 0, unlike arccos
    u = x[ok] / nx[ok, None]
    v = y[ok] / ny[ok, None]
    ang = np.degrees(2.0 * np.arctan2(np.linalg.norm(u - v, axis=1), np.linalg.norm(u + v, axis=1)))
    value = float(ang.mean()) if ang.size else 0.0
    if return_skipped:
        return value, int((~ok).sum())
    return value


def ergas(gt, est, ratio) -> float:
    a, b = _pair(gt, est)
    if ratio < 1:
        raise DomainError("ERGAS ratio must be >= 1")
    mu = a.mean(axis=(0, 1))
    bad = np.flatnonzero(np.abs(mu) < 1e-12)
    if bad.size:
        raise DomainError(f"ERGAS undefined: ground-truth band {int(bad[0])} has zero mean")
    rel = rmse_per_band(a, b) / mu
    return float(100.0 / ratio * np.sqrt(np.mean(rel**2)))


def gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img, w):
    return np.tensordot(sliding_window_view(img, w.shape), w, axes=([-2, -1], [0, 1]))


def ssim(gt, est, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0) -> float:
    a, b = _pair(gt, est)
    if a.shape[0] < window or a.shape[1] < window:
        raise DimensionError(f"image {a.shape[:2]} smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for i in range(a.shape[2]):
        x, y = a[..., i], b[..., i]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(smap.mean())
    return float(np.mean(vals))


UIQI_EPS = 1e-20


def uiqi(gt, est, window=8) -> float:
    """Universal image quality index over sliding ``window x window`` blocks.

    Windows whose denominator vanishes (below 1e-20) are skipped.
    """
    a, b = _pair(gt, est)
    if a.shape[0] < window or a.shape[1] < window:
        raise DimensionError(f"image {a.shape[:2]} smaller than the {window}x{window} UIQI window")
    vals = []
    for i in range(a.shape[2]):
        wx = sliding_window_view(a[..., i], (window, window)).reshape(-1, window * window)
        wy = sliding_window_view(b[..., i], (window, window)).reshape(-1, window * window)
        mx, my = wx.mean(axis=1), wy.mean(axis=1)
        dx, dy = wx - mx[:, None], wy - my[:, None]
        vx = np.mean(dx * dx, axis=1)
        vy = np.mean(dy * dy, axis=1)
        cxy = np.mean(dx * dy, axis=1)
        den = (vx + vy) * (mx * mx + my * my)
        ok = den > UIQI_EPS
        if ok.any():
            vals.append(np.mean(4 * cxy[ok] * mx[ok] * my[ok] / den[ok]))
    return float(np.mean(vals)) if vals else 1.0


@dataclass
class MetricsReport:
    psnr: float
    sam: float
    ergas: float
    ssim: float
    uiqi: float
    rmse_per_band: np.ndarray
    ratio: int
    sam_skipped: int = 0
    label: str = ""
    extra: dict = field(default_factory=dict)

    def row(self):
        return (self.psnr, self.sam, self.ergas, self.ssim, self.uiqi)

    def format_row(self):
        head = repr(round(float(self.psnr), 4))
        return ", ".join([head] + [f"{float(v):.6g}" for v in self.row()[1:]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, v in zip(COLUMNS, self.row()):
            w.writerow([name, repr(float(v))])
        w.writerow(["ratio", self.ratio])
        w.writerow(["sam_skipped", self.sam_skipped])
        return buf.getvalue()

    def rmse_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["band", "rmse"])
        for i, v in enumerate(self.rmse_per_band):
            w.writerow([i, repr(float(v))])
        return buf.getvalue()


def evaluate(gt, est, ratio, label="") -> MetricsReport:
    s, skipped = sam(gt, est, return_skipped=True)
    return MetricsReport(
        psnr=psnr(gt, est),
        sam=s,
        ergas=ergas(gt, est, ratio),
        ssim=ssim(gt, est),
        uiqi=uiqi(gt, est),
        rmse_per_band=rmse_per_band(gt, est),
        ratio=ratio,
        sam_skipped=skipped,
        label=label,
    )
