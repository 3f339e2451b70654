"""Depth, image and occupancy metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    d1: float
    d2: float
    d3: float
    count: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def depth_metrics(pred, gt, valid=None, cap: float = 80.0) -> DepthMetrics:
    """Standard monocular-depth errors over valid pixels; both maps are capped.

    Pixels with non-positive ground truth are always excluded. Threshold
    accuracies use a strict ``<`` and are percentages.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt shapes differ")
    mask = gt > 0
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    mask &= pred > 0
    if not np.any(mask):
        raise ValueError("no valid pixels to evaluate")
    p = np.minimum(pred[mask], cap)
    g = np.minimum(gt[mask], cap)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff * diff / g)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        d1=float(100.0 * np.mean(ratio < 1.25)),
        d2=float(100.0 * np.mean(ratio < 1.25**2)),
        d3=float(100.0 * np.mean(ratio < 1.25**3)),
        count=int(mask.sum()),
    )


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, win):
    # separable correlation, keeping only fully-covered positions
    r = len(win) // 2
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    return out[r:-r, r:-r] if r else out


def ssim(a, b, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over fully-covered Gaussian windows, per channel then averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < win_size:
        raise ValueError("image smaller than the SSIM window")
    win = gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass(frozen=True)
class OccMetrics:
    iou: float
    precision: float
    recall: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    undefined: tuple = ()

    def as_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = list(self.undefined)
        return d


def occ_metrics(pred, gt) -> OccMetrics:
    """IoU, precision and recall of occupied voxels. Zero denominators give 0
    and are listed in ``undefined``."""
    p = np.asarray(getattr(pred, "occupied", pred), dtype=bool)
    g = np.asarray(getattr(gt, "occupied", gt), dtype=bool)
    if p.shape != g.shape:
        raise ValueError("occupancy lattices differ")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    iou = ratio(tp, tp + fp + fn, "iou")
    prec = ratio(tp, tp + fp, "precision")
    rec = ratio(tp, tp + fn, "recall")
    return OccMetrics(iou, prec, rec, tp, fp, fn, tuple(undefined))
