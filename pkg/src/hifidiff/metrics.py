"""PSNR / SSIM on generated slices and Table-style reports.

Convention: only slices produced by super-resolution are scored. Acquired
slices pass through unchanged and would inflate every method equally. Both
volumes are mapped into the ground truth's normalized [-1, 1] frame, so the
data range is 2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import Volume, apply_normalization, generated_slice_indices
from .errors import DimensionError

PSNR_CAP = 100.0
DATA_RANGE = 2.0
SCORING_NOTE = "scored on generated slices only, ground-truth normalized frame, data_range=2"


def _arr(x) -> np.ndarray:
    return np.asarray(x.voxels if isinstance(x, Volume) else x, dtype=np.float64)


def _select(a: np.ndarray, slices: Optional[Sequence[int]]) -> np.ndarray:
    return a if slices is None else a[np.asarray(slices, dtype=int)]


def psnr(a, b, data_range: float = DATA_RANGE, slices: Optional[Sequence[int]] = None) -> float:
    """10 log10(range^2 / MSE); identical inputs return the 100 dB cap."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    a, b = _select(a, slices), _select(b, slices)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE, window=None) -> np.ndarray:
    """Per-window SSIM over all fully contained 11x11 windows of two 2-D images."""
    w = gaussian_window() if window is None else window
    if a.shape[0] < w.shape[0] or a.shape[1] < w.shape[1]:
        raise DimensionError(f"slice {a.shape} is smaller than the {w.shape} SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, w.shape), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = DATA_RANGE, slices: Optional[Sequence[int]] = None) -> float:
    """Mean single-scale SSIM over 2-D slices (11x11 Gaussian window, sigma 1.5)."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    a, b = _select(a, slices), _select(b, slices)
    return float(np.mean([ssim_map(x, y, data_range).mean() for x, y in zip(a, b)]))


@dataclass
class MetricsReport:
    method: str
    R: int
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, p: float, s: float) -> None:
        self.psnr.append(float(p))
        self.ssim.append(float(s))

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def psnr_std(self) -> float:
        return float(np.std(self.psnr))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def ssim_std(self) -> float:
        return float(np.std(self.ssim))

    HEADER = "method,R,psnr_mean,psnr_std,ssim_mean,ssim_std"

    def row(self) -> str:
        return (
            f"{self.method},{self.R},{self.psnr_mean:.4f},{self.psnr_std:.4f},"
            f"{self.ssim_mean:.6f},{self.ssim_std:.6f}"
        )


def evaluate(sr: Volume, gt: Volume, label: str, R: int, report: Optional[MetricsReport] = None) -> MetricsReport:
    """Score one SR volume against ground truth, appending to ``report`` if given."""
    if sr.shape != gt.shape:
        raise DimensionError(f"prediction {sr.shape} and ground truth {gt.shape} differ")
    report = report if report is not None else MetricsReport(label, R)
    if gt.range_tag == "normalized":
        frame_gt, frame_sr = gt, sr
    else:
        rng = (float(gt.voxels.min()), float(gt.voxels.max()))
        frame_gt, frame_sr = apply_normalization(gt, rng), apply_normalization(sr, rng)
    idx = generated_slice_indices(gt.depth, R)
    report.add(psnr(frame_sr, frame_gt, DATA_RANGE, idx), ssim(frame_sr, frame_gt, DATA_RANGE, idx))
    return report


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Human-readable aligned table, one row per method/ratio."""
    lines = [f"# {SCORING_NOTE}", f"{'method':<16}{'R':>3}  {'PSNR (dB)':>18}  {'SSIM':>20}"]
    for r in reports:
        lines.append(
            f"{r.method:<16}{r.R:>3}  {r.psnr_mean:>9.3f} ± {r.psnr_std:<6.3f}  {r.ssim_mean:>9.5f} ± {r.ssim_std:<8.5f}"
        )
    return "\n".join(lines)
