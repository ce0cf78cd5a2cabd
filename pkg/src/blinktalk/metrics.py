"""Image and landmark quality metrics plus the evaluation report type."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from .preprocess import LandmarkSet, eye_size, luma

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# landmark index groups scored by lmd()
MOUTH_CARDINALS = (48, 51, 54, 57, 60, 62, 64, 66)
EYE_POINTS = tuple(range(36, 48))


def _gaussian_kernel():
    radius = SSIM_WINDOW // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return k / k.sum()


def _filter_valid(img, kernel):
    # separable correlation, keeping only fully covered positions
    tmp = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), 1, img)
    return np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0, tmp)


def ssim(a, b) -> float:
    """Structural similarity between two images in [0, 1].

    Color inputs are compared on Rec. 601 luma.  Statistics use an 11x11
    Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1, and
    the mean is taken over window positions fully inside the image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = luma(a), luma(b)
    if a.ndim != 2:
        raise ValueError("expected (H, W) or (H, W, 3) images")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")

    kernel = _gaussian_kernel()
    mu_a = _filter_valid(a, kernel)
    mu_b = _filter_valid(b, kernel)
    var_a = _filter_valid(a * a, kernel) - mu_a * mu_a
    var_b = _filter_valid(b * b, kernel) - mu_b * mu_b
    cov = _filter_valid(a * b, kernel) - mu_a * mu_b

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _points_of(entry):
    if isinstance(entry, LandmarkSet):
        return entry.points
    return np.asarray(entry, dtype=np.float64)


def lmd(pred, gt, region: str) -> float:
    """Mean Euclidean landmark distance over a region's points.

    `region` is "mouth" (outer/inner lip cardinals) or "eye" (all twelve
    eye points).  Accepts single landmark sets or aligned sequences.
    """
    if region == "mouth":
        idx = list(MOUTH_CARDINALS)
    elif region == "eye":
        idx = list(EYE_POINTS)
    else:
        raise ValueError(f"unknown region {region!r}")
    if isinstance(pred, LandmarkSet) or (
            hasattr(pred, "ndim") and getattr(pred, "ndim", 0) == 2):
        pred, gt = [pred], [gt]
    if len(pred) != len(gt):
        raise ValueError("sequence lengths disagree")
    total = 0.0
    for p, g in zip(pred, gt):
        pp, gp = _points_of(p)[idx], _points_of(g)[idx]
        total += float(np.mean(np.linalg.norm(pp - gp, axis=1)))
    return total / len(pred)


def blink_corr(pred, gt_eye_open) -> float:
    """Pearson correlation between predicted and true eye openness.

    `pred` is a series of eye sizes, or of landmark sets from which the
    mean eye aspect ratio is taken.  Constant series are rejected since
    the correlation is undefined.
    """
    if len(pred) and isinstance(pred[0], LandmarkSet):
        pred = [eye_size(p).mean_size for p in pred]
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt_eye_open, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError("series must be 1-D and equal length")
    if np.ptp(pred) < 1e-12 or np.ptp(gt) < 1e-12:
        raise ValueError("correlation undefined for constant series")
    return float(np.corrcoef(pred, gt)[0, 1])


@dataclass
class MetricReport:
    """Evaluation summary produced by the pipeline."""

    ssim: float
    lmd_mouth: float
    lmd_eye: float
    blink_corr: float
    pose_r2: float

    def rows(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "value"])
            for name, value in self.rows():
                writer.writerow([name, repr(float(value))])

    def summary(self):
        parts = [f"{name}={value:.4f}" for name, value in self.rows()]
        return "  ".join(parts)


def load_report_csv(path) -> MetricReport:
    values = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["metric", "value"]:
            raise ValueError(f"unexpected report header {header}")
        for name, value in reader:
            values[name] = float(value)
    return MetricReport(**values)
