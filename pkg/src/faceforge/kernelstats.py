"""Per-kernel depth variance and keypoint density over geometry images.

Flat 3x3 patches of a face are nearly planar; larger windows capture more
depth variation, which is what motivates large first-stage kernels. Two
statistics quantify that over a corpus: the mean within-window depth
variance, and the fraction of windows anisotropic enough to count as
keypoints (PCA of the window's (x, y, depth) points with principal
standard deviations sigma1 >= sigma2, qualifying when
(sigma1 - sigma2) / sigma1 >= kappa).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SizeTooLarge
from .geomimage import FaceImage3C

DEFAULT_SIZES = (3, 5, 7, 9)
# calibrated so rendered desk faces in mm units land in [0.001, 0.1]
# keypoint density at k = 9
DEFAULT_KAPPA = 0.4


@dataclass(frozen=True)
class DepthField:
    """A depth grid with validity mask; units 'mm' or the 8-bit fallback."""

    values: np.ndarray
    mask: np.ndarray
    spacing: float = 1.0  # mm per pixel ('u8' fields keep 1.0)
    units: str = "mm"

    @classmethod
    def from_image3c(cls, image: FaceImage3C) -> "DepthField":
        return cls(values=image.channels[:, :, 0].astype(np.float64),
                   mask=image.mask.copy(), spacing=1.0, units="u8")


@dataclass
class KernelReport:
    kernel_sizes: tuple[int, ...]
    mean_variance: dict[int, float] = field(default_factory=dict)
    keypoints_per_kernel: dict[int, float] = field(default_factory=dict)
    corpus_size: int = 0
    units: str = "mm"
    kappa: float | None = None


def _check_sizes(fields, sizes):
    if not fields:
        raise ValueError("corpus must not be empty")
    limit = min(min(f.values.shape) for f in fields)
    for k in sizes:
        if k % 2 == 0 or k < 3:
            raise ValueError(f"kernel size {k} must be odd and >= 3")
        if k > limit:
            raise SizeTooLarge(f"kernel size {k} exceeds smallest image side {limit}")
    units = {f.units for f in fields}
    if len(units) != 1:
        raise ValueError(f"mixed units in corpus: {sorted(units)}")


def _box_sums(a: np.ndarray, k: int) -> np.ndarray:
    """Sums over every k x k window, shape (H-k+1, W-k+1)."""
    c = np.cumsum(np.cumsum(np.pad(a, ((1, 0), (1, 0))), axis=0), axis=1)
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def window_variance_stats(fields: list[DepthField],
                          sizes=DEFAULT_SIZES) -> KernelReport:
    """Mean within-window depth variance per kernel size, pooled over the
    corpus. Windows with fewer than k^2/2 valid pixels are skipped."""
    _check_sizes(fields, sizes)
    report = KernelReport(kernel_sizes=tuple(sizes), corpus_size=len(fields),
                          units=fields[0].units)
    for k in sizes:
        sums, counts = [], 0
        for f in fields:
            m = f.mask.astype(np.float64)
            v = np.where(f.mask, f.values, 0.0)
            v = v - (v.sum() / max(m.sum(), 1.0))  # center for stability
            v *= f.mask
            cnt = _box_sums(m, k)
            s1 = _box_sums(v, k)
            s2 = _box_sums(v * v, k)
            valid = cnt >= (k * k) / 2.0
            c = np.where(valid, cnt, 1.0)
            var = np.maximum(s2 / c - (s1 / c) ** 2, 0.0)
            sums.append(float(var[valid].sum()))
            counts += int(valid.sum())
        report.mean_variance[k] = math.fsum(sums) / counts if counts else 0.0
    return report


def _window_anisotropy(f: DepthField, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(ratio, valid) per window: (sigma1 - sigma2)/sigma1 from the PCA of
    the window's (x, y, depth) points; valid where >= k^2/2 pixels."""
    h, w = f.values.shape
    x = np.broadcast_to(np.arange(w) * f.spacing, (h, w)).astype(np.float64)
    y = np.broadcast_to((np.arange(h) * f.spacing)[:, None], (h, w)).astype(np.float64)
    m = f.mask.astype(np.float64)
    xm, ym, zm = x * m, y * m, f.values * m

    cnt = _box_sums(m, k)
    valid = cnt >= (k * k) / 2.0
    c = np.where(cnt > 0, cnt, 1.0)

    coords = (xm, ym, zm)
    raw = (x, y, f.values)
    means = [_box_sums(a, k) / c for a in coords]
    cov = np.empty(cnt.shape + (3, 3))
    for ai in range(3):
        for bi in range(ai, 3):
            second = _box_sums(raw[ai] * coords[bi], k) / c
            cov[..., ai, bi] = cov[..., bi, ai] = second - means[ai] * means[bi]

    lam = np.linalg.eigvalsh(cov.reshape(-1, 3, 3)).reshape(cnt.shape + (3,))
    lam = np.maximum(lam, 0.0)
    sigma1 = np.sqrt(lam[..., 2])
    sigma2 = np.sqrt(lam[..., 1])
    denom = np.where(sigma1 > 0, sigma1, 1.0)
    ratio = np.where(sigma1 > 0, (sigma1 - sigma2) / denom, 0.0)
    return ratio, valid


def keypoint_density(fields: list[DepthField], sizes=DEFAULT_SIZES,
                     kappa: float = DEFAULT_KAPPA) -> KernelReport:
    """Fraction of windows qualifying as keypoints per kernel size.

    The per-image fraction uses every window position in the denominator,
    so masked-out regions depress the density; the corpus value is the
    mean of per-image fractions.
    """
    _check_sizes(fields, sizes)
    report = KernelReport(kernel_sizes=tuple(sizes), corpus_size=len(fields),
                          units=fields[0].units, kappa=kappa)
    for k in sizes:
        fractions = []
        for f in fields:
            ratio, valid = _window_anisotropy(f, k)
            qualifying = int(np.count_nonzero((ratio >= kappa) & valid))
            fractions.append(qualifying / ratio.size)
        report.keypoints_per_kernel[k] = math.fsum(fractions) / len(fields)
    return report


def analyze(fields: list[DepthField], sizes=DEFAULT_SIZES,
            kappa: float = DEFAULT_KAPPA) -> KernelReport:
    """Both statistics in one report."""
    report = window_variance_stats(fields, sizes)
    report.keypoints_per_kernel = keypoint_density(fields, sizes, kappa).keypoints_per_kernel
    report.kappa = kappa
    return report


def report_to_json(report: KernelReport, path) -> None:
    payload = {
        "kernel_sizes": list(report.kernel_sizes),
        "mean_variance": {str(k): v for k, v in report.mean_variance.items()},
        "keypoints_per_kernel": {str(k): v
                                 for k, v in report.keypoints_per_kernel.items()},
        "corpus_size": report.corpus_size,
        "units": report.units,
        "kappa": report.kappa,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def report_to_csv(report: KernelReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kernel_size", "mean_variance", "keypoint_density"])
        for k in report.kernel_sizes:
            mv = report.mean_variance.get(k)
            kd = report.keypoints_per_kernel.get(k)
            writer.writerow([k,
                             "" if mv is None else repr(mv),
                             "" if kd is None else repr(kd)])


def load_depth_fields(paths) -> list[DepthField]:
    """8-bit fallback loader for PNG geometry images."""
    from .geomimage import load_image3c

    return [DepthField.from_image3c(load_image3c(Path(p))) for p in paths]
