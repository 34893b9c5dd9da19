"""Three-channel geometry images from (view) point clouds.

Channel 0 is depth z(x, y); channels 1 and 2 are the azimuth and
elevation angles of the surface normals, each fitted over the same x-y
grid as a regularized scattered-data surface, cropped around the nosetip,
normalized to 8 bit, and resized. The fit minimizes

    sum_s (bilinear(grid, x_s, y_s) - v_s)^2 + lambda * ||second diffs||^2

where the roughness term stacks the x, y and cross second differences, so
affine surfaces are reproduced exactly at any smoothing level and the
normal equations stay nonsingular for >= 3 non-collinear samples.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .core import PointCloud, spherical_angles
from .errors import (
    CropOutOfBounds,
    EmptyCentralRegion,
    NoSamples,
    SolverDiverged,
)
from .views import ViewCloud

DEFAULT_SPACING_MM = 0.75
DEFAULT_SMOOTHNESS = 1e-2
DEFAULT_CROP = 224
DEFAULT_OUT_SIZE = 160
RESIDUAL_LIMIT = 1e-8


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    spacing: float = DEFAULT_SPACING_MM
    origin: tuple[float, float] = (0.0, 0.0)
    smoothness: float = DEFAULT_SMOOTHNESS

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("grid must be at least 8x8")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.smoothness < 0:
            raise ValueError("smoothness must be >= 0")

    @classmethod
    def cover(cls, points: np.ndarray, spacing: float = DEFAULT_SPACING_MM,
              smoothness: float = DEFAULT_SMOOTHNESS, margin: int = 1) -> "GridSpec":
        """Smallest grid covering the x-y extent of `points` plus a margin."""
        lo = points[:, :2].min(axis=0) - margin * spacing
        hi = points[:, :2].max(axis=0) + margin * spacing
        width = max(8, int(np.ceil((hi[0] - lo[0]) / spacing)) + 1)
        height = max(8, int(np.ceil((hi[1] - lo[1]) / spacing)) + 1)
        return cls(width=width, height=height, spacing=spacing,
                   origin=(float(lo[0]), float(lo[1])), smoothness=smoothness)


@dataclass(frozen=True)
class FitResult:
    grid: np.ndarray
    mask: np.ndarray
    relative_residual: float
    penalty: float  # lambda * ||second differences of the solution||^2


@dataclass
class FaceImage3C:
    """H x W x 3 8-bit geometry image (depth, azimuth, elevation)."""

    channels: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.channels.dtype != np.uint8 or self.channels.ndim != 3 \
                or self.channels.shape[2] != 3:
            raise ValueError("channels must be an (H, W, 3) uint8 array")
        if self.mask.shape != self.channels.shape[:2]:
            raise ValueError("mask shape must match the channels")
        if np.any(self.channels[~self.mask] != 0):
            raise ValueError("unsupported pixels must be zero")


def _second_difference_rows(height: int, width: int):
    """Sparse x/y/cross second-difference operator rows over the grid."""
    def node(i, j):
        return i * width + j

    rows, cols, vals = [], [], []
    row = 0
    ii, jj = np.meshgrid(np.arange(height), np.arange(1, width - 1), indexing="ij")
    for di, w in ((-1, 1.0), (0, -2.0), (1, 1.0)):
        rows.append(row + np.arange(ii.size))
        cols.append(node(ii, jj + di).ravel())
        vals.append(np.full(ii.size, w))
    row += ii.size

    ii, jj = np.meshgrid(np.arange(1, height - 1), np.arange(width), indexing="ij")
    for di, w in ((-1, 1.0), (0, -2.0), (1, 1.0)):
        rows.append(row + np.arange(ii.size))
        cols.append(node(ii + di, jj).ravel())
        vals.append(np.full(ii.size, w))
    row += ii.size

    # cross term, sqrt(2) weight to mirror the thin-plate energy
    ii, jj = np.meshgrid(np.arange(height - 1), np.arange(width - 1), indexing="ij")
    for di, dj, w in ((0, 0, 1.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 1.0)):
        rows.append(row + np.arange(ii.size))
        cols.append(node(ii + di, jj + dj).ravel())
        vals.append(np.full(ii.size, w * np.sqrt(2.0)))
    row += ii.size

    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(row, height * width),
    )


def _bilinear_rows(u: np.ndarray, v: np.ndarray, height: int, width: int):
    j0 = np.clip(np.floor(u).astype(np.intp), 0, width - 2)
    i0 = np.clip(np.floor(v).astype(np.intp), 0, height - 2)
    tx = u - j0
    ty = v - i0
    n = len(u)
    rows = np.repeat(np.arange(n), 4)
    cols = np.stack([
        i0 * width + j0,
        i0 * width + j0 + 1,
        (i0 + 1) * width + j0,
        (i0 + 1) * width + j0 + 1,
    ], axis=1).ravel()
    vals = np.stack([
        (1 - tx) * (1 - ty),
        tx * (1 - ty),
        (1 - tx) * ty,
        tx * ty,
    ], axis=1).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, height * width))


def fit_grid_surface(samples, spec: GridSpec) -> FitResult:
    """Regularized least-squares surface over the grid from scattered samples.

    Samples outside the grid extent are dropped; at least 3 must remain.
    The sparse normal equations are solved directly and the relative
    residual must come out below 1e-8, else SolverDiverged.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != 3:
        raise ValueError("samples must be an (n, 3) array of (x, y, value)")
    h, w = spec.height, spec.width
    u = (samples[:, 0] - spec.origin[0]) / spec.spacing
    v = (samples[:, 1] - spec.origin[1]) / spec.spacing
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    u, v, values = u[inside], v[inside], samples[inside, 2]
    if len(values) < 3:
        raise NoSamples(f"only {len(values)} samples inside the grid extent")

    a_data = _bilinear_rows(u, v, h, w)
    reg = _second_difference_rows(h, w)
    if spec.smoothness > 0:
        a = sp.vstack([a_data, np.sqrt(spec.smoothness) * reg], format="csr")
        b = np.concatenate([values, np.zeros(reg.shape[0])])
    else:
        a = a_data
        b = values

    normal = (a.T @ a).tocsc()
    rhs = a.T @ b
    grid_flat = spsolve(normal, rhs)
    if not np.isfinite(grid_flat).all():
        raise SolverDiverged("non-finite solution from the sparse solve",
                             residual=np.inf)
    scale = max(float(np.linalg.norm(rhs)), 1e-300)
    residual = float(np.linalg.norm(normal @ grid_flat - rhs)) / scale
    if residual > RESIDUAL_LIMIT:
        raise SolverDiverged(
            f"normal-equation residual {residual:.3e} above {RESIDUAL_LIMIT:g}",
            residual=residual,
        )

    penalty = spec.smoothness * float(np.sum((reg @ grid_flat) ** 2))

    # node (i, j) is supported when some sample lies within one cell of it
    mask = np.zeros((h, w), dtype=bool)
    ju = np.round(u).astype(np.intp)
    iv = np.round(v).astype(np.intp)
    for dj in (-1, 0, 1):
        for di in (-1, 0, 1):
            jj = ju + dj
            ii = iv + di
            near = (jj >= 0) & (jj < w) & (ii >= 0) & (ii < h)
            near &= (np.abs(u - jj) <= 1.0) & (np.abs(v - ii) <= 1.0)
            mask[ii[near], jj[near]] = True

    return FitResult(grid=grid_flat.reshape(h, w), mask=mask,
                     relative_residual=residual, penalty=penalty)


def detect_nosetip(cloud: PointCloud, central_fraction: float = 0.4,
                   override=None) -> np.ndarray:
    """Highest-z point within the central x-y window of the cloud.

    The window spans `central_fraction` of the bounding-box extent around
    the x-y centroid; an annotation from a manifest overrides detection.
    Assumes a frontal/camera frame with +z toward the sensor.
    """
    if override is not None:
        return np.asarray(override, dtype=np.float64).reshape(3)
    pts = cloud.points
    center = pts[:, :2].mean(axis=0)
    half = 0.5 * central_fraction * (pts[:, :2].max(axis=0) - pts[:, :2].min(axis=0))
    central = np.all(np.abs(pts[:, :2] - center) <= half, axis=1)
    if not central.any():
        warnings.warn("central region empty; falling back to the global z-max",
                      EmptyCentralRegion)
        return pts[np.argmax(pts[:, 2])]
    sub = pts[central]
    return sub[np.argmax(sub[:, 2])]


def normalize_u8(channel: np.ndarray, mask: np.ndarray,
                 vrange: tuple[float, float] | None = None) -> np.ndarray:
    """Min-max map of masked values to 0..255, rounding half away from zero.

    A constant channel maps to all zeros (constant within 1e-12 relative,
    so solver-noise-level ranges are not blown up to full scale), as do
    unmasked pixels. An explicit (min, max) supports corpus-global
    normalization.
    """
    if not mask.any():
        raise ValueError("mask must select at least one pixel")
    lo, hi = vrange if vrange is not None else (
        float(channel[mask].min()), float(channel[mask].max()))
    out = np.zeros(channel.shape, dtype=np.uint8)
    if hi - lo > 1e-12 * max(abs(hi), abs(lo), 1e-30):
        scaled = 255.0 * (channel[mask] - lo) / (hi - lo)
        out[mask] = np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
    return out


def render_channel_grids(view: ViewCloud, spec: GridSpec):
    """Fit z, azimuth and elevation surfaces on a shared grid.

    Returns (grids, mask, fits): grids is (H, W, 3) float, mask the common
    support, fits the three FitResults (depth fit first).
    """
    cloud = view.cloud
    if not cloud.has_normals:
        raise ValueError("view cloud must carry normals")
    theta, phi = spherical_angles(cloud.normals)
    xy = cloud.points[:, :2]
    fits = [
        fit_grid_surface(np.column_stack([xy, values]), spec)
        for values in (cloud.points[:, 2], theta, phi)
    ]
    grids = np.stack([f.grid for f in fits], axis=2)
    return grids, fits[0].mask, fits


def _crop_window(grids: np.ndarray, mask: np.ndarray, center_rc, crop: int):
    """crop x crop window centered at (row, col); outside pixels unmasked."""
    h, w = mask.shape
    r0 = center_rc[0] - crop // 2
    c0 = center_rc[1] - crop // 2
    out = np.zeros((crop, crop, grids.shape[2]))
    out_mask = np.zeros((crop, crop), dtype=bool)
    rs, re = max(r0, 0), min(r0 + crop, h)
    cs, ce = max(c0, 0), min(c0 + crop, w)
    clamped = (rs, re, cs, ce) != (r0, r0 + crop, c0, c0 + crop)
    if rs < re and cs < ce:
        out[rs - r0:re - r0, cs - c0:ce - c0] = grids[rs:re, cs:ce]
        out_mask[rs - r0:re - r0, cs - c0:ce - c0] = mask[rs:re, cs:ce]
    if clamped:
        warnings.warn("crop window clamped to the grid and zero-padded",
                      CropOutOfBounds)
    return out, out_mask, clamped


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Endpoint-aligned bilinear resampling of a 2D float array."""
    h, w = image.shape
    v = np.linspace(0.0, h - 1.0, out_h)
    u = np.linspace(0.0, w - 1.0, out_w)
    i0 = np.clip(np.floor(v).astype(np.intp), 0, h - 2)
    j0 = np.clip(np.floor(u).astype(np.intp), 0, w - 2)
    ty = (v - i0)[:, None]
    tx = (u - j0)[None, :]
    a = image[np.ix_(i0, j0)]
    b = image[np.ix_(i0, j0 + 1)]
    c = image[np.ix_(i0 + 1, j0)]
    d = image[np.ix_(i0 + 1, j0 + 1)]
    return (a * (1 - tx) * (1 - ty) + b * tx * (1 - ty)
            + c * (1 - tx) * ty + d * tx * ty)


def make_three_channel(view: ViewCloud, spec: GridSpec | None = None,
                       crop: int = DEFAULT_CROP, out_size: int = DEFAULT_OUT_SIZE,
                       central_fraction: float = 0.4, nosetip_override=None,
                       global_ranges=None) -> FaceImage3C:
    """Full image path: fit three channels, crop at the nosetip, normalize
    to 8 bit, resize.

    `global_ranges`, when given, is a per-channel (min, max) triple used
    instead of per-image normalization. `spec` defaults to a grid covering
    the view's x-y extent at the standard spacing.
    """
    if spec is None:
        spec = GridSpec.cover(view.cloud.points)
    grids, mask, _ = render_channel_grids(view, spec)

    nose = detect_nosetip(view.cloud, central_fraction, override=nosetip_override)
    col = int(round((nose[0] - spec.origin[0]) / spec.spacing))
    row = int(round((nose[1] - spec.origin[1]) / spec.spacing))
    window, window_mask, clamped = _crop_window(grids, mask, (row, col), crop)
    if not window_mask.any():
        raise NoSamples("crop window contains no supported pixels")

    ranges = []
    u8 = np.zeros_like(window, dtype=np.uint8)
    for k in range(3):
        vrange = None if global_ranges is None else tuple(global_ranges[k])
        u8[:, :, k] = normalize_u8(window[:, :, k], window_mask, vrange)
        masked = window[:, :, k][window_mask]
        ranges.append((float(masked.min()), float(masked.max())))

    resized = np.zeros((out_size, out_size, 3), dtype=np.uint8)
    final_mask = bilinear_resize(window_mask.astype(np.float64),
                                 out_size, out_size) >= 0.5
    for k in range(3):
        vals = bilinear_resize(u8[:, :, k].astype(np.float64), out_size, out_size)
        resized[:, :, k] = np.clip(np.floor(vals + 0.5), 0, 255).astype(np.uint8)
    resized[~final_mask] = 0

    meta = {
        "scan_id": view.source_ref,
        "pose": {
            "longitude": view.pose.longitude,
            "latitude": view.pose.latitude,
            "radius": view.pose.radius,
        },
        "channel_ranges": ranges,
        "nosetip": [float(x) for x in nose],
        "grid": {
            "width": spec.width, "height": spec.height,
            "spacing": spec.spacing, "origin": list(spec.origin),
            "smoothness": spec.smoothness,
        },
        "crop": crop,
        "out_size": out_size,
        "crop_clamped": bool(clamped),
        "normalization": "global" if global_ranges is not None else "per_image",
    }
    return FaceImage3C(channels=resized, mask=final_mask, meta=meta)


def save_image3c(image: FaceImage3C, path, with_mask: bool = False) -> None:
    """8-bit PNG (depth, azimuth, elevation as R, G, B) + JSON meta.

    `with_mask` adds the support mask as the alpha channel.
    """
    from PIL import Image

    path = Path(path)
    if with_mask:
        rgba = np.dstack([image.channels,
                          image.mask.astype(np.uint8) * 255])
        Image.fromarray(rgba, mode="RGBA").save(path)
    else:
        Image.fromarray(image.channels, mode="RGB").save(path)
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(image.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_image3c(path) -> FaceImage3C:
    from PIL import Image

    path = Path(path)
    arr = np.asarray(Image.open(path))
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ValueError(f"{path}: expected an RGB or RGBA image")
    if arr.shape[2] == 4:
        channels, mask = arr[:, :, :3].copy(), arr[:, :, 3] > 0
    else:
        channels = arr.copy()
        mask = channels.any(axis=2)
    meta_path = path.with_suffix(".json")
    meta = {}
    if meta_path.exists():
        with open(meta_path) as fh:
            meta = json.load(fh)
    channels[~mask] = 0
    return FaceImage3C(channels=channels, mask=mask, meta=meta)
