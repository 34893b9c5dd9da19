"""Core point-cloud and corresponded-face types plus basic geometry ops.

Coordinates are millimeters throughout. The sensor looks down the world +z
axis, so estimated normals are sign-flipped toward +z.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateNeighborhood,
    NotRotation,
    NotUnit,
    SizeMismatch,
)

_UNIT_TOL = 1e-3


def _as_points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise SizeMismatch(f"expected an (n, 3) array, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class PointCloud:
    """Unordered 3D points in mm, with optional unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = _as_points(self.points)
        object.__setattr__(self, "points", pts)
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates contain NaN/Inf")
        if self.normals is not None:
            nrm = _as_points(self.normals)
            if len(nrm) != len(pts):
                raise SizeMismatch(
                    f"{len(nrm)} normals for {len(pts)} points"
                )
            lengths = np.linalg.norm(nrm, axis=1)
            if not np.isfinite(nrm).all() or np.any(np.abs(lengths - 1.0) > 1e-6):
                raise NotUnit("normals must be unit length within 1e-6")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def select(self, indices) -> "PointCloud":
        """Sub-cloud at the given indices (normals carried along)."""
        idx = np.asarray(indices)
        nrm = self.normals[idx] if self.normals is not None else None
        return PointCloud(self.points[idx], nrm)


@dataclass(frozen=True)
class CorrespondedFace:
    """A face scan whose vertex index p means the same anatomical point
    on every face of a set (dense correspondence by vertex order)."""

    cloud: PointCloud
    identity_id: int
    expression_id: int = 0

    def __post_init__(self):
        if self.identity_id < 0:
            raise ValueError("identity_id must be >= 0")
        if self.expression_id < 0:
            raise ValueError("expression_id must be >= 0")

    @property
    def vertex_count(self) -> int:
        return len(self.cloud)

    def coords(self) -> np.ndarray:
        return self.cloud.points


@dataclass
class FaceSet:
    """A collection of corresponded faces sharing a common vertex count.

    Identity labels must form a contiguous integer range (synthetic sets
    start above their parents' range, real sets normally start at 0).
    """

    faces: list[CorrespondedFace]
    P: int = field(init=False)
    N: int = field(init=False)

    def __post_init__(self):
        if not self.faces:
            raise ValueError("FaceSet needs at least one face")
        counts = {f.vertex_count for f in self.faces}
        if len(counts) != 1:
            raise SizeMismatch(f"faces disagree on vertex count: {sorted(counts)}")
        self.P = counts.pop()
        ids = sorted({f.identity_id for f in self.faces})
        if ids != list(range(ids[0], ids[0] + len(ids))):
            raise ValueError("identity labels must form a contiguous range")
        self.N = len(ids)

    def __len__(self) -> int:
        return len(self.faces)

    def identity_ids(self) -> list[int]:
        return sorted({f.identity_id for f in self.faces})

    def faces_of(self, identity_id: int) -> list[CorrespondedFace]:
        return [f for f in self.faces if f.identity_id == identity_id]

    def representative(self, identity_id: int) -> CorrespondedFace:
        """Neutral-expression face of an identity, else its first face."""
        faces = self.faces_of(identity_id)
        if not faces:
            raise KeyError(f"no face with identity {identity_id}")
        for f in faces:
            if f.expression_id == 0:
                return f
        return faces[0]

    def max_identity(self) -> int:
        return max(f.identity_id for f in self.faces)


def compute_normals(cloud: PointCloud, k: int) -> PointCloud:
    """Estimate unit normals by PCA over each point's k nearest neighbors.

    The normal is the smallest-eigenvalue eigenvector of the neighborhood
    covariance, flipped so n_z >= 0 (sensor at z = +inf). Neighborhoods of
    rank < 2 fall back to +z and raise a DegenerateNeighborhood warning.
    """
    if k < 3:
        raise ValueError("k must be >= 3")
    pts = cloud.points
    if len(pts) < k + 1:
        raise ValueError(f"need at least k+1 = {k + 1} points, have {len(pts)}")

    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k + 1)  # exact search; self is included
    neigh = pts[idx]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    covs = np.einsum("nki,nkj->nij", centered, centered) / k

    eigvals, eigvecs = np.linalg.eigh(covs)
    normals = eigvecs[:, :, 0]

    # rank < 2: second eigenvalue vanishes relative to the largest
    scale = np.maximum(eigvals[:, 2], 1e-300)
    degenerate = eigvals[:, 1] <= 1e-12 * scale
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} neighborhoods have rank < 2; using +z",
            DegenerateNeighborhood,
        )
        normals[degenerate] = (0.0, 0.0, 1.0)

    flip = normals[:, 2] < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals)


def to_spherical(normal) -> tuple[float, float]:
    """Unit vector -> (azimuth theta, elevation phi) in radians.

    theta = atan2(n_y, n_x), phi = asin(n_z). At the poles theta is 0.
    """
    n = np.asarray(normal, dtype=np.float64)
    norm = np.linalg.norm(n)
    if abs(norm - 1.0) > _UNIT_TOL:
        raise NotUnit(f"norm {norm} deviates from 1 by more than {_UNIT_TOL}")
    theta = float(np.arctan2(n[1], n[0]))
    phi = float(np.arcsin(np.clip(n[2], -1.0, 1.0)))
    return theta, phi


def from_spherical(theta: float, phi: float) -> np.ndarray:
    c = np.cos(phi)
    return np.array([c * np.cos(theta), c * np.sin(theta), np.sin(phi)])


def spherical_angles(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized to_spherical over an (n, 3) array of unit normals."""
    n = np.asarray(normals, dtype=np.float64)
    norms = np.linalg.norm(n, axis=1)
    if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
        raise NotUnit("normals deviate from unit length by more than 1e-3")
    theta = np.arctan2(n[:, 1], n[:, 0])
    phi = np.arcsin(np.clip(n[:, 2], -1.0, 1.0))
    return theta, phi


def check_rotation(rotation) -> np.ndarray:
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise NotRotation(f"rotation must be 3x3, got {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
        raise NotRotation("R^T R deviates from identity by more than 1e-9")
    if np.linalg.det(r) < 0:
        raise NotRotation("det R must be +1 (reflections rejected)")
    return r


def apply_rigid(cloud: PointCloud, rotation, translation) -> PointCloud:
    """Rotate points and normals, then translate the points only."""
    r = check_rotation(rotation)
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    pts = cloud.points @ r.T + t
    nrm = None
    if cloud.normals is not None:
        nrm = cloud.normals @ r.T
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm)


def with_cloud(face: CorrespondedFace, cloud: PointCloud) -> CorrespondedFace:
    return replace(face, cloud=cloud)
