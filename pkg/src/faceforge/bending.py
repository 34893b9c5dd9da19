"""Thin-plate-spline bending energy between corresponded faces.

The dissimilarity between two faces is the symmetrized bending energy
(gamma_ij + gamma_ji) / 2, where gamma_ij is the energy needed to warp
face i onto face j. gamma is a quadratic form in the target coordinates:

    gamma = x^T B x + y^T B y + z^T B z

with B the upper-left block of the inverse of the bordered kernel system
[[K, S], [S^T, 0]] built from the source face. K(a, b) = r^2 log r on
pairwise distances r (natural log), S = [1 | x | y | z]. Affine maps of
the source are in B's null space, so gamma is zero for rigid and affine
deformations and grows with non-affine warp.

Building B is an O(P'^3) solve, so faces are subsampled to P' shared
vertex indices (farthest-point rule) before any pair is compared.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import get_lapack_funcs, lu_factor, lu_solve
from scipy.spatial.distance import pdist, squareform

from .core import CorrespondedFace, FaceSet
from .errors import (
    DuplicatePoints,
    IndexMismatch,
    NotEnoughPairs,
    SingularSystem,
)

COND_LIMIT = 1e14
DEFAULT_SUBSAMPLE = 500


@dataclass(frozen=True)
class BendingMatrix:
    """Quadratic form of TPS bending energy for one source face."""

    B: np.ndarray
    source_indices: np.ndarray
    source_identity: int
    source_expression: int
    stabilized: bool = False

    @property
    def size(self) -> int:
        return self.B.shape[0]


@dataclass
class ShapeDistanceMatrix:
    """Symmetric nonnegative distances over a face set, stored once as the
    condensed upper triangle (row-major i < j)."""

    condensed: np.ndarray
    face_ids: list[int]
    subsample_indices: np.ndarray
    failed_pairs: int = 0

    def __post_init__(self):
        n = len(self.face_ids)
        expected = n * (n - 1) // 2
        if len(self.condensed) != expected:
            raise ValueError(f"condensed length {len(self.condensed)} != C({n},2)")

    @property
    def n(self) -> int:
        return len(self.face_ids)

    def _flat(self, i: int, j: int) -> int:
        if i == j:
            raise IndexError("diagonal is implicitly zero")
        if i > j:
            i, j = j, i
        n = self.n
        return n * i - i * (i + 1) // 2 + (j - i - 1)

    def get(self, i: int, j: int) -> float:
        if i == j:
            return 0.0
        return float(self.condensed[self._flat(i, j)])

    def to_dense(self) -> np.ndarray:
        return squareform(self.condensed)


@dataclass(frozen=True)
class PairSelection:
    pairs: list[tuple[int, int]]
    mode: str
    m: int

    def __post_init__(self):
        if self.mode not in ("most_dissimilar", "most_similar"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(set(self.pairs)) != len(self.pairs):
            raise ValueError("duplicate pairs in selection")
        for i, j in self.pairs:
            if not i < j:
                raise ValueError(f"pair ({i}, {j}) not in i < j order")


def tps_kernel(points: np.ndarray) -> np.ndarray:
    """K(a, b) = r^2 log r on pairwise distances, 0 on the diagonal."""
    d = squareform(pdist(points))
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(d > 0.0, d * d * np.log(d, where=d > 0.0), 0.0)
    return k


def _bordered_system(points: np.ndarray, affine_points: np.ndarray) -> np.ndarray:
    p = len(points)
    s = np.hstack([np.ones((p, 1)), affine_points])
    l = np.zeros((p + 4, p + 4))
    l[:p, :p] = tps_kernel(points)
    l[:p, p:] = s
    l[p:, :p] = s.T
    return l


def bending_matrix(source: CorrespondedFace, subsample,
                   affine_from: np.ndarray | None = None,
                   _stabilize: bool = False) -> BendingMatrix:
    """Build the bending matrix of a source face over the given vertex indices.

    `affine_from` overrides the coordinates used for the affine block S
    (default: the source's own, the standard TPS construction).

    Raises DuplicatePoints for coincident subsampled vertices and
    SingularSystem when the bordered system's condition estimate exceeds
    1e14; callers may retry with diagonal stabilization.
    """
    idx = np.asarray(subsample, dtype=np.intp)
    if len(idx) < 5:
        raise ValueError("subsample must contain at least 5 indices")
    if idx.max() >= source.vertex_count or idx.min() < 0:
        raise IndexMismatch("subsample index outside the source face")
    pts = source.coords()[idx]

    d = pdist(pts)
    if d.min() < 1e-9:
        raise DuplicatePoints("two subsampled vertices coincide within 1e-9 mm")

    aff = pts if affine_from is None else np.asarray(affine_from, dtype=np.float64)
    if aff.shape != pts.shape:
        raise IndexMismatch("affine_from must match the subsampled shape")

    l = _bordered_system(pts, aff)
    if _stabilize:
        eps = 1e-10 * np.abs(l[:len(pts), :len(pts)]).mean()
        l[np.diag_indices(len(pts))] += eps

    anorm = np.abs(l).sum(axis=0).max()  # 1-norm, for the condition estimate
    lu, piv = lu_factor(l)
    gecon = get_lapack_funcs("gecon", (l,))
    rcond, _ = gecon(lu, anorm)
    if rcond <= 0 or 1.0 / rcond > COND_LIMIT:
        raise SingularSystem(
            f"bordered TPS system condition ~{0 if rcond <= 0 else 1 / rcond:.3g}"
            " exceeds 1e14; resample or retry with stabilization"
        )

    p = len(pts)
    rhs = np.zeros((p + 4, p))
    rhs[:p, :p] = np.eye(p)
    b = lu_solve((lu, piv), rhs)[:p, :]
    return BendingMatrix(
        B=b,
        source_indices=idx,
        source_identity=source.identity_id,
        source_expression=source.expression_id,
        stabilized=_stabilize,
    )


def bending_energy(bm: BendingMatrix, target: CorrespondedFace) -> float:
    """gamma = x^T B x + y^T B y + z^T B z on the target's subsampled
    coordinates; tiny negatives from rounding are clamped to 0."""
    if bm.source_indices.max() >= target.vertex_count:
        raise IndexMismatch("subsample indices exceed the target vertex count")
    coords = target.coords()[bm.source_indices]
    g = float(sum(coords[:, k] @ bm.B @ coords[:, k] for k in range(3)))
    return max(g, 0.0)


def shape_distance(face_i: CorrespondedFace, face_j: CorrespondedFace,
                   subsample, affine_from_target: bool = False) -> float:
    """Symmetrized bending energy (gamma_ij + gamma_ji) / 2."""
    if face_i.vertex_count != face_j.vertex_count:
        raise IndexMismatch("faces disagree on vertex count")
    idx = np.asarray(subsample, dtype=np.intp)
    aff_i = face_j.coords()[idx] if affine_from_target else None
    aff_j = face_i.coords()[idx] if affine_from_target else None
    g_ij = bending_energy(bending_matrix(face_i, idx, affine_from=aff_i), face_j)
    g_ji = bending_energy(bending_matrix(face_j, idx, affine_from=aff_j), face_i)
    return (g_ij + g_ji) / 2.0


def farthest_point_indices(points: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Greedy farthest-point subsample; the seed picks the starting vertex."""
    n = len(points)
    if count >= n:
        return np.arange(n, dtype=np.intp)
    rng = np.random.default_rng(seed)
    chosen = np.empty(count, dtype=np.intp)
    chosen[0] = rng.integers(n)
    dist = np.linalg.norm(points - points[chosen[0]], axis=1)
    for k in range(1, count):
        chosen[k] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(points - points[chosen[k]], axis=1))
    return np.sort(chosen)


def pairwise_distances(face_set: FaceSet, subsample_size: int = DEFAULT_SUBSAMPLE,
                       seed: int = 0) -> ShapeDistanceMatrix:
    """All C(N, 2) shape distances over a face set.

    One shared farthest-point index set (drawn on the mean representative
    face from the seed) is reused for every pair so distances are
    comparable. The neutral scan of each identity is used when present.
    Pairs whose bending system stays singular after stabilization get
    D = +inf and are counted in `failed_pairs`.
    """
    ids = face_set.identity_ids()
    if len(ids) < 2:
        raise ValueError("need at least two identities")
    reps = [face_set.representative(i) for i in ids]

    mean_face = np.mean([f.coords() for f in reps], axis=0)
    idx = farthest_point_indices(mean_face, subsample_size, seed)

    mats: list[BendingMatrix | None] = []
    for face in reps:
        try:
            mats.append(_bending_matrix_with_retry(face, idx))
        except (SingularSystem, DuplicatePoints) as exc:
            warnings.warn(f"identity {face.identity_id}: {exc}")
            mats.append(None)

    coords = np.stack([f.coords()[idx] for f in reps])  # (N, P', 3)
    n = len(ids)
    gammas = np.full((n, n), np.inf)
    for i, bm in enumerate(mats):
        if bm is None:
            continue
        row = np.zeros(n)
        for axis in range(3):
            c = coords[:, :, axis]  # (N, P')
            row += ((c @ bm.B) * c).sum(axis=1)
        gammas[i] = row

    condensed = np.empty(n * (n - 1) // 2)
    failed = 0
    pos = 0
    for i in range(n):
        for j in range(i + 1, n):
            g = (gammas[i, j] + gammas[j, i]) / 2.0
            if not np.isfinite(g):
                failed += 1
                condensed[pos] = np.inf
            else:
                condensed[pos] = max(g, 0.0)
            pos += 1
    if failed:
        warnings.warn(f"{failed} pairs failed and were recorded as +inf")
    return ShapeDistanceMatrix(condensed, ids, idx, failed_pairs=failed)


def _bending_matrix_with_retry(face: CorrespondedFace, idx) -> BendingMatrix:
    try:
        return bending_matrix(face, idx)
    except SingularSystem:
        warnings.warn(
            f"identity {face.identity_id}: singular bending system, "
            "retrying with diagonal stabilization"
        )
        return bending_matrix(face, idx, _stabilize=True)


def select_pairs(dmat: ShapeDistanceMatrix, m: int, mode: str) -> PairSelection:
    """The m most dissimilar (largest D) or most similar (smallest D) pairs.

    Non-finite entries are excluded from the pool; ties break in
    lexicographic (i, j) order for determinism.
    """
    n = dmat.n
    pairs_i, pairs_j = np.triu_indices(n, k=1)
    values = dmat.condensed
    finite = np.isfinite(values)
    pairs_i, pairs_j, values = pairs_i[finite], pairs_j[finite], values[finite]
    if m > len(values):
        raise NotEnoughPairs(f"requested {m} pairs, pool has {len(values)}")

    key = -values if mode == "most_dissimilar" else values
    if mode not in ("most_dissimilar", "most_similar"):
        raise ValueError(f"unknown mode {mode!r}")
    order = np.lexsort((pairs_j, pairs_i, key))
    chosen = order[:m]
    pairs = [(int(pairs_i[k]), int(pairs_j[k])) for k in chosen]
    return PairSelection(pairs=pairs, mode=mode, m=m)


# --- serialization ------------------------------------------------------------

_MAGIC = b"FFDM"


def save_distance_matrix(dmat: ShapeDistanceMatrix, path) -> None:
    """Binary triangle (magic, u32 N, float64 upper triangle) + JSON sidecar."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", dmat.n))
        fh.write(dmat.condensed.astype("<f8").tobytes())
    sidecar = {
        "face_ids": [int(i) for i in dmat.face_ids],
        "subsample_indices": [int(i) for i in dmat.subsample_indices],
        "failed_pairs": int(dmat.failed_pairs),
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_distance_matrix(path) -> ShapeDistanceMatrix:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: bad magic")
        (n,) = struct.unpack("<I", fh.read(4))
        condensed = np.frombuffer(fh.read(8 * n * (n - 1) // 2), dtype="<f8")
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    return ShapeDistanceMatrix(
        condensed.copy(),
        sidecar["face_ids"],
        np.asarray(sidecar["subsample_indices"], dtype=np.intp),
        failed_pairs=sidecar.get("failed_pairs", 0),
    )
