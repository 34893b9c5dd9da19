import numpy as np
import pytest

from faceforge.core import CorrespondedFace, PointCloud


def random_face(rng, n_vertices=200, identity=0, expression=0, scale=80.0,
                file_precision=False):
    """Random corresponded face; `file_precision` snaps coords to float32."""
    pts = rng.uniform(-scale, scale, (n_vertices, 3))
    if file_precision:
        pts = pts.astype(np.float32).astype(np.float64)
    return CorrespondedFace(cloud=PointCloud(pts), identity_id=identity,
                            expression_id=expression)


def random_rotation(rng):
    """Uniform-ish rotation from a QR decomposition, det +1."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def head_scan(n=4000, seed=0):
    """Half-ellipsoid 'head' with a nose bump, facing +z."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1, 1, n)
    v = rng.uniform(-1, 1, n)
    keep = u ** 2 + v ** 2 < 1
    u, v = u[keep], v[keep]
    x = 75.0 * u
    y = 95.0 * v
    z = 60.0 * np.sqrt(1.0 - u ** 2 - v ** 2)
    z += 16.0 * np.exp(-((u / 0.15) ** 2 + (v / 0.25) ** 2))
    return PointCloud(np.column_stack([x, y, z]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
