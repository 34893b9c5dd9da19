"""Seeded synthetic face sets for demos and desk-scale pipeline runs.

Faces are smooth dome + nose surfaces sampled on a fixed parameter grid,
so all faces of a set are in dense correspondence by construction.
Identity is a seeded mixture of Gaussian bumps; expressions displace the
mouth region. Coordinates are snapped to float32 (scanner file precision).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import CorrespondedFace, FaceSet, PointCloud
from .io import save_cloud


def _base_grid(n: int):
    u, v = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n), indexing="xy")
    return u.ravel(), v.ravel()


def make_demo_face(identity: int, expression: int = 0, n_grid: int = 40,
                   seed: int = 0) -> CorrespondedFace:
    u, v = _base_grid(n_grid)
    x = 80.0 * u
    y = 100.0 * v
    z = 40.0 * np.exp(-(u ** 2 + v ** 2))
    z += 18.0 * np.exp(-((u / 0.18) ** 2 + ((v + 0.05) / 0.30) ** 2))  # nose

    rng = np.random.default_rng(np.random.SeedSequence([seed, identity]))
    for _ in range(6):
        cu, cv = rng.uniform(-0.9, 0.9, 2)
        amp = rng.uniform(-4.0, 4.0)
        width = rng.uniform(0.2, 0.6)
        z += amp * np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / width ** 2)

    if expression:
        z += 2.5 * expression * np.exp(-((u / 0.45) ** 2 + ((v + 0.55) / 0.18) ** 2))

    pts = np.column_stack([x, y, z]).astype(np.float32).astype(np.float64)
    return CorrespondedFace(cloud=PointCloud(pts), identity_id=identity,
                            expression_id=expression)


def make_demo_face_set(n_identities: int, expressions=(0,), n_grid: int = 40,
                       seed: int = 0) -> FaceSet:
    faces = [make_demo_face(i, e, n_grid, seed)
             for i in range(n_identities) for e in expressions]
    return FaceSet(faces)


def write_demo_input(outdir, n_identities: int = 10, expressions=(0, 1),
                     n_grid: int = 40, seed: int = 0) -> Path:
    """PLY files plus the faces.json manifest the CLI ingests."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_identities):
        for e in expressions:
            face = make_demo_face(i, e, n_grid, seed)
            name = f"id{i:04d}_e{e:02d}.ply"
            save_cloud(face.cloud, outdir / name)
            records.append({"path": name, "identity": i, "expression": e})
    manifest = outdir / "faces.json"
    with open(manifest, "w") as fh:
        json.dump({"faces": records}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
