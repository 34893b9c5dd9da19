"""Release gate: one test per contract criterion, at its stated tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one line per
criterion.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from faceforge.bending import (
    bending_energy,
    bending_matrix,
    pairwise_distances,
    select_pairs,
)
from faceforge.cli import main as cli_main
from faceforge.core import CorrespondedFace, FaceSet, PointCloud, compute_normals
from faceforge.demo import make_demo_face, write_demo_input
from faceforge.evalharness import match_all, cmc, roc, openness, open_world_eval
from faceforge.geomimage import GridSpec, fit_grid_surface, make_three_channel
from faceforge.kernelstats import DepthField, keypoint_density, window_variance_stats
from faceforge.synthesis import interpolate_pair
from faceforge.views import CameraPose, camera_poses, hidden_point_removal, render_view

from conftest import head_scan, random_face
from oracles import (
    oracle_bending_matrix,
    oracle_cmc,
    oracle_energy,
    oracle_open_world,
    oracle_roc,
)


@contextmanager
def criterion(name, budget_s=None):
    started = time.monotonic()
    try:
        yield
    except Exception:
        print(f"[FAIL] {name}")
        raise
    elapsed = time.monotonic() - started
    if budget_s is not None:
        assert elapsed < budget_s, f"{name}: {elapsed:.1f}s over {budget_s}s budget"
    print(f"[PASS] {name} ({elapsed:.1f}s)")


def test_tps_correctness():
    with criterion("TPS correctness (null space, zero self-energy, oracle)",
                   budget_s=60):
        rng = np.random.default_rng(42)
        for trial in range(100):
            face = random_face(rng, 200, identity=trial)
            bm = bending_matrix(face, np.arange(200))
            pts = face.coords()
            s = np.hstack([np.ones((200, 1)), pts])
            assert np.linalg.norm(bm.B @ s) / np.linalg.norm(bm.B) <= 1e-6
            g = bending_energy(bm, face)
            scale = np.linalg.norm(bm.B) * np.linalg.norm(pts) ** 2
            assert g <= 1e-8 * scale
        for trial in range(10):
            pts = rng.uniform(-10, 10, (5, 3))
            src = CorrespondedFace(PointCloud(pts), identity_id=0)
            tgt_pts = pts + rng.normal(0, 0.5, (5, 3))
            tgt = CorrespondedFace(PointCloud(tgt_pts), identity_id=1)
            got = bending_energy(bending_matrix(src, np.arange(5)), tgt)
            want = oracle_energy(oracle_bending_matrix(pts), tgt_pts)
            assert got == pytest.approx(max(want, 0.0), abs=1e-9)


def test_shape_distance_contract():
    with criterion("shape distance symmetry, zero diagonal, C(100,2) count"):
        rng = np.random.default_rng(7)
        faces = [random_face(rng, 60, identity=i) for i in range(100)]
        dmat = pairwise_distances(FaceSet(faces), subsample_size=40, seed=0)
        assert len(dmat.condensed) == 4950  # C(100, 2)
        dense = dmat.to_dense()
        np.testing.assert_array_equal(dense, dense.T)  # bit-exact symmetry
        assert np.all(np.diag(dense) == 0.0)
        assert np.all(dense >= 0.0)


def test_pair_selection_matches_exhaustive_sort():
    with criterion("pair selection equals exhaustive sort (ties included)"):
        from scipy.spatial.distance import squareform
        from faceforge.bending import ShapeDistanceMatrix

        rng = np.random.default_rng(3)
        for trial in range(30):
            n = int(rng.integers(3, 11))
            iu = np.triu_indices(n, 1)
            vals = rng.integers(0, 4, len(iu[0])).astype(float)
            dense = np.zeros((n, n))
            dense[iu] = vals
            dense += dense.T
            dmat = ShapeDistanceMatrix(squareform(dense), list(range(n)),
                                       np.arange(5))
            for mode, sign in (("most_dissimilar", -1), ("most_similar", 1)):
                m = int(rng.integers(1, len(vals) + 1))
                got = select_pairs(dmat, m, mode).pairs
                pool = sorted(((dense[i, j], (i, j)) for i, j in zip(*iu)),
                              key=lambda t: (sign * t[0], t[1]))
                assert got == [p for _, p in pool[:m]]


def test_midpoint_synthesis_exactness():
    with criterion("midpoint synthesis: idempotence, equidistance, determinism"):
        rng = np.random.default_rng(11)
        face = random_face(rng, 300, file_precision=True)
        np.testing.assert_array_equal(interpolate_pair(face, face).coords(),
                                      face.coords())
        for _ in range(10):
            a = random_face(rng, 300, identity=0, file_precision=True)
            b = random_face(rng, 300, identity=1, file_precision=True)
            child = interpolate_pair(a, b)
            da = np.linalg.norm(child.coords() - a.coords(), axis=1)
            db = np.linalg.norm(b.coords() - child.coords(), axis=1)
            np.testing.assert_array_equal(da, db)
            again = interpolate_pair(a, b)
            assert child.coords().tobytes() == again.coords().tobytes()


def test_camera_layout():
    with criterion("camera layout: 15 poses, 15-degree grid, +/-75 excluded"):
        poses = camera_poses("paper15")
        assert len(poses) == 15
        assert len({(p.longitude, p.latitude) for p in poses}) == 15
        for p in poses:
            assert p.longitude % 15 == 0 and p.latitude % 15 == 0
            assert abs(p.longitude) != 75
            assert -90 <= p.longitude <= 90 and -30 <= p.latitude <= 30
        assert any(p.longitude == 0 and p.latitude == 0 for p in poses)


def test_hidden_point_removal_contract():
    with criterion("HPR: sphere cap fraction, convex patch, profile shrink"):
        rng = np.random.default_rng(5)
        v = rng.normal(size=(10_000, 3))
        pts = v / np.linalg.norm(v, axis=1, keepdims=True)
        visible = hidden_point_removal(PointCloud(pts), (0.0, 0.0, 10.0))
        frac = len(visible) / len(pts)
        assert 0.45 <= frac <= 0.55
        exact = (pts[:, 2] >= 0.1).mean()  # analytic visible cap z >= 1/d
        assert abs(frac - exact) <= 0.05

        g = np.linspace(-1, 1, 60)
        xx, yy = np.meshgrid(g, g)
        keep = xx ** 2 + yy ** 2 < 1
        dome = PointCloud(np.column_stack([
            60 * xx[keep], 60 * yy[keep],
            40 * np.sqrt(1 - (xx[keep] ** 2 + yy[keep] ** 2) * 0.8)]))
        view = render_view(dome, CameraPose(0, 0))
        assert len(view.visible_indices) / len(dome) >= 0.95

        scan = head_scan()
        frontal = render_view(scan, CameraPose(0, 0))
        profile = render_view(scan, CameraPose(90, 0))
        assert len(profile.visible_indices) < len(frontal.visible_indices)


def test_grid_fitting_contract():
    with criterion("grid fitting: affine exactness, noise RMS, residual"):
        rng = np.random.default_rng(9)
        n = 32
        xy = rng.uniform(0, n - 1, (2 * n * n, 2))
        plane = 2.0 * xy[:, 0] + 3.0 * xy[:, 1] + 1.0
        ii, jj = np.meshgrid(np.arange(float(n)), np.arange(float(n)),
                             indexing="ij")
        expected = 2.0 * jj + 3.0 * ii + 1.0
        for lam in (1e-4, 1e-2, 1.0, 100.0):
            spec = GridSpec(width=n, height=n, spacing=1.0, origin=(0.0, 0.0),
                            smoothness=lam)
            fit = fit_grid_surface(np.column_stack([xy, plane]), spec)
            assert np.abs(fit.grid - expected).max() < 1e-6
            assert fit.relative_residual <= 1e-8

        sigma = 0.1
        noisy = plane + rng.normal(0, sigma, len(plane))
        spec = GridSpec(width=n, height=n, spacing=1.0, origin=(0.0, 0.0),
                        smoothness=1e-1)
        fit = fit_grid_surface(np.column_stack([xy, noisy]), spec)
        rms = float(np.sqrt(np.mean((fit.grid - expected) ** 2)))
        assert rms < sigma


def _rendered_view(identity, pose, n_grid=36, seed=0):
    face = make_demo_face(identity, 0, n_grid=n_grid, seed=seed)
    scan = compute_normals(face.cloud, k=10)
    return render_view(scan, pose, source_ref=f"id{identity}")


def test_image_contract():
    with criterion("image contract: 224 crop to 160x160x3 u8, reproducible"):
        face = make_demo_face(0, 0, n_grid=90, seed=2)
        scan = compute_normals(face.cloud, k=10)
        view = render_view(scan, CameraPose(0, 0), source_ref="id0")
        spec = GridSpec.cover(view.cloud.points, spacing=0.75)
        blobs = []
        for _ in range(2):
            image = make_three_channel(view, spec, crop=224, out_size=160)
            assert image.channels.shape == (160, 160, 3)
            assert image.channels.dtype == np.uint8
            assert image.channels.min() >= 0 and image.channels.max() <= 255
            assert np.all(image.channels[~image.mask] == 0)
            blobs.append(image.channels.tobytes())
        assert blobs[0] == blobs[1]

        # constant-depth input maps to an all-zero depth channel
        n = 16
        ii, jj = np.meshgrid(np.arange(float(n)), np.arange(float(n)),
                             indexing="ij")
        pts = np.column_stack([jj.ravel(), ii.ravel(), np.full(n * n, 4.0)])
        normals = np.tile([0.0, 0.0, 1.0], (n * n, 1))
        from faceforge.views import ViewCloud
        flat = ViewCloud(cloud=PointCloud(pts, normals), pose=CameraPose(0, 0),
                         visible_indices=np.arange(n * n), source_ref="flat")
        spec = GridSpec(width=n, height=n, spacing=1.0, origin=(0.0, 0.0))
        image = make_three_channel(flat, spec, crop=n, out_size=n,
                                   nosetip_override=(8.0, 8.0, 4.0))
        assert np.all(image.channels == 0)


def test_kernel_stats_contract():
    with criterion("kernel stats: rendered corpus direction, kappa monotone, "
                   "analytic cases"):
        poses = camera_poses([(lon, 0) for lon in (-30, -15, 0, 15, 30)]) \
            + camera_poses([(0, lat) for lat in (-15, 15)])
        fields = []
        count = 0
        for identity in range(15):
            for pose in poses:
                if count >= 100:
                    break
                view = _rendered_view(identity, pose, seed=identity)
                spec = GridSpec.cover(view.cloud.points, spacing=3.0)
                image = make_three_channel(view, spec, crop=48, out_size=48)
                fields.append(DepthField.from_image3c(image))
                count += 1
        assert len(fields) == 100

        report = window_variance_stats(fields, sizes=(3, 7))
        assert report.mean_variance[7] > report.mean_variance[3]

        densities = [keypoint_density(fields[:10], sizes=(9,), kappa=k)
                     .keypoints_per_kernel[9]
                     for k in (0.0, 0.2, 0.4, 0.6, 0.8)]
        assert all(a >= b for a, b in zip(densities, densities[1:]))
        # kappa = 0 qualifies every window that passes the validity floor
        full = DepthField(np.arange(144.0).reshape(12, 12),
                          np.ones((12, 12), dtype=bool))
        assert keypoint_density([full], sizes=(3,),
                                kappa=0.0).keypoints_per_kernel[3] == 1.0

        flat = DepthField(np.full((12, 12), 5.0), np.ones((12, 12), dtype=bool))
        var_flat = window_variance_stats([flat], sizes=(3,)).mean_variance[3]
        assert var_flat == 0.0
        c = 3.0  # one-window symmetric paraboloid: sigma1 == sigma2
        ii, jj = np.meshgrid(np.arange(7.0), np.arange(7.0), indexing="ij")
        bump = 1e-3 * ((ii - c) ** 2 + (jj - c) ** 2)
        para = DepthField(bump, np.ones((7, 7), dtype=bool))
        assert keypoint_density([para], sizes=(7,),
                                kappa=0.05).keypoints_per_kernel[7] == 0.0


def test_eval_harness_contract():
    with criterion("eval harness vs brute-force oracles, openness constants",
                   budget_s=30):
        rng = np.random.default_rng(13)
        n_ids, per_id = 50, 5
        subjects = [f"s{i}" for i in range(n_ids)]
        gallery = rng.normal(size=(n_ids, 64))
        probes = np.repeat(gallery, per_id, axis=0) \
            + rng.normal(0, 0.9, (n_ids * per_id, 64))
        probe_subjects = [s for s in subjects for _ in range(per_id)]
        scores = match_all(probes, gallery, probe_subjects, subjects)

        curve = cmc(scores)
        np.testing.assert_array_equal(
            curve, oracle_cmc(scores.scores, probe_subjects, subjects))
        assert np.all(np.diff(curve) >= 0) and curve[-1] == 1.0

        thresholds, far, vr = roc(scores)
        true_cols = [subjects.index(s) for s in probe_subjects]
        genuine = [scores.scores[i, c] for i, c in enumerate(true_cols)]
        impostor = [scores.scores[i, j] for i in range(len(probe_subjects))
                    for j in range(n_ids) if j != true_cols[i]]
        far_o, vr_o = oracle_roc(genuine, impostor, thresholds)
        np.testing.assert_array_equal(far, far_o)
        np.testing.assert_array_equal(vr, vr_o)

        assert openness(1581, 1853) == pytest.approx(0.040, abs=0.005)
        assert openness(261, 1853) == pytest.approx(0.503, abs=0.005)

        # open world vs oracle, with 10 unknown identities
        unknown = set(subjects[-10:])
        keep = [i for i, s in enumerate(subjects) if s not in unknown]
        ow_scores = match_all(
            probes, gallery[keep],
            [None if s in unknown else s for s in probe_subjects],
            [subjects[i] for i in keep])
        tau = np.linspace(0, 1, 11)
        _, ow_curve, _ = open_world_eval(ow_scores, None, tau_grid=tau)
        expected = oracle_open_world(ow_scores.scores, ow_scores.probe_subjects,
                                     ow_scores.gallery_subjects, tau)
        np.testing.assert_array_equal(ow_curve, expected)

        # tau = 1 with no unknowns reduces to closed-world rank-1
        _, closed_curve, _ = open_world_eval(scores, None, tau_grid=[1.0])
        assert closed_curve[0] == curve[0]


def _run_pipeline(root, outdir, seed):
    config = root / "run.toml"
    code = cli_main(["all", "--config", str(config), "--seed", str(seed),
                     "--out", str(outdir)])
    assert code == 0


def _tree_bytes(base):
    out = {}
    for path in sorted(base.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(base))] = path.read_bytes()
    return out


def test_end_to_end_determinism(tmp_path):
    with criterion("end-to-end determinism on a 10-identity input",
                   budget_s=600):
        write_demo_input(tmp_path / "input", n_identities=10,
                         expressions=(0, 1), n_grid=28, seed=21)
        (tmp_path / "run.toml").write_text("""
[io]
faces_manifest = "input/faces.json"

[distances]
subsample = 100

[pairs]
count = 3
mode = "most_dissimilar"

[synth]
target_identities = 3

[views]
layout = "paper15"
radius = 600.0
normals_k = 10

[images]
spacing = 4.0
crop = 40
out_size = 32

[kstats]
sizes = [3, 7]
""")
        _run_pipeline(tmp_path, tmp_path / "out_a", seed=77)
        _run_pipeline(tmp_path, tmp_path / "out_b", seed=77)
        tree_a = _tree_bytes(tmp_path / "out_a" / "artifacts")
        tree_b = _tree_bytes(tmp_path / "out_b" / "artifacts")
        assert tree_a.keys() == tree_b.keys()
        mismatched = [k for k in tree_a if tree_a[k] != tree_b[k]]
        assert mismatched == []
        assert len(tree_a) > 100  # the run actually produced a corpus
