import numpy as np
import pytest

from faceforge.core import PointCloud
from faceforge.errors import CropOutOfBounds, EmptyCentralRegion, NoSamples
from faceforge.geomimage import (
    FaceImage3C,
    GridSpec,
    bilinear_resize,
    detect_nosetip,
    fit_grid_surface,
    load_image3c,
    make_three_channel,
    normalize_u8,
    save_image3c,
)
from faceforge.views import CameraPose, ViewCloud


def grid_samples(n, value_fn, jitter=None, seed=0):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, n - 1, (6 * n * n // 4, 2))
    v = value_fn(xy[:, 0], xy[:, 1])
    if jitter:
        v = v + rng.normal(0, jitter, len(v))
    return np.column_stack([xy, v])


class TestFitGridSurface:
    def test_affine_reproduced_at_several_lambdas(self):
        # analytic plane as oracle; the roughness penalty vanishes on it
        spec_base = dict(width=32, height=32, spacing=1.0, origin=(0.0, 0.0))
        samples = grid_samples(32, lambda x, y: 2 * x + 3 * y + 1)
        ii, jj = np.meshgrid(np.arange(32.), np.arange(32.), indexing="ij")
        plane = 2 * jj + 3 * ii + 1
        for lam in (1e-4, 1e-2, 1.0, 100.0):
            fit = fit_grid_surface(samples, GridSpec(smoothness=lam, **spec_base))
            assert np.abs(fit.grid - plane).max() < 1e-6
            assert fit.relative_residual <= 1e-8

    def test_constant_samples(self):
        spec = GridSpec(width=16, height=16, spacing=1.0, origin=(0.0, 0.0))
        samples = grid_samples(16, lambda x, y: np.full_like(x, 7.0))
        fit = fit_grid_surface(samples, spec)
        assert np.abs(fit.grid - 7.0).max() < 1e-9

    def test_noisy_plane_rms_below_noise(self):
        # Monte Carlo against the noiseless plane
        spec = GridSpec(width=24, height=24, spacing=1.0, origin=(0.0, 0.0),
                        smoothness=1e-1)
        sigma = 0.1
        samples = grid_samples(24, lambda x, y: 0.5 * x - 0.25 * y + 2,
                               jitter=sigma, seed=4)
        fit = fit_grid_surface(samples, spec)
        ii, jj = np.meshgrid(np.arange(24.), np.arange(24.), indexing="ij")
        plane = 0.5 * jj - 0.25 * ii + 2
        rms = np.sqrt(np.mean((fit.grid - plane) ** 2))
        assert rms < sigma

    def test_penalty_monotone_in_lambda(self):
        spec_base = dict(width=20, height=20, spacing=1.0, origin=(0.0, 0.0))
        samples = grid_samples(20, lambda x, y: np.sin(x / 3.0) * np.cos(y / 4.0),
                               seed=2)
        roughness = []
        for lam in (1e-3, 1e-1, 10.0):
            fit = fit_grid_surface(samples, GridSpec(smoothness=lam, **spec_base))
            roughness.append(fit.penalty / lam)  # ||second diffs||^2 alone
        assert roughness[0] >= roughness[1] >= roughness[2]

    def test_no_samples(self):
        spec = GridSpec(width=8, height=8, spacing=1.0, origin=(0.0, 0.0))
        with pytest.raises(NoSamples):
            fit_grid_surface(np.array([[100.0, 100.0, 1.0]]), spec)

    def test_support_mask_marks_sampled_region(self):
        spec = GridSpec(width=16, height=16, spacing=1.0, origin=(0.0, 0.0))
        samples = np.array([[2.0, 2.0, 1.0], [2.5, 2.5, 1.0], [3.0, 2.0, 1.0],
                            [12.0, 12.0, 5.0]])
        fit = fit_grid_surface(samples, spec)
        assert fit.mask[2, 2] and fit.mask[12, 12]
        assert not fit.mask[8, 2] and not fit.mask[0, 15]


class TestDetectNosetip:
    def test_unique_global_max(self, rng):
        pts = rng.uniform(-50, 50, (200, 3))
        pts[:, 2] = np.clip(pts[:, 2], None, 10.0)
        pts[17] = (0.0, 0.0, 99.0)
        np.testing.assert_array_equal(detect_nosetip(PointCloud(pts)), pts[17])

    def test_override_returned_verbatim(self, rng):
        pts = rng.uniform(-50, 50, (50, 3))
        nose = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(
            detect_nosetip(PointCloud(pts), override=nose), nose)

    def test_central_bump_beats_boundary_peak(self):
        g = np.linspace(-1, 1, 41)
        xx, yy = np.meshgrid(g, g)
        z = 10 * np.exp(-(xx ** 2 + yy ** 2) / 0.05)          # central bump
        z += 30 * np.exp(-((xx - 1) ** 2 + yy ** 2) / 0.01)   # boundary spike
        pts = np.column_stack([100 * xx.ravel(), 100 * yy.ravel(), z.ravel()])
        nose = detect_nosetip(PointCloud(pts))
        assert abs(nose[0]) < 10 and abs(nose[1]) < 10

    def test_empty_central_region_falls_back(self):
        # two distant clusters leave the centroid window empty
        a = np.random.default_rng(0).uniform(-1, 1, (20, 3)) + (100, 0, 0)
        b = np.random.default_rng(1).uniform(-1, 1, (20, 3)) + (-100, 0, 5)
        cloud = PointCloud(np.vstack([a, b]))
        with pytest.warns(EmptyCentralRegion):
            nose = detect_nosetip(cloud, central_fraction=0.01)
        assert nose[2] == cloud.points[:, 2].max()


class TestNormalizeU8:
    def test_linear_map_with_round_half_away(self):
        channel = np.array([[0.0, 1.0, 2.0]])
        mask = np.ones((1, 3), dtype=bool)
        np.testing.assert_array_equal(normalize_u8(channel, mask),
                                      [[0, 128, 255]])

    def test_constant_channel_all_zero(self):
        channel = np.full((4, 4), 3.3)
        mask = np.ones((4, 4), dtype=bool)
        assert normalize_u8(channel, mask).max() == 0

    def test_extremes_hit_0_and_255(self, rng):
        channel = rng.uniform(-5, 5, (8, 8))
        mask = np.ones((8, 8), dtype=bool)
        out = normalize_u8(channel, mask)
        assert out.min() == 0 and out.max() == 255

    def test_unmasked_pixels_zero(self, rng):
        channel = rng.uniform(1, 2, (4, 4))
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = mask[3, 3] = True
        out = normalize_u8(channel, mask)
        assert np.all(out[~mask] == 0)


def planar_view(n=16):
    ii, jj = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float),
                         indexing="ij")
    pts = np.column_stack([jj.ravel(), ii.ravel(), np.full(n * n, 4.0)])
    normals = np.tile([0.0, 0.0, 1.0], (n * n, 1))
    return ViewCloud(cloud=PointCloud(pts, normals), pose=CameraPose(0, 0),
                     visible_indices=np.arange(n * n), source_ref="plane")


def dome_view(radius=30.0, spacing=1.0, n=64):
    g = np.linspace(-radius * 0.98, radius * 0.98, n)
    xx, yy = np.meshgrid(g, g)
    keep = xx ** 2 + yy ** 2 < (0.97 * radius) ** 2
    x, y = xx[keep], yy[keep]
    z = np.sqrt(radius ** 2 - x ** 2 - y ** 2)
    pts = np.column_stack([x, y, z])
    normals = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    return ViewCloud(cloud=PointCloud(pts, normals), pose=CameraPose(0, 0),
                     visible_indices=np.arange(len(pts)), source_ref="dome")


class TestMakeThreeChannel:
    def test_planar_cloud_constant_channels(self):
        view = planar_view(16)
        spec = GridSpec(width=16, height=16, spacing=1.0, origin=(0.0, 0.0))
        image = make_three_channel(view, spec, crop=16, out_size=16,
                                   nosetip_override=(8.0, 8.0, 4.0))
        assert image.mask.all()
        assert np.all(image.channels == 0)  # constant channels map to zero

    def test_dome_depth_max_at_nosetip_pixel(self):
        view = dome_view()
        spec = GridSpec.cover(view.cloud.points, spacing=1.0)
        image = make_three_channel(view, spec, crop=32, out_size=32,
                                   nosetip_override=(0.0, 0.0, 30.0))
        center = image.channels[16, 16, 0]
        assert center == 255

    def test_paper_sizes(self):
        view = dome_view(radius=120.0, spacing=1.0, n=130)
        spec = GridSpec.cover(view.cloud.points, spacing=1.0)
        image = make_three_channel(view, spec, crop=224, out_size=160)
        assert image.channels.shape == (160, 160, 3)
        assert image.channels.dtype == np.uint8

    def test_byte_identical_across_runs(self, tmp_path):
        view = dome_view(n=48)
        spec = GridSpec.cover(view.cloud.points, spacing=1.5)
        paths = []
        for run in ("a", "b"):
            image = make_three_channel(view, spec, crop=24, out_size=16)
            save_image3c(image, tmp_path / f"{run}.png")
            paths.append(tmp_path / f"{run}.png")
        assert paths[0].read_bytes() == paths[1].read_bytes()
        meta_a = paths[0].with_suffix(".json").read_bytes()
        meta_b = paths[1].with_suffix(".json").read_bytes()
        assert meta_a == meta_b

    def test_crop_out_of_bounds_flagged(self):
        view = dome_view(n=32)
        spec = GridSpec.cover(view.cloud.points, spacing=2.0)
        with pytest.warns(CropOutOfBounds):
            image = make_three_channel(view, spec, crop=64, out_size=32)
        assert image.meta["crop_clamped"] is True

    def test_png_round_trip(self, tmp_path):
        view = dome_view(n=40)
        spec = GridSpec.cover(view.cloud.points, spacing=1.5)
        image = make_three_channel(view, spec, crop=24, out_size=24)
        save_image3c(image, tmp_path / "img.png", with_mask=True)
        back = load_image3c(tmp_path / "img.png")
        np.testing.assert_array_equal(back.channels, image.channels)
        np.testing.assert_array_equal(back.mask, image.mask)


def test_bilinear_resize_identity():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 255, (12, 12))
    np.testing.assert_allclose(bilinear_resize(img, 12, 12), img, atol=1e-12)


def test_face_image_invariant_enforced():
    channels = np.ones((4, 4, 3), dtype=np.uint8)
    mask = np.zeros((4, 4), dtype=bool)
    with pytest.raises(ValueError):
        FaceImage3C(channels=channels, mask=mask)
