import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softsphere.blend import BlendParams
from softsphere.camera import pixel_ray
from softsphere.raster import (
    compute_bounds,
    draw_pixel,
    gather_tile_candidates,
    render_forward,
    sort_draw_records,
)
from softsphere.scene import add_sphere_arrays, new_scene
from softsphere.testkit import oracle_render

from conftest import make_camera, make_random_scene


def single_sphere_scene(pos, radius, opacity=1.0, feature=(1.0, 0.0, 0.0), bg=(0, 0, 0)):
    scene = new_scene(3, bg)
    add_sphere_arrays(scene, [pos], [radius], [opacity], [list(feature)])
    return scene


def exhaustive_hit_pixels(scene, cam, sphere_idx):
    """Oracle: all pixels whose center ray intersects the sphere."""
    hits = []
    c_all = cam.world_to_camera(scene.positions)
    c = c_all[sphere_idx]
    r = scene.radii[sphere_idx]
    for v in range(cam.height):
        for u in range(cam.width):
            ray = pixel_ray(cam, u, v)
            rel = scene.positions[sphere_idx] - ray.origin
            t = rel @ ray.direction
            dist2 = rel @ rel - t * t
            if dist2 < r * r and t + np.sqrt(max(r * r - dist2, 0)) > 0:
                hits.append((u, v))
    return hits


class TestComputeBounds:
    def test_on_axis_tangent_halfwidth(self):
        cam = make_camera(1024, 1024)
        scene = single_sphere_scene([0, 0, 25.0], 1.0)
        bounds, draws = compute_bounds(scene, cam)
        half_w = (bounds.x_max[0] - bounds.x_min[0] + 1) / 2.0
        expected = 1024 / 2 * (5.0 * 1.0) / ((2.0 / 2) * np.sqrt(25.0**2 - 1.0))
        assert abs(half_w - expected) < 2.0
        assert abs(draws.earliest[0] - 24.0) < 1e-12
        assert abs(bounds.proj_radius_px[0] - expected) < 0.5

    def test_behind_camera_off_sensor(self):
        cam = make_camera(64, 64)
        scene = single_sphere_scene([0, 0, -10.0], 1.0)
        bounds, draws = compute_bounds(scene, cam)
        assert not bounds.on_sensor[0]
        assert draws.earliest[0] == np.inf

    def test_subpixel_sphere_single_pixel(self):
        cam = make_camera(64, 64)
        # projected radius ~0.1 px: r = 0.1 * z * pixel_size / f
        r = 0.1 * 30.0 * cam.pixel_size / cam.focal_length
        scene = single_sphere_scene([0.37, -0.21, 30.0], r)
        bounds, _ = compute_bounds(scene, cam)
        assert bounds.x_min[0] == bounds.x_max[0]
        assert bounds.y_min[0] == bounds.y_max[0]
        assert bounds.on_sensor[0]

    @pytest.mark.parametrize("mode", ["pinhole", "orthographic"])
    def test_conservative_over_random_scenes(self, rng, mode):
        cam = make_camera(
            48, 40, mode=mode,
            vec=[0.2, -0.1, 0.3, 0.05, -0.02, 0.08, 5.0, 2.0 if mode == "pinhole" else 14.0],
        )
        scene = make_random_scene(rng, 12, lateral=4.0, radius=(0.2, 3.0))
        bounds, _ = compute_bounds(scene, cam)
        for i in range(len(scene)):
            for (u, v) in exhaustive_hit_pixels(scene, cam, i):
                assert bounds.on_sensor[i]
                assert bounds.x_min[i] <= u <= bounds.x_max[i]
                assert bounds.y_min[i] <= v <= bounds.y_max[i]

    def test_camera_inside_sphere_covers_image(self):
        cam = make_camera(32, 32)
        scene = single_sphere_scene([0, 0, 0.5], 5.0)
        bounds, _ = compute_bounds(scene, cam)
        assert bounds.on_sensor[0]
        assert bounds.x_min[0] == 0 and bounds.x_max[0] == 31
        assert bounds.y_min[0] == 0 and bounds.y_max[0] == 31


class TestSortDrawRecords:
    def test_basic_order_and_inf_tail(self):
        cam = make_camera(32, 32)
        scene = new_scene(3, [0, 0, 0])
        add_sphere_arrays(
            scene,
            [[0, 0, 4.0], [0, 0, 2.0], [0, 0, -9.0], [0, 0, 3.0]],
            [1.0, 1.0, 1.0, 1.0],
            [1, 1, 1, 1],
            np.eye(4)[:, :3][: 4 - 0] * 0 + 0.5,
        )
        bounds, draws = compute_bounds(scene, cam)
        sb, sd = sort_draw_records(bounds, draws)
        assert list(sd.sphere_id[:3]) == [1, 3, 0]
        assert sd.earliest[3] == np.inf

    def test_stability_on_equal_keys(self):
        cam = make_camera(32, 32)
        scene = new_scene(3, [0, 0, 0])
        add_sphere_arrays(
            scene,
            [[x, 0, 20.0] for x in np.linspace(-1, 1, 5)],
            np.full(5, 0.5), np.ones(5), np.full((5, 3), 0.5),
        )
        bounds, draws = compute_bounds(scene, cam)
        draws.earliest[:] = 7.0  # force ties
        _, sd = sort_draw_records(bounds, draws)
        assert list(sd.sphere_id) == [0, 1, 2, 3, 4]

    def test_large_scene_sorts_without_index_overflow(self, rng):
        cam = make_camera(64, 64)
        m = 233_872
        scene = new_scene(1, [0.0])
        pos = np.column_stack(
            [rng.uniform(-5, 5, m), rng.uniform(-5, 5, m), rng.uniform(6, 44, m)]
        )
        add_sphere_arrays(scene, pos, np.full(m, 0.05), np.ones(m), np.ones((m, 1)))
        bounds, draws = compute_bounds(scene, cam)
        sb, sd = sort_draw_records(bounds, draws)
        assert len(sd) == m
        finite = np.isfinite(sd.earliest)
        assert not finite[np.argmax(~finite):].any()  # inf tail
        assert np.all(np.diff(sd.earliest[finite]) >= 0)
        assert sd.sphere_id.max() == m - 1


class TestGatherTileCandidates:
    def _setup(self, rng):
        cam = make_camera(64, 64)
        scene = make_random_scene(rng, 30)
        bounds, draws = compute_bounds(scene, cam)
        return sort_draw_records(bounds, draws)

    def test_far_tile_empty(self, rng):
        cam = make_camera(256, 256)
        scene = single_sphere_scene([0, 0, 25.0], 0.5)
        bounds, draws = compute_bounds(scene, cam)
        sb, sd = sort_draw_records(bounds, draws)
        assert gather_tile_candidates((0, 0, 15, 15), sb, sd).size == 0

    def test_full_cover_sphere_in_every_tile(self):
        cam = make_camera(64, 64)
        scene = single_sphere_scene([0, 0, 10.0], 9.0)
        bounds, draws = compute_bounds(scene, cam)
        sb, sd = sort_draw_records(bounds, draws)
        for ty in range(4):
            for tx in range(4):
                rect = (tx * 16, ty * 16, tx * 16 + 15, ty * 16 + 15)
                assert gather_tile_candidates(rect, sb, sd).size == 1

    def test_tile_subset_of_image(self, rng):
        sb, sd = self._setup(rng)
        whole = set(gather_tile_candidates((0, 0, 63, 63), sb, sd))
        tile = set(gather_tile_candidates((16, 32, 31, 47), sb, sd))
        assert tile <= whole


class TestDrawPixel:
    def test_no_candidates(self):
        cam = make_camera(32, 32)
        scene = new_scene(3, [0.2, 0.4, 0.6])
        bounds, draws = compute_bounds(scene, cam)
        feat, entry, visited = draw_pixel((5, 5), draws, cam, BlendParams(), scene.background)
        assert np.allclose(feat, scene.background)
        assert entry.ids.size == 0 and entry.background_weight == 1.0

    def test_single_centered_opaque_sphere_hard_gamma(self):
        cam = make_camera(33, 33)
        scene = single_sphere_scene([0, 0, 25.0], 2.0, feature=(0.9, 0.5, 0.2))
        bounds, draws = compute_bounds(scene, cam)
        _, sd = sort_draw_records(bounds, draws)
        feat, entry, _ = draw_pixel((16, 16), sd, cam, BlendParams(gamma=1e-5), scene.background)
        assert np.abs(feat - [0.9, 0.5, 0.2]).max() < 1e-6
        assert entry.ids[0] == 0

    def test_stacked_spheres_early_stop(self, rng):
        cam = make_camera(17, 17)
        scene = new_scene(3, [0, 0, 0])
        n = 100
        depths = np.linspace(10.0, 40.0, n)
        add_sphere_arrays(
            scene,
            np.column_stack([np.zeros(n), np.zeros(n), depths]),
            np.full(n, 3.0),
            np.ones(n),
            rng.uniform(0, 1, (n, 3)),
        )
        bounds, draws = compute_bounds(scene, cam)
        _, sd = sort_draw_records(bounds, draws)
        params0 = BlendParams(gamma=1e-3, tau=0.0)
        params1 = BlendParams(gamma=1e-3, tau=0.01)
        f0, _, v0 = draw_pixel((8, 8), sd, cam, params0, scene.background)
        f1, _, v1 = draw_pixel((8, 8), sd, cam, params1, scene.background)
        assert v0 == n
        assert v1 < n / 4
        bound = params1.tau / (1 - params1.tau)
        assert np.abs(f1 - f0).max() <= bound * max(1.0, np.abs(f0).max()) + 1e-12

    def test_matches_render_forward_at_tau_zero(self, rng):
        cam = make_camera(24, 24)
        scene = make_random_scene(rng, 15)
        params = BlendParams(gamma=0.08, tau=0.0)
        image, _, _ = render_forward(scene, cam, params)
        bounds, draws = compute_bounds(scene, cam)
        _, sd = sort_draw_records(bounds, draws)
        for (u, v) in [(0, 0), (5, 17), (12, 12), (23, 23)]:
            feat, _, _ = draw_pixel((u, v), sd, cam, params, scene.background)
            assert np.abs(feat - image.data[v, u]).max() < 1e-12


class TestRenderForward:
    def test_empty_scene_constant_background(self):
        cam = make_camera(40, 24)
        scene = new_scene(3, [0.25, 0.5, 0.75])
        image, buffer, stats = render_forward(scene, cam, BlendParams())
        assert np.allclose(image.data, [0.25, 0.5, 0.75])
        assert np.all(buffer.ids == -1)
        assert stats.spheres_on_sensor == 0

    def test_matches_oracle_random_scenes(self, rng):
        for trial in range(8):
            scene = make_random_scene(rng, int(rng.integers(1, 120)))
            gamma = float(np.exp(rng.uniform(np.log(1e-4), 0.0)))
            params = BlendParams(gamma=gamma, tau=0.0)
            cam = make_camera(64, 64)
            image, _, _ = render_forward(scene, cam, params)
            ref = oracle_render(scene, cam, params)
            assert np.abs(image.data - ref.data).max() < 1e-6

    def test_listing_style_scene(self, rng):
        scene = new_scene(3, [0, 0, 0])
        pos = rng.random((10, 3)) * 10.0
        pos[:, 2] += 25.0
        pos[:, :2] -= 5.0
        add_sphere_arrays(scene, pos, rng.random(10), np.ones(10), rng.random((10, 3)))
        cam = make_camera(1024, 1024, near=0.0, far=45.0)
        image, _, stats = render_forward(
            scene, cam, BlendParams(gamma=0.1), store_buffer=False
        )
        assert stats.spheres_on_sensor == 10
        lit = (np.abs(image.data) > 1e-3).any(axis=2).sum()
        assert lit > 100  # ten visible discs
        assert np.isfinite(image.data).all()

    def test_deterministic_across_runs_and_workers(self, rng):
        scene = make_random_scene(rng, 60)
        cam = make_camera(64, 64)
        params = BlendParams(gamma=0.05)
        base, buf1, _ = render_forward(scene, cam, params)
        for workers in (1, 2, 8):
            img, buf, _ = render_forward(scene, cam, params, workers=workers)
            assert np.array_equal(base.data, img.data)
            assert np.array_equal(buf1.ids, buf.ids)
            assert np.array_equal(buf1.z, buf.z)
            assert np.array_equal(buf1.log_denom, buf.log_denom)

    def test_order_invariance(self, rng):
        scene = make_random_scene(rng, 40)
        cam = make_camera(48, 48)
        params = BlendParams(gamma=0.1, tau=0.0)
        base, _, _ = render_forward(scene, cam, params)
        perm = rng.permutation(len(scene))
        shuffled = new_scene(3, scene.background)
        add_sphere_arrays(
            shuffled, scene.positions[perm], scene.radii[perm],
            scene.opacities[perm], scene.features[perm],
        )
        img, _, _ = render_forward(shuffled, cam, params)
        assert np.abs(base.data - img.data).max() < 1e-6

    def test_early_stop_error_bound(self, rng):
        # >= 100 spheres stacked along every center-region ray
        cam = make_camera(32, 32)
        scene = new_scene(3, [0, 0, 0])
        n = 120
        depths = np.linspace(8.0, 43.0, n)
        add_sphere_arrays(
            scene,
            np.column_stack([rng.uniform(-0.3, 0.3, n), rng.uniform(-0.3, 0.3, n), depths]),
            np.full(n, 4.0),
            rng.uniform(0.6, 1.0, n),
            rng.uniform(0, 1, (n, 3)),
        )
        tau = 0.01
        img_tau, _, stats_tau = render_forward(
            scene, cam, BlendParams(gamma=1e-3, tau=tau), chunk_size=16
        )
        img0, _, _ = render_forward(scene, cam, BlendParams(gamma=1e-3, tau=0.0))
        bound = tau / (1 - tau) * max(1.0, np.abs(img0.data).max())
        assert np.abs(img_tau.data - img0.data).max() <= bound
        assert stats_tau.pixels_early_stopped > 0
        assert stats_tau.candidates_tested < 4 * len(scene)  # scan stopped early

    def test_full_cover_sphere_cost_counters(self):
        cam = make_camera(64, 64)
        scene = single_sphere_scene([0, 0, 10.0], 9.5)
        _, _, stats = render_forward(scene, cam, BlendParams(gamma=0.1))
        assert stats.hits_blended == 64 * 64  # one hit per pixel
        assert stats.candidates_tested == stats.tiles  # one candidate per tile

    def test_buffer_entries_sorted_and_bounded(self, rng):
        cam = make_camera(32, 32)
        scene = make_random_scene(rng, 80, radius=(1.0, 3.0))
        params = BlendParams(gamma=0.3, top_k=5, tau=0.0)
        _, buf, _ = render_forward(scene, cam, params)
        assert buf.ids.shape[2] == 5
        z = buf.z.reshape(-1, 5)
        ids = buf.ids.reshape(-1, 5)
        filled = ids >= 0
        # empty slots trail the filled ones; z nonincreasing over filled slots
        for row in range(z.shape[0]):
            k = filled[row].sum()
            assert not filled[row, k:].any()
            assert np.all(np.diff(z[row, :k]) <= 1e-15)

    def test_float32_mode_runs_and_matches_loosely(self, rng):
        scene = make_random_scene(rng, 30)
        cam = make_camera(48, 48)
        params = BlendParams(gamma=0.1, tau=0.0)
        a, _, _ = render_forward(scene, cam, params, dtype=np.float64)
        b, _, _ = render_forward(scene, cam, params, dtype=np.float32)
        assert b.data.dtype == np.float32
        assert np.abs(a.data - b.data).max() < 1e-3


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_property_forward_equals_oracle(seed):
    rng = np.random.default_rng(seed)
    scene = make_random_scene(rng, int(rng.integers(0, 48)))
    cam = make_camera(32, 32)
    params = BlendParams(gamma=float(rng.uniform(1e-3, 1.0)), tau=0.0)
    image, _, _ = render_forward(scene, cam, params)
    ref = oracle_render(scene, cam, params)
    assert np.abs(image.data - ref.data).max() < 1e-6
