"""Window extraction: frozen feasibility arithmetic and exact rotations."""

import numpy as np
import pytest

from windseer.augment import (
    WindowSpec,
    extract_window,
    feasible_intervals,
    rotate_uv,
    sample_window,
)
from windseer.gridcore import (
    FlowGrid,
    GridError,
    GridGeometry,
    distance_transform,
)


def make_src(rng, n=12, res=(2.0, 2.0, 1.5), channels=("ux", "uy", "uz", "tke")):
    heights = rng.integers(0, 4, size=(n, n))
    kk = np.arange(n)[:, None, None]
    grid = FlowGrid(GridGeometry((n, n, n), res, (0.0, 0.0, 0.0)),
                    kk < heights[None, :, :])
    for name in channels:
        grid.add_channel(name, rng.normal(size=(n, n, n)))
    return grid


class TestFeasibility:
    def test_axis_aligned_91_to_64(self):
        (lo, hi), (lo2, hi2) = feasible_intervals((91, 91, 64), (64, 64, 64), 0.0)
        assert (lo, hi) == (0.0, 27.0)
        assert (lo2, hi2) == (0.0, 27.0)

    def test_diagonal_slack(self):
        (lo, hi), _ = feasible_intervals((91, 91, 64), (64, 64, 64), np.pi / 4)
        assert hi - lo == pytest.approx(91 - 64 * np.sqrt(2), abs=1e-9)

    def test_infeasible_when_too_wide(self):
        (lo, hi), _ = feasible_intervals((80, 80, 64), (64, 64, 64), np.pi / 4)
        assert lo > hi

    def test_full_size_window_only_at_quarter_turns(self):
        (lo, hi), _ = feasible_intervals((64, 64, 64), (64, 64, 64), 0.0)
        assert (lo, hi) == (0.0, 0.0)
        (lo, hi), _ = feasible_intervals((64, 64, 64), (64, 64, 64), 0.05)
        assert lo > hi

    def test_rectangular_window(self):
        # at 90 degrees the x and y footprints swap
        (lox, hix), (loy, hiy) = feasible_intervals((100, 50, 10), (40, 20, 10),
                                                    np.pi / 2)
        assert (lox, hix) == pytest.approx((-10.0, 70.0))
        assert (loy, hiy) == pytest.approx((10.0, 20.0))


class TestRotateUV:
    def test_quarter_turn(self):
        u, v = rotate_uv(np.array(1.0), np.array(0.0), np.pi / 2)
        assert u == pytest.approx(0.0, abs=1e-15)
        assert v == pytest.approx(-1.0)

    def test_norm_preserved(self):
        rng = np.random.default_rng(5)
        u = rng.normal(size=50)
        v = rng.normal(size=50)
        for theta in rng.uniform(0, 2 * np.pi, size=7):
            ur, vr = rotate_uv(u, v, theta)
            np.testing.assert_allclose(np.hypot(ur, vr), np.hypot(u, v),
                                       rtol=1e-12)

    def test_inverse(self):
        ur, vr = rotate_uv(3.0, -2.0, 0.8)
        u, v = rotate_uv(ur, vr, -0.8)
        assert (u, v) == pytest.approx((3.0, -2.0))


class TestExtract:
    def test_axis_aligned_integer_offset_is_a_crop(self, rng):
        src = make_src(rng)
        win = extract_window(src, (6, 5, 4), WindowSpec(0.0, (3.0, 2.0, 1.0)))
        np.testing.assert_array_equal(win.terrain, src.terrain[1:5, 2:7, 3:9])
        for name in src.channels:
            np.testing.assert_allclose(win.channels[name],
                                       src.channels[name][1:5, 2:7, 3:9],
                                       atol=1e-12)
        assert win.origin[2] == pytest.approx(src.origin[2] + 1.0 * 1.5)

    def test_quarter_turn_matches_rot90(self, rng):
        n = 10
        src = make_src(rng, n=n, res=(2.0, 2.0, 2.0))
        win = extract_window(src, (n, n, n), WindowSpec(np.pi / 2, (0.0, 0.0, 0.0)))

        def r(a):
            return np.rot90(a, k=1, axes=(1, 2))

        np.testing.assert_array_equal(win.terrain, r(src.terrain))
        np.testing.assert_allclose(win.channels["ux"], r(src.channels["uy"]),
                                   atol=1e-10)
        np.testing.assert_allclose(win.channels["uy"], -r(src.channels["ux"]),
                                   atol=1e-10)
        np.testing.assert_allclose(win.channels["uz"], r(src.channels["uz"]),
                                   atol=1e-10)
        np.testing.assert_allclose(win.channels["tke"], r(src.channels["tke"]),
                                   atol=1e-10)

    def test_rotation_requires_square_cells(self, rng):
        src = make_src(rng, res=(2.0, 3.0, 1.5))
        with pytest.raises(GridError, match="square"):
            extract_window(src, (6, 6, 6), WindowSpec(0.3, (2.0, 2.0, 0.0)))

    def test_terrain_stays_monotone_at_odd_angles(self, rng):
        src = make_src(rng, n=16)
        for theta in (0.3, 1.1, 2.0, 4.4):
            spec = WindowSpec(theta, (3.3, 3.7, 0.6))
            win = extract_window(src, (8, 8, 8), spec)
            assert not np.any(win.terrain[1:] & ~win.terrain[:-1])

    def test_scalar_channel_rotation_invariance(self, rng):
        # a radially symmetric scalar about the window center is unchanged
        n = 17
        geom = GridGeometry((n, n, n), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        src = FlowGrid(geom, np.zeros((n, n, n), bool))
        x = geom.axis_centers(0)
        r2 = ((x - n / 2.0) ** 2)[None, None, :] + ((x - n / 2.0) ** 2)[None, :, None]
        src.add_channel("tke", np.broadcast_to(np.exp(-r2 / 20.0), (n, n, n)))
        base = extract_window(src, (9, 9, n), WindowSpec(0.0, (4.0, 4.0, 0.0)))
        rot = extract_window(src, (9, 9, n), WindowSpec(0.9, (4.0, 4.0, 0.0)))
        # bound is trilinear error on a curved field, ~h^2 * |f''| / 8
        np.testing.assert_allclose(rot.channels["tke"], base.channels["tke"],
                                   atol=0.03)

    def test_distance_channel_sees_out_of_window_terrain(self, rng):
        # a wall just outside the window shrinks resampled distances near
        # that edge below what the window alone would compute
        n = 16
        geom = GridGeometry((n, n, n), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        occ = np.zeros((n, n, n), bool)
        occ[0] = True                # floor, so the window EDT is defined
        occ[:, :, 12:] = True        # solid slab on the +x side, all the way up
        src = FlowGrid(geom, occ)
        src.add_channel("dist", distance_transform(occ, geom.res))
        win = extract_window(src, (10, 10, 10), WindowSpec(0.0, (1.0, 3.0, 0.0)))
        own = distance_transform(win.terrain, win.res)
        # window spans x cells 1..10, wall starts at 12: invisible inside,
        # so the window's own EDT only sees the floor
        assert not win.terrain[1:].any()
        assert win.channels["dist"][5, 5, 9] < own[5, 5, 9]


class TestSampleWindow:
    def test_always_feasible_and_in_range(self, rng):
        src_dims, out_dims = (91, 91, 64), (64, 64, 64)
        for _ in range(200):
            spec = sample_window(rng, src_dims, out_dims)
            (lox, hix), (loy, hiy) = feasible_intervals(src_dims, out_dims,
                                                        spec.theta)
            assert lox <= spec.offset[0] <= hix
            assert loy <= spec.offset[1] <= hiy
            assert 0.0 <= spec.offset[2] <= 0.0

    def test_vertical_offset_biased_to_ground(self, rng):
        oz = [sample_window(rng, (64, 64, 64), (32, 32, 32)).offset[2]
              for _ in range(400)]
        oz = np.asarray(oz)
        assert oz.min() >= 0.0 and oz.max() <= 32.0
        # triangular(0, 0, 32) has mean 32/3 and median well below 16
        assert np.median(oz) < 16.0
        assert abs(oz.mean() - 32.0 / 3.0) < 2.0

    def test_no_rotate_flag(self, rng):
        spec = sample_window(rng, (91, 91, 64), (64, 64, 64), rotate=False)
        assert spec.theta == 0.0

    def test_oversized_window_rejected(self, rng):
        with pytest.raises(GridError, match="exceeds"):
            sample_window(rng, (32, 32, 32), (33, 32, 32))

    def test_angles_cover_the_circle(self, rng):
        thetas = [sample_window(rng, (91, 91, 64), (64, 64, 64)).theta
                  for _ in range(300)]
        hist, _ = np.histogram(thetas, bins=8, range=(0, 2 * np.pi))
        assert (hist > 0).all()
