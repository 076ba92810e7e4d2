"""Analytic flow generator: physics sanity and dataset determinism."""

import numpy as np
import pytest

from windseer.gridcore import GridError, GridGeometry, read_wsgrid
from windseer.synthflow import (
    CaseSampler,
    CoarseGridWarning,
    FlowParams,
    Hill,
    TerrainPatch,
    TerrainSampler,
    WindCase,
    _split_counts,
    generate_dataset,
    hill_flow,
    log_profile,
    read_manifest,
    terrain_occupancy,
    zero_flow,
)


def desk_geom(n=64):
    return GridGeometry((n, n, n), (16.5, 16.5, 11.5), (0.0, 0.0, -11.5))


def one_hill(height=150.0, radius=250.0, n=64):
    c = n * 16.5 / 2
    return TerrainPatch((Hill(c, c, height, radius),))


class TestLogProfile:
    def test_anchors(self):
        assert log_profile(100.0, 8.0, 100.0, 0.5) == pytest.approx(8.0)
        assert log_profile(0.5, 8.0, 100.0, 0.5) == 0.0
        assert log_profile(0.01, 8.0, 100.0, 0.5) == 0.0
        assert log_profile(-3.0, 8.0, 100.0, 0.5) == 0.0

    def test_monotone(self):
        z = np.linspace(0.6, 700.0, 200)
        u = log_profile(z, 10.0, 100.0, 0.5)
        assert np.all(np.diff(u) > 0)


class TestFlatTerrain:
    def test_pure_log_profile(self):
        geom = desk_geom(16)
        grid = hill_flow(geom, TerrainPatch(), WindCase(np.pi / 2, 9.0, z0=0.3))
        # bottom layer is underground by construction of the origin
        assert grid.terrain[0].all()
        assert not grid.terrain[1:].any()
        zc = geom.axis_centers(2)[1:]
        expect = log_profile(zc, 9.0, 100.0, 0.3)
        got = grid.channels["uy"][1:, 7, 3]
        np.testing.assert_allclose(got, expect, rtol=1e-6)
        np.testing.assert_allclose(grid.channels["ux"][1:], 0.0, atol=1e-6 * 9.0)
        np.testing.assert_array_equal(grid.channels["uz"], 0.0)

    def test_direction_decomposition(self):
        geom = desk_geom(12)
        phi = 0.7
        grid = hill_flow(geom, TerrainPatch(), WindCase(phi, 11.0))
        ux, uy = grid.channels["ux"], grid.channels["uy"]
        free = grid.free
        np.testing.assert_allclose(uy[free], np.tan(phi) * ux[free], rtol=1e-6)


def test_zero_flow_is_exactly_zero():
    geom = desk_geom(24)
    grid = zero_flow(geom, one_hill(n=24))
    for name in ("ux", "uy", "uz", "tke"):
        assert not grid.channels[name].any()
    assert grid.terrain.any() and not grid.terrain.all()


def test_terrain_inside_cells_hold_zeros():
    geom = desk_geom(32)
    grid = hill_flow(geom, one_hill(n=32), WindCase(1.1, 10.0))
    for name in ("ux", "uy", "uz", "tke"):
        assert not grid.channels[name][grid.terrain].any()


def test_no_penetration_at_surface():
    geom = desk_geom(48)
    patch = one_hill(n=48)
    case = WindCase(0.3, 10.0)
    grid = hill_flow(geom, patch, case)
    occ = grid.terrain
    # free cells whose lower neighbor is solid
    adj = (~occ[1:]) & occ[:-1]
    kk, jj, ii = np.nonzero(adj)
    kk = kk + 1
    assert kk.size > 100
    x = geom.axis_centers(0)[ii]
    y = geom.axis_centers(1)[jj]
    gx, gy = patch.gradient(x, y)
    u = grid.channels["ux"][kk, jj, ii]
    v = grid.channels["uy"][kk, jj, ii]
    w = grid.channels["uz"][kk, jj, ii]
    normal = (w - u * gx - v * gy) / np.sqrt(1.0 + gx**2 + gy**2)
    assert np.max(np.abs(normal)) < 0.05 * case.u_ref


def test_crest_speedup():
    n = 64
    geom = desk_geom(n)
    h = 150.0
    grid = hill_flow(geom, one_hill(height=h, n=n), WindCase(0.0, 10.0))
    speed = np.hypot(grid.channels["ux"], grid.channels["uy"])
    # sample both columns at twice the hill height
    k = int(round(2 * h / 11.5))
    ratio = speed[k, n // 2, n // 2] / speed[k, 2, 2]
    assert ratio > 1.05


def test_tke_nonnegative_and_finite():
    geom = desk_geom(32)
    grid = hill_flow(geom, one_hill(n=32), WindCase(2.0, 12.0, z0=0.8))
    tke = grid.channels["tke"]
    assert np.isfinite(tke).all()
    assert (tke >= 0.0).all()
    assert tke[grid.free].max() > 0.0


def test_mixing_length_cap_limits_tke_aloft():
    geom = desk_geom(32)
    lo = hill_flow(geom, TerrainPatch(), WindCase(0.0, 10.0),
                   FlowParams(mixing_length_cap=50.0))
    hi = hill_flow(geom, TerrainPatch(), WindCase(0.0, 10.0),
                   FlowParams(mixing_length_cap=200.0))
    k = 25  # ~280 m up, both caps active
    assert lo.channels["tke"][k].max() < hi.channels["tke"][k].max()


def test_terrain_too_tall_rejected():
    geom = GridGeometry((8, 8, 8), (16.5, 16.5, 11.5), (0.0, 0.0, -11.5))
    patch = TerrainPatch((Hill(66.0, 66.0, 70.0, 200.0),))
    with pytest.raises(GridError, match="domain top"):
        hill_flow(geom, patch, WindCase(0.0, 5.0))


def test_coarse_radius_warns():
    geom = desk_geom(16)
    patch = TerrainPatch((Hill(130.0, 130.0, 40.0, 30.0),))
    with pytest.warns(CoarseGridWarning):
        hill_flow(geom, patch, WindCase(0.0, 5.0))


def test_occupancy_matches_height_function():
    geom = desk_geom(24)
    patch = one_hill(n=24)
    occ = terrain_occupancy(geom, patch)
    x = geom.axis_centers(0)
    y = geom.axis_centers(1)
    h = patch.height(x[None, :], y[:, None])
    for k in (0, 5, 11):
        zc = geom.axis_centers(2)[k]
        np.testing.assert_array_equal(occ[k], zc < h)


class TestSplitCounts:
    def test_fractions(self):
        assert _split_counts((0.7, 0.15, 0.15), 20) == (14, 3, 3)
        assert _split_counts((0.7, 0.15, 0.15), 2) == (1, 0, 1)

    def test_explicit_counts(self):
        assert _split_counts((3, 1, 1), 5) == (3, 1, 1)

    def test_bad_sum(self):
        with pytest.raises(GridError, match="sum to 1"):
            _split_counts((0.5, 0.2, 0.2), 10)


@pytest.mark.filterwarnings("ignore::windseer.synthflow.CoarseGridWarning")
class TestDataset:
    def test_layout_and_split_integrity(self, tmp_path):
        man = generate_dataset(tmp_path / "d", n_terrains=5, cases_per_terrain=2,
                               dims=(24, 24, 24), split=(3, 1, 1), seed=7)
        rows = read_manifest(man)
        assert len(rows) == 5 * 3
        by_terrain = {}
        for r in rows:
            by_terrain.setdefault(r.terrain_id, set()).add(r.split)
            assert r.path.exists()
        # a terrain never straddles splits
        assert all(len(s) == 1 for s in by_terrain.values())
        splits = [r.split for r in rows]
        assert splits.count("train") == 9
        assert splits.count("val") == 3
        assert splits.count("test") == 3
        assert sum(r.is_zero for r in rows) == 5

    def test_reruns_byte_identical(self, tmp_path):
        m1 = generate_dataset(tmp_path / "a", n_terrains=3, cases_per_terrain=1,
                              dims=(16, 16, 16), split=(1, 1, 1), seed=11)
        m2 = generate_dataset(tmp_path / "b", n_terrains=3, cases_per_terrain=1,
                              dims=(16, 16, 16), split=(1, 1, 1), seed=11)
        assert m1.read_text() == m2.read_text()
        for r1, r2 in zip(read_manifest(m1), read_manifest(m2)):
            assert r1.path.read_bytes() == r2.path.read_bytes()

    def test_seed_changes_fields(self, tmp_path):
        m1 = generate_dataset(tmp_path / "a", n_terrains=1, cases_per_terrain=1,
                              dims=(16, 16, 16), split=(1, 0, 0), seed=1)
        m2 = generate_dataset(tmp_path / "b", n_terrains=1, cases_per_terrain=1,
                              dims=(16, 16, 16), split=(1, 0, 0), seed=2)
        g1 = read_wsgrid(read_manifest(m1)[0].path)
        g2 = read_wsgrid(read_manifest(m2)[0].path)
        assert not np.array_equal(g1.channels["ux"], g2.channels["ux"])

    def test_grids_are_loadable_and_labeled(self, tmp_path):
        man = generate_dataset(tmp_path / "d", n_terrains=2, cases_per_terrain=1,
                               dims=(16, 16, 16), split=(1, 1, 0), seed=3)
        for row in read_manifest(man):
            grid = read_wsgrid(row.path)
            assert set(grid.channels) == {"ux", "uy", "uz", "tke"}
            assert grid.terrain[0].all()
            if row.is_zero:
                assert not grid.channels["ux"].any()

    def test_manifest_parse_errors(self, tmp_path):
        bad = tmp_path / "m.tsv"
        bad.write_text("train\tterrain_000\n")
        with pytest.raises(GridError, match="4 tab-separated"):
            read_manifest(bad)
        bad.write_text("dev\tterrain_000\tcase_00\tx.wsgrid\n")
        with pytest.raises(GridError, match="unknown split"):
            read_manifest(bad)


class TestSamplers:
    def test_terrain_sampler_ranges(self):
        rng = np.random.default_rng(0)
        s = TerrainSampler()
        top = 724.5
        for _ in range(20):
            patch = s.sample(rng, (1056.0, 1056.0), top)
            assert 1 <= len(patch.hills) <= 3
            xs = np.linspace(0.0, 1056.0, 129)
            assert patch.height(xs[None, :], xs[:, None]).max() < 0.75 * top
            for b in patch.hills:
                assert b.height <= 0.25 * top
                assert 105.6 <= b.radius <= 316.8
                assert 0.0 <= b.cx <= 1056.0

    def test_case_sampler_ranges(self):
        rng = np.random.default_rng(0)
        s = CaseSampler()
        for _ in range(20):
            c = s.sample(rng)
            assert 4.0 <= c.u_ref <= 14.0
            assert 0.1 <= c.z0 <= 1.0
            assert not c.zero


def test_case_validation():
    with pytest.raises(GridError, match="z0"):
        WindCase(0.0, 5.0, z0=-0.1)
    with pytest.raises(GridError, match="z0"):
        WindCase(0.0, 5.0, z_ref=0.2, z0=0.5)
    with pytest.raises(GridError, match="non-negative"):
        WindCase(0.0, -1.0)
