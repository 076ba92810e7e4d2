"""End-to-end acceptance gate.

Eleven numbered checks, each printing a single `[criterion NN]` verdict
line (run with `pytest -s tests/test_acceptance.py` to watch them go by).
Criterion 05 trains a real model from a generated dataset and owns most
of the wall time; everything else is oracle comparisons, format checks,
and statistical recovery tests with pinned tolerances.
"""
import io
import re
import time
from contextlib import redirect_stdout
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from _oracles import brute_force_edt, scaled_mse_triple_loop, two_pass_pearson
from windseer.calib import (
    CalibData,
    CalibParams,
    body_airflow,
    euler_to_world,
    fit_calibration,
    segment_index,
)
from windseer.cli import dispatch
from windseer.evalkit import (
    avg_predictor,
    magnitude_std,
    net_predictor,
    series_metrics,
    velocity_norm_error,
)
from windseer.gridcore import (
    FlowGrid,
    GridGeometry,
    ObservationSet,
    distance_transform,
    read_wsgrid,
    write_wsgrid,
)
from windseer.net import ModelSpec, Pooling, build_model, load_model, save_checkpoint
from windseer.sparse import FillMode, NoiseSpec, apply_noise, sample_trajectory_mask
from windseer.synthflow import (
    Hill,
    TerrainPatch,
    WindCase,
    generate_dataset,
    hill_flow,
    read_manifest,
)
from windseer.train import TrainConfig, scaled_mse_loss, train_loop

torch.set_num_threads(1)

SEED = 20260819


def report(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


# --------------------------------------------------------------------------
# 01: receptive field

def test_criterion_01_receptive_field():
    from windseer.net import receptive_field

    t0 = time.time()
    rf4 = receptive_field(ModelSpec(depth=4))
    rf6 = receptive_field(ModelSpec(depth=6))
    dt = time.time() - t0
    ok = rf4 == 175 and rf6 == 703 and dt < 1.0
    report(1, "receptive field", ok,
           f"depth4={rf4} depth6={rf6}, {dt:.3f} s")


# --------------------------------------------------------------------------
# 02: loss against the scalar triple-loop oracle

def test_criterion_02_loss_oracle():
    rng = np.random.default_rng(SEED)
    t0 = time.time()
    worst = 0.0
    for _ in range(50):
        pred = rng.normal(0, 3, size=(4, 8, 8, 8))
        label = rng.normal(0, 3, size=(4, 8, 8, 8))
        terrain = rng.random((8, 8, 8)) < 0.3
        terrain.ravel()[0] = False  # keep at least one free cell
        scales = rng.uniform(0.05, 2.0, size=4)
        floor = float(rng.uniform(0.0, 0.5))  # sometimes above a scale
        want = scaled_mse_triple_loop(pred, label, terrain, scales, floor)
        n_free = int((~terrain).sum())
        got = float(scaled_mse_loss(
            torch.from_numpy(pred), torch.from_numpy(label),
            torch.from_numpy(terrain), torch.from_numpy(scales),
            torch.tensor([float(n_free)], dtype=torch.float64), floor))
        worst = max(worst, abs(got - want) / abs(want))
    dt = time.time() - t0
    ok = worst <= 1e-6 and dt < 10.0
    report(2, "loss oracle", ok, f"50 cases, worst rel {worst:.2e}, {dt:.1f} s")


# --------------------------------------------------------------------------
# 03: parameter gradients against central differences

def test_criterion_03_gradient_check():
    rng = np.random.default_rng(SEED + 3)
    t0 = time.time()
    model = build_model(ModelSpec(depth=2, base_width=2, seed=1)).double()
    x = torch.from_numpy(rng.normal(0, 1, size=(1, 4, 8, 8, 8)))
    y = torch.from_numpy(rng.normal(0, 1, size=(1, 4, 8, 8, 8)))
    terrain = torch.from_numpy(rng.random((1, 8, 8, 8)) < 0.25)
    scales = torch.from_numpy(rng.uniform(0.2, 1.5, size=(1, 4)))
    n_free = torch.tensor([float((~terrain).sum())], dtype=torch.float64)

    def loss_value() -> float:
        return float(scaled_mse_loss(model(x), y, terrain, scales, n_free, 0.0))

    model.zero_grad()
    loss = scaled_mse_loss(model(x), y, terrain, scales, n_free, 0.0)
    loss.backward()

    params = [p for p in model.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    flat = rng.choice(int(sizes.sum()), size=100, replace=False)
    worst = 0.0
    with torch.no_grad():
        for k in flat:
            pi = int(np.searchsorted(np.cumsum(sizes), k, side="right"))
            j = int(k - np.concatenate([[0], np.cumsum(sizes)])[pi])
            p = params[pi]
            w = float(p.view(-1)[j])
            h = 1e-6 * max(1.0, abs(w))
            p.view(-1)[j] = w + h
            lp = loss_value()
            p.view(-1)[j] = w - h
            lm = loss_value()
            p.view(-1)[j] = w
            fd = (lp - lm) / (2 * h)
            an = float(p.grad.view(-1)[j])
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-10))
    dt = time.time() - t0
    ok = worst <= 1e-3 and dt < 120.0
    report(3, "gradient check", ok,
           f"100 params, worst rel {worst:.2e}, {dt:.1f} s")


# --------------------------------------------------------------------------
# 04: distance transform against the O(n^2) brute force

def test_criterion_04_edt_oracle():
    rng = np.random.default_rng(SEED + 4)
    t0 = time.time()
    worst = 0.0
    for i in range(20):
        occ = rng.random((16, 16, 16)) < rng.uniform(0.02, 0.3)
        occ.ravel()[int(rng.integers(16 ** 3))] = True  # never all-free
        if i % 2 == 0:
            res = (1.0, 1.0, 1.0)
        else:
            res = tuple(rng.uniform(0.5, 3.0, size=3))  # anisotropic
        got = distance_transform(occ, res)
        want = brute_force_edt(occ, res)
        worst = max(worst, float(np.abs(got - want).max()))
    dt = time.time() - t0
    ok = worst <= 1e-9 and dt < 60.0
    report(4, "distance transform oracle", ok,
           f"20 occupancies, max abs diff {worst:.2e}, {dt:.1f} s")


# --------------------------------------------------------------------------
# 05 + 06 share one trained checkpoint

# Profile pinned by a stability sweep on this dataset: batch 25 divides the
# 50-terrain epoch evenly and lr0 3e-4 descends without spikes, where 1e-3
# diverged. The decay step is the default schedule compressed to 200 epochs.
DESK_LR0 = 3e-4
DESK_BATCH = 25
DESK_DECAY_EVERY = 50


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Generate the 50/10-terrain dataset and train the 200-epoch model."""
    root = tmp_path_factory.mktemp("desk")
    t0 = time.time()
    manifest = generate_dataset(root / "data", n_terrains=60,
                                dims=(32, 32, 32), split=(50, 0, 10),
                                seed=SEED)
    spec = ModelSpec(depth=4, base_width=8, seed=0)
    cfg = TrainConfig(epochs=200, batch_size=DESK_BATCH, lr0=DESK_LR0,
                      lr_decay=0.25, lr_decay_every=DESK_DECAY_EVERY,
                      out_dims=(32, 32, 32), rotate=False,
                      fill=FillMode.AVERAGE, seed=0, workers=1)
    result = train_loop(manifest, spec, cfg, root / "run")
    return SimpleNamespace(manifest=manifest, spec=spec, result=result,
                           elapsed=time.time() - t0)


def _median_errors(manifest, predictors: dict) -> tuple[dict, dict, int]:
    """Median relative velocity-norm error per predictor over wind cases."""
    rows = [r for r in read_manifest(manifest) if r.split == "test"]
    rng = np.random.default_rng(SEED + 5)
    errs = {k: [] for k in predictors}
    errs_filtered = {k: [] for k in predictors}
    n_cases = 0
    for r in rows:
        grid = read_wsgrid(r.path)
        free = grid.free
        speed = np.sqrt(sum(grid.channels[c][free] ** 2
                            for c in ("ux", "uy", "uz")))
        if speed.size == 0 or float(speed.max()) == 0.0:
            continue  # calm case: relative error undefined
        n_cases += 1
        grid.add_channel("dist", distance_transform(grid.terrain, grid.res))
        mask = sample_trajectory_mask(grid.dims, grid.terrain, rng)
        cells = np.argwhere(mask)[:, ::-1]
        values = np.stack([grid.channels[c][mask]
                           for c in ("ux", "uy", "uz")], axis=1)
        obs = ObservationSet(cells, values, np.ones(len(cells), np.int64))
        for name, predict in predictors.items():
            pred = predict(grid, obs)
            errs[name].append(velocity_norm_error(pred, grid))
            errs_filtered[name].append(
                velocity_norm_error(pred, grid, min_cells_above=4))
    med = {k: float(np.median(v)) for k, v in errs.items()}
    med_f = {k: float(np.median(v)) for k, v in errs_filtered.items()}
    return med, med_f, n_cases


def test_criterion_05_desk_scale_learning(desk):
    t0 = time.time()
    trained = desk.result.checkpoint.build()
    epoch0 = build_model(desk.spec)
    med, med_f, n_cases = _median_errors(desk.manifest, {
        "trained": net_predictor(trained),
        "epoch0": net_predictor(epoch0),
        "avg": avg_predictor,
    })
    elapsed = desk.elapsed + (time.time() - t0)
    ok = (med["trained"] < 0.5 * med["epoch0"]
          and med["trained"] < med["avg"]
          and med_f["trained"] <= med["trained"]
          and elapsed < 3600.0)
    report(5, "desk-scale learning", ok,
           f"median rel err trained {med['trained']:.3f} "
           f"epoch0 {med['epoch0']:.3f} avg {med['avg']:.3f} "
           f"filtered {med_f['trained']:.3f}, {n_cases} wind cases, "
           f"{elapsed / 60:.1f} min")


def test_criterion_06_multires_two_masts(desk):
    t0 = time.time()
    model = load_model(desk.result.final_path)[0]

    geom = GridGeometry((96, 96, 64), (8.25, 8.25, 5.75), (0.0, 0.0, -5.75))
    patch = TerrainPatch((Hill(cx=380.0, cy=400.0, height=120.0, radius=130.0),))
    grid = hill_flow(geom, patch, WindCase(direction=0.3, u_ref=9.0, z0=0.4))
    grid.add_channel("dist", distance_transform(grid.terrain, grid.res))

    surface = grid.terrain_surface()

    def mast_cells(ix: int, iy: int, n: int = 6) -> np.ndarray:
        iz0 = int(surface[iy, ix]) + 2
        return np.array([[ix, iy, iz] for iz in range(iz0, iz0 + n)])

    obs_cells = mast_cells(20, 24)          # upwind of the hill
    val_cells = mast_cells(58, 52)          # near the crest
    values = np.stack([grid.channels[c][obs_cells[:, 2], obs_cells[:, 1],
                                        obs_cells[:, 0]]
                       for c in ("ux", "uy", "uz")], axis=1)
    obs = ObservationSet(obs_cells, values, np.ones(len(obs_cells), np.int64))

    def val_speed_error(pred: FlowGrid) -> float:
        iz, iy, ix = val_cells[:, 2], val_cells[:, 1], val_cells[:, 0]
        ps = np.sqrt(sum(pred.channels[c][iz, iy, ix] ** 2
                         for c in ("ux", "uy", "uz")))
        ls = np.sqrt(sum(grid.channels[c][iz, iy, ix] ** 2
                         for c in ("ux", "uy", "uz")))
        return float(np.abs(ps - ls).mean())

    pred_avg = net_predictor(model, fill=FillMode.AVERAGE)(grid, obs)
    pred_zero = net_predictor(model, fill=FillMode.ZERO)(grid, obs)
    finite = all(np.isfinite(p.channels[c]).all()
                 for p in (pred_avg, pred_zero)
                 for c in ("ux", "uy", "uz", "tke"))
    err_avg = val_speed_error(pred_avg)
    err_zero = val_speed_error(pred_zero)
    dt = time.time() - t0
    ok = finite and err_avg <= err_zero and dt < 300.0
    report(6, "multi-resolution two-mast", ok,
           f"96x96x64 at half res, finite={finite}, "
           f"val-mast speed err avg {err_avg:.3f} <= zero {err_zero:.3f}, "
           f"{dt:.1f} s")


# --------------------------------------------------------------------------
# 07: calibration recovery

CAL_TRUTH = CalibParams(
    alpha=np.array([0.08, 0.25, 0.012, 0.5, 0.0]),
    beta=np.array([-0.30, 0.012, 6.0, 4.0, 0.08, 0.25, 0.10, 2.5, 0.35]),
)


def calib_sortie(winds=None, noise: float = 0.0, seed: int = 0,
                 n_seg: int = 8, hz: float = 30.0, seg_seconds: float = 60.0):
    """High-excitation calibration flight: wide alpha/speed/roll sweeps on
    short periods so every tanh gate is driven through its curvature and
    nothing aliases into the 60 s wind segments."""
    rng = np.random.default_rng(seed)
    n = int(n_seg * seg_seconds * hz)
    t = np.arange(n) / hz
    phi = 0.7 * np.sin(2 * np.pi * t / 17) + 0.3 * np.sin(2 * np.pi * t / 5)
    theta = 0.3 * np.sin(2 * np.pi * t / 23 + 1.0)
    psi = 2 * np.pi * t / 150 + 0.8 * np.sin(2 * np.pi * t / 71)
    att = np.stack([phi, theta, psi], axis=1)
    gyro = np.stack([0.30 * np.sin(2 * np.pi * t / 9),
                     0.25 * np.cos(2 * np.pi * t / 13),
                     0.20 * np.sin(2 * np.pi * t / 17 + 0.5)], axis=1)
    v_aspd = 16.0 + 11.0 * np.sin(2 * np.pi * t / 13)
    alpha = 0.38 * np.sin(2 * np.pi * t / 7)
    beta = 0.15 * np.sin(2 * np.pi * t / 11 + 0.3)
    if winds is None:
        winds = rng.uniform(-5.0, 5.0, size=(n_seg, 2))
    winds = np.asarray(winds, dtype=np.float64)
    data = CalibData(t=t, att=att, gyro=gyro, v_aspd=v_aspd,
                     alpha=alpha, beta=beta, v_gnd=np.zeros((n, 3)))
    seg = segment_index(t, seg_seconds)
    R = euler_to_world(att)
    air = np.einsum("nij,nj->ni", R, body_airflow(CAL_TRUTH, data))
    v_gnd = air.copy()
    v_gnd[:, 0] += winds[seg, 0]
    v_gnd[:, 1] += winds[seg, 1]
    v_gnd += noise * rng.standard_normal(v_gnd.shape)
    data.v_gnd = v_gnd
    return data, winds


def test_criterion_07_calibration_recovery():
    t0 = time.time()
    truth = np.concatenate([CAL_TRUTH.alpha, CAL_TRUTH.beta])

    # noiseless, cold start from the library's default seed
    data, winds = calib_sortie(seed=0)
    fit = fit_calibration(data, ftol=1e-14, max_iter=300)
    est = np.concatenate([fit.params.alpha, fit.params.beta])
    dp0 = float(np.abs(est - truth).max())
    dw0 = float(np.abs(fit.winds - winds).max())

    # 20 noisy seeds, warm-started from a 20% perturbed prior
    wind_errs, rel_errs = [], []
    for seed in range(20):
        data, winds = calib_sortie(noise=0.3, seed=seed)
        prng = np.random.default_rng(1000 + seed)
        a = CAL_TRUTH.alpha * (1 + 0.2 * prng.uniform(-1, 1, 5))
        b = CAL_TRUTH.beta * (1 + 0.2 * prng.uniform(-1, 1, 9))
        a[4] = 0.0  # gauge-frozen
        fit = fit_calibration(data, init=CalibParams(a, b),
                              ftol=1e-14, max_iter=300)
        est = np.concatenate([fit.params.alpha, fit.params.beta])
        wind_errs.append((fit.winds - winds).ravel())
        keep = truth != 0.0
        rel_errs.append((est[keep] - truth[keep]) / truth[keep])
    wind_rms = float(np.sqrt(np.mean(np.stack(wind_errs) ** 2)))
    coeff_rms = np.sqrt(np.mean(np.stack(rel_errs) ** 2, axis=0))
    worst_rel = float(coeff_rms.max())
    dt = time.time() - t0
    ok = (dp0 <= 1e-6 and dw0 <= 1e-6
          and wind_rms <= 0.05 and worst_rel <= 0.02 and dt < 300.0)
    report(7, "calibration recovery", ok,
           f"noiseless max |dp| {dp0:.1e} |dw| {dw0:.1e}; "
           f"noisy wind rms {wind_rms:.4f}, worst coeff rel rms "
           f"{worst_rel:.4f} over 20 seeds, {dt:.1f} s")


# --------------------------------------------------------------------------
# 08: noise statistics

def test_criterion_08_noise_statistics():
    t0 = time.time()
    rng = np.random.default_rng(SEED + 8)
    speed = 5.0
    n = 10 ** 5

    # gaussian part: sigma is redrawn per call from U(0, g*S), so the
    # marginal std over calls is g*S/sqrt(3)
    g = NoiseSpec(gaussian_std_max=0.1, bias_max=0.0)
    draws = np.array([apply_noise(np.zeros((1, 1)), speed, g, rng)[0, 0]
                      for _ in range(n)])
    want_std = 0.1 * speed / np.sqrt(3.0)
    std_rel = abs(float(draws.std()) - want_std) / want_std

    # bias part: U(-b*S, b*S) per channel, mean ~ 0 within 5% of the range
    b = NoiseSpec(gaussian_std_max=0.0, bias_max=0.1)
    draws = np.array([apply_noise(np.zeros((1, 1)), speed, b, rng)[0, 0]
                      for _ in range(n)])
    brange = 2 * 0.1 * speed
    bias_frac = abs(float(draws.mean())) / brange
    want_bstd = 0.1 * speed / np.sqrt(3.0)
    bstd_rel = abs(float(draws.std()) - want_bstd) / want_bstd

    dt = time.time() - t0
    ok = std_rel <= 0.02 and bstd_rel <= 0.02 and bias_frac <= 0.05 and dt < 30.0
    report(8, "noise statistics", ok,
           f"std rel {std_rel:.4f}/{bstd_rel:.4f}, |bias mean| "
           f"{bias_frac:.4f} of range, 1e5 draws, {dt:.1f} s")


# --------------------------------------------------------------------------
# 09: container round trips

def test_criterion_09_format_round_trips(tmp_path):
    rng = np.random.default_rng(SEED + 9)
    t0 = time.time()
    ok = True
    for i in range(20):
        dims = tuple(int(d) for d in rng.integers(3, 10, size=3))
        geom = GridGeometry(dims, tuple(rng.uniform(0.5, 20.0, size=3)),
                            tuple(rng.uniform(-50.0, 50.0, size=3)))
        nz, ny, nx = dims[2], dims[1], dims[0]
        surf = rng.integers(0, nz, size=(ny, nx))   # columns, no overhangs
        terrain = np.arange(nz)[:, None, None] < surf[None, :, :]
        grid = FlowGrid(geom, terrain)
        for c in range(int(rng.integers(1, 5))):
            grid.add_channel(f"ch{c}", rng.normal(0, 10, size=(nz, ny, nx)))
        p1, p2 = tmp_path / f"g{i}a.wsgrid", tmp_path / f"g{i}b.wsgrid"
        write_wsgrid(p1, grid)
        write_wsgrid(p2, read_wsgrid(p1))
        ok = ok and p1.read_bytes() == p2.read_bytes()

        spec = ModelSpec(depth=int(rng.integers(1, 3)),
                         base_width=int(rng.integers(2, 6)),
                         in_channels=int(rng.choice([4, 5])),
                         pooling=Pooling(str(rng.choice(["max", "avg", "strided"]))),
                         seed=int(rng.integers(1000)))
        model = build_model(spec)
        q1, q2 = tmp_path / f"m{i}a.wsnn", tmp_path / f"m{i}b.wsnn"
        save_checkpoint(q1, model, epoch=int(rng.integers(100)),
                        loss_digest=f"{rng.integers(2**60):016x}")
        m2, ck = load_model(q1)
        save_checkpoint(q2, m2, epoch=ck.epoch, loss_digest=ck.loss_digest)
        ok = ok and q1.read_bytes() == q2.read_bytes()
    dt = time.time() - t0
    ok = ok and dt < 30.0
    report(9, "format round trips", ok, f"20 grid + 20 net fixtures, {dt:.1f} s")


# --------------------------------------------------------------------------
# 10: metric oracles

def test_criterion_10_metric_oracles():
    rng = np.random.default_rng(SEED + 10)
    t0 = time.time()
    worst = 0.0
    for _ in range(30):
        m = int(rng.integers(2, 500))
        scale = 10.0 ** rng.uniform(-3, 3)
        a = rng.normal(0, scale, size=m)
        b = a + rng.normal(0, 0.3 * scale, size=m)
        met = series_metrics(a, b)
        rho_want = two_pass_pearson(a, b)
        bias_want = float(np.mean(a) - np.mean(b))  # first pass: means
        rmse_want = float(np.sqrt(np.mean((a - b) ** 2)))
        if rho_want is not None and met.rho is not None:
            worst = max(worst, abs(met.rho - rho_want))
        # bias can sit near zero, so normalize it by the error scale instead
        worst = max(worst, abs(met.bias - bias_want) / max(abs(bias_want), rmse_want))
        worst = max(worst, abs(met.rmse - rmse_want) / rmse_want)

    # delta-method magnitude std against brute Monte-Carlo
    mc_worst = 0.0
    for _ in range(5):
        wind = rng.uniform(-10, 10, size=3)
        s = np.linalg.norm(wind)
        sigma = rng.uniform(0.01, 0.1, size=3) * s / np.sqrt(3)
        want = magnitude_std(wind, sigma)
        draws = wind[None, :] + rng.normal(0, 1, size=(10 ** 6, 3)) * sigma
        got = float(np.linalg.norm(draws, axis=1).std())
        mc_worst = max(mc_worst, abs(got - want) / want)
    dt = time.time() - t0
    ok = worst <= 1e-12 and mc_worst <= 0.05 and dt < 60.0
    report(10, "metric oracles", ok,
           f"two-pass worst {worst:.2e}, MC magnitude_std worst rel "
           f"{mc_worst:.4f}, {dt:.1f} s")


# --------------------------------------------------------------------------
# 11: inference benchmark

def test_criterion_11_bench(tmp_path):
    t0 = time.time()
    buf = io.StringIO()
    with redirect_stdout(buf):
        rc = dispatch(["bench", "--dims", "64,64,64",
                       "--large", "128,128,64", "--runs", "100"])
    out = buf.getvalue()
    lines = re.findall(
        r"bench (\d+x\d+x\d+): ([0-9.]+) ± ([0-9.]+) s over (\d+) runs", out)
    ratio = re.search(r"large/small mean ratio: ([0-9.]+)", out)
    dt = time.time() - t0
    ok = (rc == 0 and len(lines) == 2 and ratio is not None
          and all(int(n) == 100 and float(m) > 0 for _, m, _, n in lines)
          and float(ratio.group(1)) > 1.0 and dt < 600.0)
    detail = "; ".join(f"{d} {m}s ± {s}s" for d, m, s, _ in lines)
    report(11, "bench", ok,
           f"{detail}; ratio {ratio.group(1) if ratio else 'missing'}, "
           f"{dt / 60:.1f} min")
