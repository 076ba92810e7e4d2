"""One binary, eight subcommands: generate data, train, predict, evaluate
against dense labels / mast campaigns / flight logs, calibrate airflow
sensors, and benchmark inference.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Settings resolve as defaults < config file < flags; the effective values
are echoed at startup so a run can be audited from its log alone.
"""

from __future__ import annotations

import argparse
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:                       # Python 3.10
    import tomli as tomllib

from .calib import (DivergenceError, ObservabilityError, fit_calibration,
                    parse_calib_csv, write_param_report, write_wind_csv)
from .evalkit import (WindowMode, average_reports, mast_ensemble_eval,
                      metric_report, net_predictor, velocity_norm_error,
                      window_eval, write_report_csv)
from .gridcore import (FlowGrid, GridError, distance_transform, read_wsgrid,
                       write_wsgrid)
from .ingest import (BASE_RES, GridPlan, SITE_PRESETS, dem_grid, dem_height,
                     grid_embed, is_dem, masts_from_records, parse_flight_csv,
                     parse_mast_csv, plan_domain, terrain_from_dem)
from .net import ModelSpec, Pooling, build_model, load_model
from .sparse import (LABEL_CHANNELS, FillMode, NoiseSpec, compose_input,
                     sample_trajectory_mask)
from .synthflow import generate_dataset, read_manifest
from .train import DIST_CHANNEL, TrainAbort, TrainConfig, train_loop

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Bad flag, config value, or environment setting."""


# ---------------------------------------------------------------------------
# settings: defaults < file < flags, with provenance

def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}") from exc


class Settings:
    def __init__(self, file_cfg: dict):
        self.file = file_cfg
        self.lines: list[str] = []

    def get(self, section: str, key: str, flag, default, cast=lambda v: v):
        if flag is not None:
            val, src = flag, "flag"
        elif key in self.file.get(section, {}):
            val, src = self.file[section][key], "file"
        else:
            val, src = default, "default"
        try:
            val = cast(val)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {section}.{key}: {exc}") from exc
        self.lines.append(f"{section}.{key} = {val} ({src})")
        return val

    def echo(self) -> None:
        for line in self.lines:
            print("config", line)


def _ints3(v) -> tuple[int, int, int]:
    if isinstance(v, str):
        v = v.split(",")
    if isinstance(v, int):
        v = [v]
    vals = [int(x) for x in v]
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3 or any(x < 1 for x in vals):
        raise ValueError("need one or three positive integers")
    return tuple(vals)


def _floats3(v) -> tuple[float, float, float]:
    if isinstance(v, str):
        v = v.split(",")
    vals = [float(x) for x in v]
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3 or any(x <= 0 for x in vals):
        raise ValueError("need one or three positive numbers")
    return tuple(vals)


def _floats2(v) -> tuple[float, float]:
    if isinstance(v, str):
        v = v.split(",")
    vals = [float(x) for x in v]
    if len(vals) != 2:
        raise ValueError("need two numbers")
    return tuple(vals)


def _fill(v) -> FillMode:
    if isinstance(v, FillMode):
        return v
    try:
        return FillMode(str(v).lower())
    except ValueError:
        raise ValueError(f"unknown fill mode {v!r}; "
                         f"use {[m.value for m in FillMode]}")


def _workers(settings: Settings, flag) -> int:
    env = os.environ.get("WINDSEER_WORKERS")
    if env is not None:
        try:
            fallback = int(env)
        except ValueError:
            raise UsageError(f"WINDSEER_WORKERS must be an integer, got {env!r}")
    else:
        fallback = os.cpu_count() or 1
    n = settings.get("train", "workers", flag, fallback, int)
    if n < 1:
        raise UsageError("worker count must be >= 1")
    return n


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_data(args) -> int:
    cfg = Settings(_load_config(args.config))
    n_terrains = cfg.get("data", "terrains", args.terrains, 20, int)
    cases = cfg.get("data", "cases", args.cases, 2, int)
    dims = cfg.get("data", "dims", args.dims, (64, 64, 64), _ints3)
    res = cfg.get("data", "res", args.res, BASE_RES, _floats3)
    split = cfg.get("data", "split", args.split, (0.7, 0.15, 0.15),
                    lambda v: tuple(float(x) for x in
                                    (v.split(",") if isinstance(v, str) else v)))
    seed = cfg.get("data", "seed", args.seed, 0, int)
    cfg.echo()
    manifest = generate_dataset(
        Path(args.out), n_terrains=n_terrains, cases_per_terrain=cases,
        dims=dims, res=res, split=split, seed=seed)
    print(f"wrote {manifest}")
    return EXIT_OK


def _model_spec(cfg: Settings, args, include_uz: bool) -> ModelSpec:
    depth = cfg.get("model", "depth", getattr(args, "depth", None), 4, int)
    width = cfg.get("model", "width", getattr(args, "width", None), 8, int)
    pooling = cfg.get("model", "pooling", None, "max",
                      lambda v: Pooling(str(v)))
    slope = cfg.get("model", "negative_slope", None, 0.1, float)
    seed = cfg.get("model", "seed", args.seed, 0, int)
    return ModelSpec(depth=depth, base_width=width, pooling=pooling,
                     in_channels=5 if include_uz else 4, out_channels=4,
                     negative_slope=slope, seed=seed)


def _cmd_train(args) -> int:
    cfg = Settings(_load_config(args.config))
    include_uz = cfg.get("train", "include_uz", args.include_uz,
                         False, bool)
    spec = _model_spec(cfg, args, include_uz)
    noise = NoiseSpec(
        cfg.get("noise", "gaussian_std_max", args.noise_std, 0.1, float),
        cfg.get("noise", "bias_max", args.noise_bias, 0.1, float))
    workers = _workers(cfg, args.workers)
    tc = TrainConfig(
        epochs=cfg.get("train", "epochs", args.epochs, 3000, int),
        batch_size=cfg.get("train", "batch", args.batch, 35, int),
        lr0=cfg.get("train", "lr0", args.lr0, 1.0e-5, float),
        lr_decay=cfg.get("train", "lr_decay", None, 0.25, float),
        lr_decay_every=cfg.get("train", "lr_decay_every", None, 700, int),
        noise=noise,
        fill=cfg.get("train", "fill", args.fill, "average", _fill),
        traj_min_len=cfg.get("train", "traj_min_len", None, 3, int),
        traj_max_len=cfg.get("train", "traj_max_len", None, 500, int),
        traj_segments=cfg.get("train", "traj_segments", None, 1, int),
        rotate=cfg.get("train", "rotate", None, True, bool),
        out_dims=cfg.get("train", "out_dims", args.out_dims, (64, 64, 64),
                         _ints3),
        include_uz=include_uz,
        seed=cfg.get("train", "seed", args.seed, 0, int),
        checkpoint_every=cfg.get("train", "checkpoint_every", None, 0, int),
        workers=workers)
    cfg.echo()
    torch.set_num_threads(workers)
    log = print if args.verbose else (lambda s: None)
    result = train_loop(args.data, spec, tc, Path(args.out), log=log)
    e, lr, tl, vl = result.history[-1]
    print(f"epoch {e}: train loss {tl:.6e}, val loss {vl:.6e}")
    print(f"final checkpoint: {result.final_path}")
    print(f"best checkpoint:  {result.best_path}")
    print(f"metrics:          {result.metrics_path}")
    return EXIT_OK


def _pseudo_dem(grid: FlowGrid) -> FlowGrid:
    # mast heights are above ground; the grid's own staircase surface is
    # the only datum a bare WSGRID provides
    return dem_grid(grid.terrain_surface(), (grid.res[0], grid.res[1]),
                    (grid.geom.origin[0], grid.geom.origin[1]))


def _mast_observations(grid: FlowGrid, mast_csv, need: tuple[str, ...]):
    from .evalkit import embed_observations
    parse = parse_mast_csv(mast_csv)
    for issue in parse.rejected:
        print(f"warning: {mast_csv}:{issue.line}: {issue.reason}",
              file=sys.stderr)
    col_of = {"ux": "u", "uy": "v", "uz": "w", "tke": "tke"}
    dem = _pseudo_dem(grid)
    pts, vals = [], []
    for r in parse.records:
        row = [getattr(r, col_of[c]) for c in need]
        if any(v is None for v in row):
            continue
        ground = float(dem_height(dem, r.x, r.y))
        pts.append((r.x, r.y, ground + r.z_agl))
        vals.append(row)
    if not pts:
        raise GridError(f"{mast_csv}: no record carries channels {list(need)}")
    obs, n_out, n_buried = embed_observations(
        grid, np.array(pts), np.array(vals), need)
    if n_out or n_buried:
        print(f"warning: dropped {n_out} reading(s) outside the domain, "
              f"{n_buried} inside terrain", file=sys.stderr)
    return obs


def _cmd_predict(args) -> int:
    cfg = Settings(_load_config(args.config))
    fill = cfg.get("train", "fill", args.fill, "average", _fill)
    cfg.echo()
    grid = read_wsgrid(args.grid)
    model, _ = load_model(args.ckpt)
    need = ("ux", "uy", "uz") if model.spec.in_channels == 5 else ("ux", "uy")
    obs = _mast_observations(grid, args.obs, need)
    pred = net_predictor(model, fill=fill)(grid, obs)
    for name in LABEL_CHANNELS:
        ch = pred.channels[name]
        if not np.isfinite(ch).all():
            raise FloatingPointError(f"non-finite prediction in {name}")
        ch[pred.terrain] = 0.0
    np.maximum(pred.channels["tke"], 0.0, out=pred.channels["tke"])
    write_wsgrid(args.out, pred)
    print(f"wrote {args.out}: {pred.dims[0]}x{pred.dims[1]}x{pred.dims[2]}, "
          f"{len(LABEL_CHANNELS)} channels from {len(obs)} observed cells")
    return EXIT_OK


def _cmd_eval_cfd(args) -> int:
    cfg = Settings(_load_config(args.config))
    fill = cfg.get("train", "fill", args.fill, "average", _fill)
    split = cfg.get("data", "split_name", args.split, "test", str)
    seed = cfg.get("data", "seed", args.seed, 0, int)
    noise = NoiseSpec(
        cfg.get("noise", "gaussian_std_max", args.noise_std, 0.0, float),
        cfg.get("noise", "bias_max", args.noise_bias, 0.0, float))
    cfg.echo()
    model, _ = load_model(args.ckpt)
    include_uz = model.spec.in_channels == 5
    rows = read_manifest(args.data)
    chosen = [r for r in rows if r.split == split]
    if not chosen:
        raise GridError(f"manifest has no {split!r} split")
    model.eval()
    reports, errs, errs_alt = [], [], []
    out_rows = []
    rng = np.random.default_rng(seed)
    for row in chosen:
        label = read_wsgrid(row.path)
        dist = distance_transform(label.terrain, label.res)
        mask = sample_trajectory_mask(label.dims, label.terrain, rng)
        sample = compose_input(label, dist, mask, noise, fill, rng,
                               include_uz=include_uz)
        with torch.no_grad():
            y = model(torch.from_numpy(sample.inputs)[None])[0].double().numpy()
        free = ~label.terrain
        pred_map = {c: y[j][free] for j, c in enumerate(LABEL_CHANNELS)}
        meas_map = {c: sample.labels[j].astype(np.float64)[free]
                    for j, c in enumerate(LABEL_CHANNELS)}
        report = metric_report(pred_map, meas_map)
        reports.append(report)
        out_rows.append((row.case_id, "trajectory", report))
        pred = label.copy(channels=False)
        for j, c in enumerate(LABEL_CHANNELS):
            pred.add_channel(c, y[j])
        try:
            errs.append(velocity_norm_error(pred, label))
            errs_alt.append(velocity_norm_error(pred, label, min_cells_above=4))
        except GridError:
            # calm case: zero label magnitude, relative error undefined
            print(f"note: {row.case_id} left out of the relative-error "
                  "summary (calm label)", file=sys.stderr)
    out_rows.append(("all", "mean", average_reports(reports)))
    write_report_csv(args.out, out_rows)
    print(f"evaluated {len(chosen)} {split} case(s); report in {args.out}")
    if errs:
        print(f"median relative velocity error: {np.median(errs):.4f} "
              f"(altitude-filtered: {np.median(errs_alt):.4f})")
    return EXIT_OK


def _plan(cfg: Settings, args, default_site: str | None) -> GridPlan:
    site = cfg.get("data", "site", args.site, default_site,
                   lambda v: None if v is None else str(v))
    if site is not None:
        if site not in SITE_PRESETS:
            raise UsageError(f"unknown site {site!r}; "
                             f"presets: {sorted(SITE_PRESETS)}")
        plan = SITE_PRESETS[site]
    else:
        plan = GridPlan()
    dims = cfg.get("data", "dims", args.dims, plan.dims, _ints3)
    res_scale = cfg.get("data", "res_scale", args.res_scale, plan.res_scale,
                        float)
    center = cfg.get("data", "center", args.center, plan.center,
                     lambda v: None if v is None else _floats2(v))
    return GridPlan(dims=dims, res_scale=res_scale, center=center)


def _cmd_eval_masts(args) -> int:
    cfg = Settings(_load_config(args.config))
    fill = cfg.get("train", "fill", args.fill, "average", _fill)
    plan = _plan(cfg, args, None)
    cfg.echo()
    dem = read_wsgrid(args.dem)
    if not is_dem(dem):
        raise GridError(f"{args.dem} is not an elevation layer")
    model, _ = load_model(args.ckpt)
    parse = parse_mast_csv(args.masts)
    for issue in parse.rejected:
        print(f"warning: {args.masts}:{issue.line}: {issue.reason}",
              file=sys.stderr)
    masts = masts_from_records(parse.records, dem)
    embed = grid_embed(parse.records, dem, plan,
                       channels=("ux", "uy"), depth=model.spec.depth)
    for note in embed.notes:
        print(f"note: {note}", file=sys.stderr)
    result = mast_ensemble_eval(embed.grid, masts,
                                net_predictor(model, fill=fill))
    for note in result.notes:
        print(f"note: {note}", file=sys.stderr)
    stem = Path(args.masts).stem
    out_rows = [(stem, mast_id, rep) for mast_id, rep in result.per_mast.items()]
    out_rows.append((stem, "ensemble", result.ensemble))
    write_report_csv(args.out, out_rows)
    s = result.ensemble["S"]
    print(f"scored {len(result.per_mast)} input mast(s); report in {args.out}")
    print(f"ensemble speed error: eps {s.eps:.4f}, bias {s.bias:+.4f}, "
          f"rmse {s.rmse:.4f} over {s.count} points")
    return EXIT_OK


def _cmd_eval_flight(args) -> int:
    cfg = Settings(_load_config(args.config))
    fill = cfg.get("train", "fill", args.fill, "average", _fill)
    window = cfg.get("data", "window", args.window, 120.0, float)
    mode = cfg.get("data", "mode", args.mode, "sliding",
                   lambda v: WindowMode(str(v)))
    plan = _plan(cfg, args, "flight")
    cfg.echo()
    dem = read_wsgrid(args.dem)
    if not is_dem(dem):
        raise GridError(f"{args.dem} is not an elevation layer")
    model, _ = load_model(args.ckpt)
    streams = []
    for path in args.flights:
        stream, issues = parse_flight_csv(path)
        for issue in issues:
            print(f"warning: {path}:{issue.line}: {issue.reason}",
                  file=sys.stderr)
        streams.append(stream)
    if plan.center is not None:
        center = plan.center
    else:
        xy = np.concatenate([s.points[:, :2] for s in streams])
        center = (float(xy[:, 0].mean()), float(xy[:, 1].mean()))
    geom = plan_domain(plan, dem, center, model.spec.depth)
    grid = FlowGrid(geom, terrain_from_dem(geom, dem))
    scores, notes = window_eval(grid, streams, net_predictor(model, fill=fill),
                                window=window, mode=mode)
    for note in notes:
        print(f"note: {note}", file=sys.stderr)
    stem = Path(args.flights[0]).stem
    out_rows = [(stem, f"{sc.index}", sc.report) for sc in scores]
    if out_rows:
        out_rows.append((stem, "mean",
                         average_reports([sc.report for sc in scores])))
    write_report_csv(args.out, out_rows)
    print(f"scored {len(scores)} window(s) of {window:g} s; "
          f"report in {args.out}")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    cfg = Settings(_load_config(args.config))
    seconds = cfg.get("data", "segment_seconds", args.segment_seconds,
                      60.0, float)
    max_iter = cfg.get("data", "max_iter", args.max_iter, 200, int)
    cfg.echo()
    data = parse_calib_csv(args.log)
    result = fit_calibration(data, segment_seconds=seconds, max_iter=max_iter)
    if args.out_params:
        write_param_report(args.out_params, result)
        print(f"wrote {args.out_params}")
    if args.out_winds:
        write_wind_csv(args.out_winds, result)
        print(f"wrote {args.out_winds}")
    state = "converged" if result.converged else "hit the iteration cap"
    print(f"{state} after {result.n_iter} iteration(s), "
          f"final cost {result.cost_trace[-1]:.6e}, "
          f"{len(result.winds)} segment wind(s)")
    return EXIT_OK


def _time_forward(model, dims: tuple[int, int, int], runs: int,
                  warmup: int = 3) -> tuple[float, float]:
    x = torch.randn(1, model.spec.in_channels, dims[2], dims[1], dims[0])
    with torch.no_grad():
        for _ in range(warmup):
            model(x)
        times = []
        for _ in range(runs):
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
    return (statistics.mean(times),
            statistics.stdev(times) if len(times) > 1 else 0.0)


def _cmd_bench(args) -> int:
    cfg = Settings(_load_config(args.config))
    small = cfg.get("data", "dims", args.dims, (64, 64, 64), _ints3)
    large = cfg.get("data", "large", args.large, (96, 96, 64), _ints3)
    runs = cfg.get("data", "runs", args.runs, 100, int)
    spec = _model_spec(cfg, args, include_uz=False)
    workers = _workers(cfg, args.workers)
    cfg.echo()
    if runs < 1:
        raise UsageError("--runs must be >= 1")
    block = 1 << spec.depth
    for dims in (small, large):
        if any(d % block for d in dims):
            raise UsageError(f"dims {dims} must be multiples of {block} "
                             f"for depth {spec.depth}")
    torch.set_num_threads(workers)
    model = build_model(spec)
    model.eval()
    m_small, s_small = _time_forward(model, small, runs)
    print(f"bench {small[0]}x{small[1]}x{small[2]}: "
          f"{m_small:.5f} ± {s_small:.5f} s over {runs} runs")
    m_large, s_large = _time_forward(model, large, runs)
    print(f"bench {large[0]}x{large[1]}x{large[2]}: "
          f"{m_large:.5f} ± {s_large:.5f} s over {runs} runs")
    print(f"large/small mean ratio: {m_large / m_small:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="windseer",
        description="Sparse wind measurements to dense 3-D fields over terrain.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML settings file")
    sub = parser.add_subparsers(dest="subcommand", required=True,
                                metavar="SUBCOMMAND")

    p = sub.add_parser("gen-data", parents=[common],
                       help="synthesize a labeled terrain-flow dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--terrains", type=int)
    p.add_argument("--cases", type=int)
    p.add_argument("--dims")
    p.add_argument("--res")
    p.add_argument("--split", help="fractions or counts: train,val,test")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", parents=[common],
                       help="train a model on a generated dataset")
    p.add_argument("--data", required=True, help="manifest.tsv path")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--fill")
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--out-dims")
    p.add_argument("--include-uz", action="store_true", default=None)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--noise-bias", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", parents=[common],
                       help="dense prediction from sparse mast readings")
    p.add_argument("--grid", required=True, help="WSGRID with the geometry")
    p.add_argument("--obs", required=True, help="mast readings CSV")
    p.add_argument("--ckpt", required=True, help="WSNN checkpoint")
    p.add_argument("--out", required=True, help="output WSGRID")
    p.add_argument("--fill")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval-cfd", parents=[common],
                       help="score a checkpoint against dense labels")
    p.add_argument("--data", required=True, help="manifest.tsv path")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--split")
    p.add_argument("--fill")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--noise-bias", type=float)
    p.set_defaults(func=_cmd_eval_cfd)

    p = sub.add_parser("eval-masts", parents=[common],
                       help="leave-one-in evaluation over a mast campaign")
    p.add_argument("--dem", required=True, help="WSGRID elevation layer")
    p.add_argument("--masts", required=True, help="mast readings CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--site", help=f"preset: {sorted(SITE_PRESETS)}")
    p.add_argument("--dims")
    p.add_argument("--res-scale", type=float)
    p.add_argument("--center", help="domain center x,y")
    p.add_argument("--fill")
    p.set_defaults(func=_cmd_eval_masts)

    p = sub.add_parser("eval-flight", parents=[common],
                       help="windowed evaluation over flight logs")
    p.add_argument("--dem", required=True, help="WSGRID elevation layer")
    p.add_argument("--flights", required=True, nargs="+",
                   help="flight log CSV(s)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--window", type=float)
    p.add_argument("--mode", choices=[m.value for m in WindowMode])
    p.add_argument("--site", help=f"preset: {sorted(SITE_PRESETS)}")
    p.add_argument("--dims")
    p.add_argument("--res-scale", type=float)
    p.add_argument("--center", help="domain center x,y")
    p.add_argument("--fill")
    p.set_defaults(func=_cmd_eval_flight)

    p = sub.add_parser("calibrate", parents=[common],
                       help="fit airflow-sensor offsets and segment winds")
    p.add_argument("--log", required=True, help="synchronized flight CSV")
    p.add_argument("--out-params", help="parameter report path")
    p.add_argument("--out-winds", help="segment winds CSV path")
    p.add_argument("--segment-seconds", type=float)
    p.add_argument("--max-iter", type=int)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("bench", parents=[common],
                       help="forward-pass timing for two geometries")
    p.add_argument("--dims", help="small geometry (default 64)")
    p.add_argument("--large", help="large geometry (default 96,96,64)")
    p.add_argument("--runs", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=_cmd_bench)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ObservabilityError, DivergenceError, TrainAbort,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GridError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
