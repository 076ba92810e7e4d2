"""Model evaluation: paired-point metrics, baselines, mast and flight studies.

Everything here scores a *predictor* against held-out measurements. A
predictor is any callable ``(grid, observations) -> FlowGrid`` where the
input grid carries terrain (and optionally a precomputed "dist" channel)
and the returned grid carries predicted channels. The network, the
constant AVG baseline, and the label-as-model stub used in tests all fit
this shape, so the ensemble and window drivers below are model-agnostic.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .gridcore import (
    FlowGrid,
    GridError,
    ObservationSet,
    TrilinearStencil,
    distance_transform,
    linear_index,
    merge_cell_samples,
)
from .net import WindNet
from .sparse import LABEL_CHANNELS, FillMode, fill_unobserved

VELOCITY_CHANNELS = ("ux", "uy", "uz")
#: column order for report CSVs; quantities absent from a report stay blank
REPORT_QUANTITIES = ("S", "ux", "uy", "uz", "tke")

Predictor = Callable[[FlowGrid, ObservationSet], FlowGrid]


# ---------------------------------------------------------------------------
# paired-series metrics

@dataclass(frozen=True)
class Metrics:
    """Scores for one scalar quantity over paired prediction/measurement samples."""

    eps: float                # mean absolute error
    rho: float | None         # Pearson correlation; None when undefined
    bias: float               # mean(pred - meas), signed
    rmse: float
    count: int


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    """Two-pass Pearson correlation; None when either series is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise GridError("correlation needs series of equal length")
    n = a.size
    if n < 2:
        return None
    da = a - a.mean()
    db = b - b.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va == 0.0 or vb == 0.0:
        return None
    return float((da @ db) / math.sqrt(va * vb))


def series_metrics(pred: np.ndarray, meas: np.ndarray) -> Metrics:
    """Score one predicted series against measurements, paired by index."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    meas = np.asarray(meas, dtype=np.float64).ravel()
    if pred.shape != meas.shape:
        raise GridError("prediction / measurement length mismatch")
    if pred.size == 0:
        raise GridError("cannot score an empty series")
    if not (np.isfinite(pred).all() and np.isfinite(meas).all()):
        raise GridError("non-finite value in scored series")
    diff = pred - meas
    return Metrics(
        eps=float(np.abs(diff).mean()),
        rho=pearson(pred, meas),
        bias=float(diff.mean()),
        rmse=float(np.sqrt((diff ** 2).mean())),
        count=pred.size,
    )


@dataclass
class MetricReport:
    """Per-quantity metrics for one evaluation (one case, one input set)."""

    scores: dict[str, Metrics]
    n_points: int

    def __getitem__(self, quantity: str) -> Metrics:
        return self.scores[quantity]

    def __contains__(self, quantity: str) -> bool:
        return quantity in self.scores


def metric_report(pred: Mapping[str, np.ndarray],
                  meas: Mapping[str, np.ndarray]) -> MetricReport:
    """Score all quantities both sides provide.

    Velocity components are scored individually plus as the speed
    magnitude "S" built from the shared components. Predicted TKE is
    clamped at zero before scoring; negative turbulence energy is a model
    artefact, not a physical claim.
    """
    scores: dict[str, Metrics] = {}
    vel = [c for c in VELOCITY_CHANNELS if c in pred and c in meas]
    n_points = 0
    for c in vel:
        scores[c] = series_metrics(pred[c], meas[c])
        n_points = scores[c].count
    if vel:
        ps = np.sqrt(sum(np.asarray(pred[c], dtype=np.float64) ** 2 for c in vel))
        ms = np.sqrt(sum(np.asarray(meas[c], dtype=np.float64) ** 2 for c in vel))
        scores["S"] = series_metrics(ps, ms)
    if "tke" in pred and "tke" in meas:
        scores["tke"] = series_metrics(
            np.maximum(np.asarray(pred["tke"], dtype=np.float64), 0.0), meas["tke"])
        n_points = max(n_points, scores["tke"].count)
    if not scores:
        raise GridError("no common quantity between prediction and measurement")
    return MetricReport(scores=scores, n_points=n_points)


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Unweighted mean of several reports, per quantity.

    Correlations average over the reports where they are defined; if none
    define one, it stays undefined. Counts add up.
    """
    if not reports:
        raise GridError("no reports to average")
    out: dict[str, Metrics] = {}
    for q in {q for r in reports for q in r.scores}:
        per = [r.scores[q] for r in reports if q in r.scores]
        rhos = [m.rho for m in per if m.rho is not None]
        out[q] = Metrics(
            eps=float(np.mean([m.eps for m in per])),
            rho=float(np.mean(rhos)) if rhos else None,
            bias=float(np.mean([m.bias for m in per])),
            rmse=float(np.mean([m.rmse for m in per])),
            count=sum(m.count for m in per),
        )
    return MetricReport(scores=out, n_points=sum(r.n_points for r in reports))


# ---------------------------------------------------------------------------
# dense-field errors

def relative_field_error(pred: np.ndarray, label: np.ndarray,
                         mask: np.ndarray) -> float:
    """Mean |pred - label| over masked cells, normalized by mean |label|."""
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape or pred.shape != mask.shape:
        raise GridError("field / mask shapes disagree")
    if not mask.any():
        raise GridError("empty evaluation mask")
    scale = float(np.abs(label[mask]).mean())
    if scale == 0.0:
        raise GridError("label magnitude is zero; relative error undefined")
    return float(np.abs(pred[mask] - label[mask]).mean() / scale)


def altitude_mask(grid: FlowGrid, min_cells_above: int = 4) -> np.ndarray:
    """Free cells at least `min_cells_above` cells above the local ground.

    Zero keeps every free cell (the unfiltered case); four drops the
    near-surface band where interpolated references are least trusted.
    """
    if min_cells_above < 0:
        raise GridError("altitude threshold must be >= 0")
    return grid.free & (grid.cells_above_terrain() >= min_cells_above)


def velocity_norm_error(pred: FlowGrid, label: FlowGrid, *,
                        min_cells_above: int = 0) -> float:
    """Relative error of the wind-speed magnitude over (filtered) free cells."""
    vel = [c for c in VELOCITY_CHANNELS
           if c in pred.channels and c in label.channels]
    if not vel:
        raise GridError("no shared velocity channels")
    pn = np.sqrt(sum(pred.channels[c] ** 2 for c in vel))
    ln = np.sqrt(sum(label.channels[c] ** 2 for c in vel))
    return relative_field_error(pn, ln, altitude_mask(label, min_cells_above))


# ---------------------------------------------------------------------------
# predictors

def observation_means(obs: ObservationSet) -> dict[str, float]:
    """Per-channel mean of all raw measurements (cell means reweighted)."""
    if len(obs) == 0:
        raise GridError("cannot average an empty observation set")
    w = obs.weights.astype(np.float64)
    means = (obs.values * w[:, None]).sum(axis=0) / w.sum()
    return dict(zip(obs.channel_names, means))


def avg_predictor(grid: FlowGrid, obs: ObservationSet) -> FlowGrid:
    """Location-free baseline: every cell gets the mean observation.

    Its correlation against any varying measurement series is undefined
    (constant prediction), which the metrics report as None rather than 0.
    """
    means = observation_means(obs)
    out = grid.copy(channels=False)
    for name, value in means.items():
        out.add_channel(name, np.full(grid.geom.shape, value))
    return out


def label_predictor(label: FlowGrid) -> Predictor:
    """Oracle stub that ignores the observations and returns the label."""

    def run(grid: FlowGrid, obs: ObservationSet) -> FlowGrid:
        if grid.dims != label.dims:
            raise GridError("label stub used on a mismatched grid")
        return label

    return run


def net_predictor(model: WindNet, *, fill: FillMode = FillMode.AVERAGE) -> Predictor:
    """Wrap a trained network as a predictor over sparse observations."""
    spec = model.spec
    need = ("ux", "uy", "uz") if spec.in_channels == 5 else ("ux", "uy")

    def run(grid: FlowGrid, obs: ObservationSet) -> FlowGrid:
        geom = grid.geom
        obs.validate(geom, grid.terrain)
        if len(obs) == 0:
            raise GridError("cannot predict from zero observations")
        missing = [c for c in need if c not in obs.channel_names]
        if missing:
            raise GridError(f"observations lack input channels {missing}")
        mask = np.zeros(geom.shape, dtype=bool)
        lin = linear_index(geom, obs.cells)
        mask.ravel()[lin] = True
        order = np.argsort(lin)  # align values with C-order boolean indexing
        cols = {c: obs.values[order, obs.channel_names.index(c)] for c in need}
        dist = grid.channels.get("dist")
        if dist is None:
            dist = distance_transform(grid.terrain, geom.res)
        planes = [np.asarray(dist, dtype=np.float64), mask.astype(np.float64)]
        planes += [fill_unobserved(mask, cols[c], fill) for c in need]
        x = torch.from_numpy(np.stack(planes).astype(np.float32))[None]
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                y = model(x)[0].double().numpy()
        finally:
            model.train(was_training)
        out = grid.copy(channels=False)
        for j, name in enumerate(LABEL_CHANNELS):
            out.add_channel(name, y[j])
        return out

    return run


# ---------------------------------------------------------------------------
# tolerant point sampling

def sample_points(grid: FlowGrid, points: np.ndarray,
                  channels: Sequence[str]) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Trilinear-sample several channels; out-of-domain points become NaN.

    Returns (values per channel, in_domain flags). Unlike trilinear_sample
    this never raises for stray points, so evaluation loops can keep going
    and report how many samples fell outside.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    frac = grid.geom.world_to_frac(points)
    hi = np.asarray(grid.dims, dtype=np.float64) - 1.0
    ok = np.all((frac >= -1e-9) & (frac <= hi + 1e-9), axis=1)
    out = {c: np.full(len(points), np.nan) for c in channels}
    if ok.any():
        st = TrilinearStencil(grid.geom, points[ok])
        for c in channels:
            if c not in grid.channels:
                raise GridError(f"no channel {c!r} in prediction grid")
            vals = np.full(len(points), np.nan)
            vals[ok] = st.apply(grid.channels[c])
            out[c] = vals
    return out, ok


def embed_observations(grid: FlowGrid, points: np.ndarray, values: np.ndarray,
                       channel_names: tuple[str, ...]) -> tuple[ObservationSet, int, int]:
    """Bin world-point measurements into grid cells.

    Points outside the domain are dropped, as are points whose cell is
    solid terrain; the two drop counts come back for the caller's notes.
    Same-cell samples are averaged with their counts kept as weights.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    geom = grid.geom
    # cell_of clips to bounds, so out-of-domain detection must come first
    idx = np.floor((points - np.asarray(geom.origin)) / np.asarray(geom.res))
    dims = np.asarray(geom.dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    n_outside = int((~inside).sum())
    cells = idx[inside].astype(np.int64)
    vals = values[inside]
    ix, iy, iz = cells.T
    in_air = ~grid.terrain[iz, iy, ix]
    n_buried = int((~in_air).sum())
    cells = cells[in_air]
    vals = vals[in_air]
    if len(cells) == 0:
        obs = ObservationSet(np.zeros((0, 3), dtype=np.int64),
                             np.zeros((0, len(channel_names))),
                             np.zeros(0, dtype=np.int64), channel_names)
        return obs, n_outside, n_buried
    mcells, mvals, counts = merge_cell_samples(cells, vals, geom.dims)
    return ObservationSet(mcells, mvals, counts, channel_names), n_outside, n_buried


# ---------------------------------------------------------------------------
# mast ensemble study

@dataclass
class Mast:
    """One measurement mast: sensor locations in world space plus readings."""

    mast_id: str
    points: np.ndarray                     # (n, 3) world
    values: np.ndarray                     # (n, k)
    channel_names: tuple[str, ...] = VELOCITY_CHANNELS

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.points.shape[0] != self.values.shape[0]:
            raise GridError(f"mast {self.mast_id}: point / value count mismatch")
        if self.values.shape[1] != len(self.channel_names):
            raise GridError(f"mast {self.mast_id}: value columns do not match channels")


@dataclass
class EnsembleResult:
    per_mast: dict[str, MetricReport]      # keyed by the input mast
    ensemble: MetricReport
    notes: list[str] = field(default_factory=list)


def mast_ensemble_eval(grid: FlowGrid, masts: Sequence[Mast],
                       predictor: Predictor) -> EnsembleResult:
    """Leave-one-in cross evaluation over masts.

    Each mast in turn is the sole input; the prediction is sampled at the
    remaining masts' sensor locations and scored against their readings.
    Masts contributing no usable measurement (all outside the domain or
    buried in terrain) are skipped with a note. The ensemble row is the
    unweighted average over the scored input masts.
    """
    if len(masts) < 2:
        raise GridError("mast ensemble needs at least two masts")
    notes: list[str] = []
    usable: dict[str, tuple[ObservationSet, np.ndarray]] = {}
    for m in masts:
        obs, n_out, n_buried = embed_observations(grid, m.points, m.values,
                                                  m.channel_names)
        if n_out:
            notes.append(f"mast {m.mast_id}: {n_out} sensor(s) outside the domain")
        if n_buried:
            notes.append(f"mast {m.mast_id}: {n_buried} sensor(s) inside terrain")
        frac = grid.geom.world_to_frac(m.points)
        hi = np.asarray(grid.dims, dtype=np.float64) - 1.0
        in_dom = np.all((frac >= -1e-9) & (frac <= hi + 1e-9), axis=1)
        if len(obs) == 0:
            notes.append(f"mast {m.mast_id} skipped: no usable measurements")
            continue
        usable[m.mast_id] = (obs, in_dom)
    if len(usable) < 2:
        raise GridError("fewer than two masts have usable measurements")

    per_mast: dict[str, MetricReport] = {}
    for m in masts:
        if m.mast_id not in usable:
            continue
        obs, _ = usable[m.mast_id]
        pred_grid = predictor(grid, obs)
        pred_cols: dict[str, list[np.ndarray]] = {}
        meas_cols: dict[str, list[np.ndarray]] = {}
        for other in masts:
            if other.mast_id == m.mast_id or other.mast_id not in usable:
                continue
            _, in_dom = usable[other.mast_id]
            pts = other.points[in_dom]
            if len(pts) == 0:
                continue
            want = [c for c in other.channel_names if c in pred_grid.channels]
            sampled, _ = sample_points(pred_grid, pts, want)
            for c in want:
                pred_cols.setdefault(c, []).append(sampled[c])
                meas_cols.setdefault(c, []).append(
                    other.values[in_dom, other.channel_names.index(c)])
        if not pred_cols:
            notes.append(f"mast {m.mast_id}: no evaluation points at other masts")
            continue
        pred = {c: np.concatenate(v) for c, v in pred_cols.items()}
        meas = {c: np.concatenate(v) for c, v in meas_cols.items()}
        per_mast[m.mast_id] = metric_report(pred, meas)
    if not per_mast:
        raise GridError("no mast produced an evaluable prediction")
    return EnsembleResult(per_mast=per_mast,
                          ensemble=average_reports(list(per_mast.values())),
                          notes=notes)


# ---------------------------------------------------------------------------
# flight-window study

class WindowMode(enum.Enum):
    SLIDING = "sliding"
    LOITER_AVG = "loiter_avg"


@dataclass
class VehicleStream:
    """Time-stamped in-flight wind estimates from one vehicle."""

    vehicle_id: str
    t: np.ndarray                          # (n,) seconds, nondecreasing
    points: np.ndarray                     # (n, 3) world
    values: np.ndarray                     # (n, k)
    channel_names: tuple[str, ...] = VELOCITY_CHANNELS
    loiter_id: np.ndarray | None = None    # (n,) int, -1 = not in a loiter

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).ravel()
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        n = self.t.size
        if self.points.shape[0] != n or self.values.shape[0] != n:
            raise GridError(f"stream {self.vehicle_id}: array lengths disagree")
        if n and np.any(np.diff(self.t) < 0):
            raise GridError(f"stream {self.vehicle_id}: timestamps must be sorted")
        if self.loiter_id is not None:
            self.loiter_id = np.asarray(self.loiter_id, dtype=np.int64).ravel()
            if self.loiter_id.size != n:
                raise GridError(f"stream {self.vehicle_id}: loiter ids length mismatch")


@dataclass
class WindowScore:
    index: int
    t_start: float
    t_end: float
    n_input: int                           # observation cells fed to the model
    report: MetricReport


def window_eval(grid: FlowGrid, streams: Sequence[VehicleStream],
                predictor: Predictor, *, window: float = 120.0,
                mode: WindowMode = WindowMode.SLIDING,
                ) -> tuple[list[WindowScore], list[str]]:
    """Score forecasts across consecutive time windows.

    SLIDING bins every measurement of window k into cells, predicts once,
    and samples that prediction at window k+1's points of all vehicles
    (the predicting vehicle included). LOITER_AVG collapses each labelled
    loiter to a single averaged observation and does the same across
    consecutive loiters, ordered by their mean time. Windows without a
    usable input or without in-domain evaluation points are skipped with a
    note rather than failing the run.
    """
    if not streams or all(s.t.size == 0 for s in streams):
        raise GridError("no flight data to evaluate")
    if mode is WindowMode.SLIDING:
        if window <= 0:
            raise GridError("window length must be positive")
        groups = _time_windows(streams, window)
    elif mode is WindowMode.LOITER_AVG:
        groups = _loiter_groups(streams)
    else:  # pragma: no cover - enum is closed
        raise GridError(f"unknown window mode {mode!r}")
    if len(groups) < 2:
        raise GridError("need at least two windows for a forecast transition")

    names = streams[0].channel_names
    scores: list[WindowScore] = []
    notes: list[str] = []
    for k in range(len(groups) - 1):
        t0, t1, in_pts, in_vals = groups[k]
        _, t2, ev_pts, ev_vals = groups[k + 1]
        if mode is WindowMode.LOITER_AVG:
            # one synthetic observation per loiter: the circling average
            in_pts = in_pts.mean(axis=0, keepdims=True)
            in_vals = in_vals.mean(axis=0, keepdims=True)
        obs, n_out, n_buried = embed_observations(grid, in_pts, in_vals, names)
        if n_out or n_buried:
            notes.append(f"window {k}: dropped {n_out} outside / "
                         f"{n_buried} buried input sample(s)")
        if len(obs) == 0:
            notes.append(f"window {k} skipped: no in-domain measurements")
            continue
        pred_grid = predictor(grid, obs)
        want = [c for c in names if c in pred_grid.channels]
        sampled, ok = sample_points(pred_grid, ev_pts, want)
        if not ok.any():
            notes.append(f"window {k} skipped: no in-domain evaluation points")
            continue
        pred = {c: sampled[c][ok] for c in want}
        meas = {c: ev_vals[ok, names.index(c)] for c in want}
        scores.append(WindowScore(index=k, t_start=t0, t_end=t2,
                                  n_input=len(obs),
                                  report=metric_report(pred, meas)))
    return scores, notes


def _time_windows(streams, window):
    t0 = min(float(s.t.min()) for s in streams if s.t.size)
    t_max = max(float(s.t.max()) for s in streams if s.t.size)
    n_win = int((t_max - t0) // window) + 1
    out = []
    for k in range(n_win):
        lo, hi = t0 + k * window, t0 + (k + 1) * window
        pts, vals = [], []
        for s in streams:
            sel = (s.t >= lo) & (s.t < hi)
            pts.append(s.points[sel])
            vals.append(s.values[sel])
        out.append((lo, hi, np.concatenate(pts), np.concatenate(vals)))
    return out


def _loiter_groups(streams):
    groups = []
    for s in streams:
        if s.loiter_id is None:
            raise GridError(f"stream {s.vehicle_id} has no loiter ids; "
                            "LOITER_AVG needs them")
        for lid in np.unique(s.loiter_id):
            if lid < 0:
                continue
            sel = s.loiter_id == lid
            groups.append((float(s.t[sel].min()), float(s.t[sel].max()),
                           s.points[sel], s.values[sel]))
    if not groups:
        raise GridError("no labelled loiters in any stream")
    groups.sort(key=lambda g: 0.5 * (g[0] + g[1]))
    return groups


# ---------------------------------------------------------------------------
# line profiles

@dataclass(frozen=True)
class LineSample:
    s: float                               # along-track distance
    x: float
    y: float
    z: float
    in_domain: bool
    values: dict[str, float]               # NaN where out of domain


def extract_line(grid: FlowGrid, start_xy: tuple[float, float],
                 end_xy: tuple[float, float], height_agl: float,
                 n: int, channels: Sequence[str] | None = None) -> list[LineSample]:
    """Sample a horizontal transect at fixed height above the local terrain.

    The terrain surface is interpolated bilinearly between columns, so the
    line follows smooth ground even on coarse grids. Samples falling
    outside the domain are flagged, not fatal; their values are NaN.
    """
    if n < 2:
        raise GridError("a line needs at least two samples")
    if channels is None:
        channels = [c for c in ("ux", "uy", "uz", "tke") if c in grid.channels]
    surface = grid.terrain_surface()       # [ny, nx]
    geom = grid.geom
    frac_t = np.linspace(0.0, 1.0, n)
    xs = start_xy[0] + frac_t * (end_xy[0] - start_xy[0])
    ys = start_xy[1] + frac_t * (end_xy[1] - start_xy[1])
    track = math.hypot(end_xy[0] - start_xy[0], end_xy[1] - start_xy[1])

    fx = (xs - geom.origin[0]) / geom.res[0] - 0.5
    fy = (ys - geom.origin[1]) / geom.res[1] - 0.5
    cx = np.clip(fx, 0.0, geom.dims[0] - 1.0)
    cy = np.clip(fy, 0.0, geom.dims[1] - 1.0)
    ix0 = np.minimum(np.floor(cx).astype(int), max(geom.dims[0] - 2, 0))
    iy0 = np.minimum(np.floor(cy).astype(int), max(geom.dims[1] - 2, 0))
    tx = cx - ix0
    ty = cy - iy0
    ix1 = np.minimum(ix0 + 1, geom.dims[0] - 1)
    iy1 = np.minimum(iy0 + 1, geom.dims[1] - 1)
    ground = ((1 - ty) * ((1 - tx) * surface[iy0, ix0] + tx * surface[iy0, ix1])
              + ty * ((1 - tx) * surface[iy1, ix0] + tx * surface[iy1, ix1]))
    zs = ground + height_agl

    points = np.stack([xs, ys, zs], axis=1)
    sampled, ok = sample_points(grid, points, channels)
    horiz_ok = (np.abs(fx - cx) < 1e-9) & (np.abs(fy - cy) < 1e-9)
    ok = ok & horiz_ok
    out = []
    for i in range(n):
        vals = {c: float(sampled[c][i]) if ok[i] else float("nan")
                for c in channels}
        vel = [c for c in VELOCITY_CHANNELS if c in vals]
        if vel:
            vals["S"] = math.sqrt(sum(vals[c] ** 2 for c in vel)) \
                if ok[i] else float("nan")
        out.append(LineSample(s=float(frac_t[i] * track), x=float(xs[i]),
                              y=float(ys[i]), z=float(zs[i]),
                              in_domain=bool(ok[i]), values=vals))
    return out


def write_line_csv(path, samples: Sequence[LineSample]) -> None:
    keys = sorted({k for s in samples for k in s.values})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "x", "y", "z", "in_domain", *keys])
        for s in samples:
            w.writerow([f"{s.s:.6g}", f"{s.x:.6g}", f"{s.y:.6g}", f"{s.z:.6g}",
                        int(s.in_domain),
                        *[f"{s.values.get(k, float('nan')):.8g}" for k in keys]])


# ---------------------------------------------------------------------------
# scalar utilities

def magnitude_std(wind: Sequence[float], sigma: Sequence[float]) -> float | None:
    """First-order std of the wind magnitude from per-component stds.

    sigma_S = sqrt(sum_i (W_i sigma_i)^2) / S. Undefined (None) at S = 0,
    where the magnitude is not differentiable.
    """
    w = np.asarray(wind, dtype=np.float64).ravel()
    s = np.asarray(sigma, dtype=np.float64).ravel()
    if w.shape != s.shape:
        raise GridError("wind and sigma need the same number of components")
    if np.any(s < 0):
        raise GridError("negative standard deviation")
    mag = float(np.linalg.norm(w))
    if mag == 0.0:
        return None
    return float(np.sqrt(((w * s) ** 2).sum()) / mag)


def speedup_error(pred: np.ndarray, pred_ref, meas: np.ndarray, meas_ref) -> float:
    """Mean absolute error of the fractional speed-up (S/S_ref - 1).

    References may be scalars or per-point arrays; points whose reference
    speed is zero on either side are skipped (speed-up undefined there).
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    meas = np.asarray(meas, dtype=np.float64).ravel()
    if pred.shape != meas.shape:
        raise GridError("prediction / measurement length mismatch")
    pr = np.broadcast_to(np.asarray(pred_ref, dtype=np.float64), pred.shape)
    mr = np.broadcast_to(np.asarray(meas_ref, dtype=np.float64), meas.shape)
    valid = (pr != 0) & (mr != 0)
    if not valid.any():
        raise GridError("all reference speeds are zero; speed-up undefined")
    dp = pred[valid] / pr[valid] - 1.0
    dm = meas[valid] / mr[valid] - 1.0
    return float(np.abs(dp - dm).mean())


# ---------------------------------------------------------------------------
# report output

def write_report_csv(path, rows: Iterable[tuple[str, str, MetricReport]]) -> None:
    """One CSV row per (case, input id); undefined correlations stay blank."""
    header = ["case", "input"]
    for q in REPORT_QUANTITIES:
        header += [f"{q}_eps", f"{q}_rho", f"{q}_bias", f"{q}_rmse", f"{q}_n"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for case, input_id, report in rows:
            row: list[str] = [case, input_id]
            for q in REPORT_QUANTITIES:
                if q in report:
                    m = report[q]
                    row += [f"{m.eps:.8g}",
                            "" if m.rho is None else f"{m.rho:.8g}",
                            f"{m.bias:.8g}", f"{m.rmse:.8g}", str(m.count)]
                else:
                    row += ["", "", "", "", ""]
            w.writerow(row)
