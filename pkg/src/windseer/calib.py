"""In-flight airflow-sensor calibration against GNSS ground velocity.

A fixed-wing aircraft measures airspeed and two flow angles (vanes or
probes give alpha and beta). Summing the rotated air-relative velocity
and the local wind must reproduce the GNSS ground velocity; the mismatch
is the residual this module minimizes, jointly over the sensor-offset
parameters and a piecewise-constant horizontal wind.

Conventions, fixed once and used consistently throughout:
  - body axes x forward, y right, z down; world rotation is
    R = Rz(psi) @ Ry(theta) @ Rx(phi), body to world;
  - angles in radians, rates in rad/s, velocities in m/s;
  - the wind is constant over each segment and purely horizontal
    (its vertical average over minutes is negligible at these scales).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .gridcore import GridError

#: vane calibrations are trusted this far from the neutral position
VANE_LIMIT = math.radians(24.0)

#: per-segment wind averaging time, seconds
SEGMENT_SECONDS = 60.0

ALPHA_NAMES = tuple(f"p_alpha{i}" for i in range(5))
BETA_NAMES = tuple(f"p_beta{i}" for i in range(9))

#: frozen by default: the alpha offset is affine in (1, alpha, alpha*v, v),
#: which is four degrees of freedom spread over five coefficients; p_alpha4
#: only re-parameterizes the other four, so no data can pin it down
DEFAULT_FROZEN = frozenset({"p_alpha4"})


class ObservabilityError(GridError):
    """The data cannot distinguish some parameter directions."""


class DivergenceError(GridError):
    """The fit left the basin; carries the iterate trace for post-mortems."""

    def __init__(self, message: str, trace: list[tuple[int, float, float]]):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# vane transfer map

@dataclass(frozen=True)
class VaneMap:
    """Cubic transfer from raw vane flux to a flow angle, radians.

    Physical vanes are monotone transducers; a non-monotone cubic means
    the calibration points were bad, so that is rejected outright, as is
    a map whose output leaves the trusted +-24 degree range.
    """

    coeffs: tuple[float, float, float, float]   # angle = c0 + c1 f + c2 f^2 + c3 f^3
    flux_span: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.flux_span
        if not lo < hi:
            raise GridError("vane flux span is empty")
        c = self.coeffs
        if len(c) != 4 or not all(np.isfinite(c)):
            raise GridError("vane map needs four finite coefficients")
        # derivative c1 + 2 c2 f + 3 c3 f^2 must keep one sign on the span
        f = np.linspace(lo, hi, 512)
        d = c[1] + 2 * c[2] * f + 3 * c[3] * f ** 2
        if np.any(d == 0) or (d.max() > 0) == (d.min() < 0):
            raise GridError("vane map is not strictly monotone over its span")
        a = self.angle(f)
        if np.any(np.abs(a) > VANE_LIMIT + 1e-12):
            raise GridError(
                f"vane map leaves the +-{math.degrees(VANE_LIMIT):.0f} deg "
                "calibrated range")

    def angle(self, flux) -> np.ndarray:
        f = np.asarray(flux, dtype=np.float64)
        lo, hi = self.flux_span
        if np.any(f < lo - 1e-12) or np.any(f > hi + 1e-12):
            raise GridError("vane flux outside the calibrated span")
        c = self.coeffs
        return c[0] + f * (c[1] + f * (c[2] + f * c[3]))


# ---------------------------------------------------------------------------
# data and parameters

@dataclass(frozen=True)
class Levers:
    """Sensor lever arms, meters; airframe geometry, not fitted."""

    l_xbeta: float = 0.25
    l_zbeta: float = 0.05
    l_xalpha: float = 0.25
    l_yalpha: float = 0.05


@dataclass(frozen=True)
class CalibParams:
    alpha: np.ndarray                 # (5,) p_alpha0..4
    beta: np.ndarray                  # (9,) p_beta0..8
    levers: Levers = Levers()

    def __post_init__(self):
        object.__setattr__(self, "alpha",
                           np.asarray(self.alpha, dtype=np.float64).copy())
        object.__setattr__(self, "beta",
                           np.asarray(self.beta, dtype=np.float64).copy())
        if self.alpha.shape != (5,) or self.beta.shape != (9,):
            raise GridError("expected 5 alpha and 9 beta coefficients")
        if not (np.isfinite(self.alpha).all() and np.isfinite(self.beta).all()):
            raise GridError("non-finite calibration parameter")

    @classmethod
    def zeros(cls, levers: Levers = Levers()) -> "CalibParams":
        return cls(np.zeros(5), np.zeros(9), levers)

    @classmethod
    def start(cls, levers: Levers = Levers()) -> "CalibParams":
        """Default optimizer seed.

        The gate coefficients (p_alpha2, p_beta1, p_beta6) multiply every
        parameter nested inside them, so an all-zero start would zero those
        Jacobian columns and trip the observability check.  Opening the
        gates slightly keeps every direction active.
        """
        alpha = np.array([0.0, 0.0, 1e-3, 0.0, 0.0])
        beta = np.array([0.0, 1e-3, 0.0, 1.0, 0.0, 0.0, 1e-3, 1.0, 0.0])
        return cls(alpha, beta, levers)


@dataclass
class CalibData:
    """Synchronized flight samples used for one calibration run."""

    t: np.ndarray                     # (n,) seconds, nondecreasing
    att: np.ndarray                   # (n, 3) phi, theta, psi
    gyro: np.ndarray                  # (n, 3) body rates
    v_aspd: np.ndarray                # (n,) airspeed magnitude
    alpha: np.ndarray                 # (n,) raw angle of attack
    beta: np.ndarray                  # (n,) raw sideslip
    v_gnd: np.ndarray                 # (n, 3) world ground velocity

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).ravel()
        self.att = np.atleast_2d(np.asarray(self.att, dtype=np.float64))
        self.gyro = np.atleast_2d(np.asarray(self.gyro, dtype=np.float64))
        self.v_aspd = np.asarray(self.v_aspd, dtype=np.float64).ravel()
        self.alpha = np.asarray(self.alpha, dtype=np.float64).ravel()
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        self.v_gnd = np.atleast_2d(np.asarray(self.v_gnd, dtype=np.float64))
        n = self.t.size
        shapes_ok = (self.att.shape == (n, 3) and self.gyro.shape == (n, 3)
                     and self.v_gnd.shape == (n, 3)
                     and self.v_aspd.shape == (n,)
                     and self.alpha.shape == (n,) and self.beta.shape == (n,))
        if n == 0 or not shapes_ok:
            raise GridError("calibration arrays are empty or inconsistent")
        for name in ("t", "att", "gyro", "v_aspd", "alpha", "beta", "v_gnd"):
            if not np.isfinite(getattr(self, name)).all():
                raise GridError(f"non-finite value in {name}")
        if np.any(np.diff(self.t) < 0):
            raise GridError("timestamps must be nondecreasing")
        if np.any(self.v_aspd <= 0):
            raise GridError("airspeed must be positive")

    def __len__(self) -> int:
        return self.t.size


def segment_index(t: np.ndarray, seconds: float = SEGMENT_SECONDS) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return ((t - t[0]) // seconds).astype(np.int64)


def euler_to_world(att: np.ndarray) -> np.ndarray:
    """Stack of body-to-world matrices R = Rz(psi) Ry(theta) Rx(phi)."""
    att = np.atleast_2d(np.asarray(att, dtype=np.float64))
    cphi, sphi = np.cos(att[:, 0]), np.sin(att[:, 0])
    cth, sth = np.cos(att[:, 1]), np.sin(att[:, 1])
    cpsi, spsi = np.cos(att[:, 2]), np.sin(att[:, 2])
    R = np.empty((len(att), 3, 3))
    R[:, 0, 0] = cpsi * cth
    R[:, 0, 1] = cpsi * sth * sphi - spsi * cphi
    R[:, 0, 2] = cpsi * sth * cphi + spsi * sphi
    R[:, 1, 0] = spsi * cth
    R[:, 1, 1] = spsi * sth * sphi + cpsi * cphi
    R[:, 1, 2] = spsi * sth * cphi - cpsi * sphi
    R[:, 2, 0] = -sth
    R[:, 2, 1] = cth * sphi
    R[:, 2, 2] = cth * cphi
    return R


def angle_offsets(p: CalibParams, data: CalibData) -> tuple[np.ndarray, np.ndarray]:
    """Airspeed- and attitude-dependent vane offsets for every sample."""
    pa, pb = p.alpha, p.beta
    v = data.v_aspd
    a = data.alpha
    alpha_off = pa[0] + pa[1] * a + pa[2] * (a + pa[3]) * (v + pa[4])
    beta_off = (pb[0]
                + pb[1] * (v + pb[2]) * (1.0 + np.tanh(pb[3] * (a + pb[4])))
                + pb[5] * data.beta
                + pb[6] * np.tanh(pb[7] * (data.att[:, 0] + pb[8])))
    return alpha_off, beta_off


def body_airflow(p: CalibParams, data: CalibData) -> np.ndarray:
    """Air-relative velocity in body axes, lever-arm corrected, (n, 3)."""
    alpha_off, beta_off = angle_offsets(p, data)
    v = data.v_aspd
    wx, wy, wz = data.gyro.T
    lv = p.levers
    out = np.empty((len(data), 3))
    out[:, 0] = v
    out[:, 1] = v * np.tanh(data.beta - beta_off) + lv.l_xbeta * wz - lv.l_zbeta * wx
    out[:, 2] = v * np.tanh(data.alpha - alpha_off) - lv.l_xalpha * wy + lv.l_yalpha * wx
    return out


def wind_residuals(p: CalibParams, winds: np.ndarray,
                   data: CalibData, seg: np.ndarray) -> np.ndarray:
    """Closure error of the wind triangle per sample, (n, 3).

    winds is (n_segments, 2): horizontal wind per time segment; its
    vertical component is pinned at zero.
    """
    winds = np.atleast_2d(np.asarray(winds, dtype=np.float64))
    R = euler_to_world(data.att)
    air_world = np.einsum("nij,nj->ni", R, body_airflow(p, data))
    e = air_world - data.v_gnd
    e[:, 0] += winds[seg, 0]
    e[:, 1] += winds[seg, 1]
    return e


# ---------------------------------------------------------------------------
# parameter packing

def _free_names(n_seg: int, frozen: frozenset[str]) -> list[str]:
    names = [n for n in (*ALPHA_NAMES, *BETA_NAMES) if n not in frozen]
    for k in range(n_seg):
        names += [f"wind{k}_x", f"wind{k}_y"]
    return names


def _pack(p: CalibParams, winds: np.ndarray, frozen: frozenset[str]) -> np.ndarray:
    vals = [p.alpha[i] for i, n in enumerate(ALPHA_NAMES) if n not in frozen]
    vals += [p.beta[i] for i, n in enumerate(BETA_NAMES) if n not in frozen]
    return np.concatenate([vals, np.asarray(winds, dtype=np.float64).ravel()])


def _unpack(x: np.ndarray, template: CalibParams, n_seg: int,
            frozen: frozenset[str]) -> tuple[CalibParams, np.ndarray]:
    alpha = template.alpha.copy()
    beta = template.beta.copy()
    i = 0
    for j, n in enumerate(ALPHA_NAMES):
        if n not in frozen:
            alpha[j] = x[i]
            i += 1
    for j, n in enumerate(BETA_NAMES):
        if n not in frozen:
            beta[j] = x[i]
            i += 1
    winds = x[i:].reshape(n_seg, 2)
    return CalibParams(alpha, beta, template.levers), winds


# ---------------------------------------------------------------------------
# the fit

@dataclass
class FitResult:
    params: CalibParams
    winds: np.ndarray                 # (n_segments, 2)
    seg_bounds: np.ndarray            # (n_segments, 2) start/end times
    cost_trace: list[float]           # accepted costs, non-increasing
    n_iter: int
    converged: bool


def _fd_jacobian(fun, x: np.ndarray, r0_size: int) -> np.ndarray:
    J = np.empty((r0_size, x.size))
    for i in range(x.size):
        h = 1e-6 * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (fun(xp) - fun(xm)) / (2 * h)
    return J


def _check_observability(J: np.ndarray, names: Sequence[str]) -> None:
    # Columns are unit-normalized first so the test is scale-invariant:
    # it flags structural degeneracy (zero or exactly dependent columns),
    # not the benign conditioning gap between wind and gate coefficients.
    norms = np.linalg.norm(J, axis=0)
    Jn = np.divide(J, np.where(norms > 0, norms, 1.0))
    s = np.linalg.svd(Jn, compute_uv=False)
    if s[0] == 0 or s[-1] / s[0] < 1e-10 or (norms == 0).any():
        _, _, vt = np.linalg.svd(Jn)
        weak = []
        for i in np.flatnonzero(norms == 0):
            weak.append(names[i])
        for k in range(len(s)):
            if s[0] == 0 or s[k] / s[0] < 1e-10:
                v = vt[k]
                parts = [names[i] for i in np.argsort(-np.abs(v))
                         if abs(v[i]) > 0.3 and norms[i] > 0]
                if parts:
                    weak.append(" + ".join(parts))
        raise ObservabilityError(
            "data does not constrain these parameter directions "
            f"(fly more varied maneuvers): {'; '.join(weak)}")


def fit_calibration(data: CalibData, *, init: CalibParams | None = None,
                    frozen: frozenset[str] = DEFAULT_FROZEN,
                    segment_seconds: float = SEGMENT_SECONDS,
                    max_iter: int = 200, ftol: float = 1e-10,
                    lam0: float = 1e-3) -> FitResult:
    """Jointly fit sensor offsets and per-segment winds, Levenberg style.

    The damping factor starts at lam0, divides by 10 on an accepted step
    and multiplies by 10 on a rejected one; convergence is a relative
    cost decrease below ftol. Jacobians come from central differences
    with a relative step of 1e-6, which is plenty for a smooth model and
    keeps the residual code free of hand-written derivatives.
    """
    if "p_alpha4" not in frozen:
        # exact gauge direction independent of the data: the alpha offset
        # is affine in (1, alpha, alpha*v, v), so its five coefficients
        # carry only four degrees of freedom
        raise ObservabilityError(
            "p_alpha4 parameterizes an exactly flat direction "
            "(d/dp_alpha4 = p_alpha2 * d/dp_alpha1 + p_alpha2 * p_alpha3 "
            "* d/dp_alpha0); keep it frozen at a reference value")
    template = init if init is not None else CalibParams.start()
    seg = segment_index(data.t, segment_seconds)
    n_seg = int(seg.max()) + 1
    missing = sorted(set(range(n_seg)) - set(np.unique(seg).tolist()))
    if missing:
        raise ObservabilityError(
            f"time segment(s) {missing} contain no samples; their wind "
            "is unconstrained")
    names = _free_names(n_seg, frozen)
    x = _pack(template, np.zeros((n_seg, 2)), frozen)
    if 3 * len(data) < x.size:
        raise ObservabilityError(
            f"{len(data)} samples cannot constrain {x.size} unknowns")

    def residual_vec(xv: np.ndarray) -> np.ndarray:
        p, w = _unpack(xv, template, n_seg, frozen)
        return wind_residuals(p, w, data, seg).ravel()

    r = residual_vec(x)
    cost = float(r @ r)
    lam = lam0
    trace: list[tuple[int, float, float]] = [(0, cost, lam)]
    cost_trace = [cost]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if converged or cost <= 1e-24:  # at a perfect fit, nothing to descend
            converged = True
            break
        J = _fd_jacobian(residual_vec, x, r.size)
        if it == 1:
            # preflight data-adequacy gate; later iterates can pass near
            # degenerate points transiently without the fit being doomed
            _check_observability(J, names)
        g = J.T @ r
        if np.abs(g).max() <= 1e-12 * max(1.0, cost):
            converged = True           # stationary point, nothing to descend
            break
        H = J.T @ J
        # floor keeps the damped system nonsingular when a column goes
        # flat (saturated tanh), so the live coordinates can still descend
        d = np.diag(H).copy()
        d = np.maximum(d, 1e-10 * max(d.max(), 1.0))
        # Per-coordinate trust bound.  An unconstrained first step can fling
        # the tanh shape coefficients into saturation, a flat pocket no
        # amount of damping recovers from; oversized steps are rejected so
        # the lambda escalation shrinks them before evaluation.
        bound = np.maximum(1.0, np.abs(x))
        accepted = False
        while not accepted:
            try:
                step = np.linalg.solve(H + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.abs(step) <= bound):
                r_new = residual_vec(x + step)
                cost_new = float(r_new @ r_new)
            else:
                cost_new = np.inf
            if np.isfinite(cost_new) and cost_new < cost:
                x = x + step
                r = r_new
                drop = (cost - cost_new) / max(cost, 1e-300)
                cost = cost_new
                lam = max(lam / 10.0, 1e-15)
                accepted = True
                trace.append((it, cost, lam))
                cost_trace.append(cost)
                if drop < ftol or cost == 0.0:
                    converged = True
            else:
                if step is not None and np.all(np.abs(step) <= bound):
                    # the quadratic model's own predicted gain; once it is
                    # below float resolution of the cost no measurable
                    # descent exists and the fit has converged
                    pred = float(step @ ((H @ step) / 2.0 + lam * d * step))
                    if pred <= 1e-14 * max(cost, 1e-300):
                        converged = True
                        break
                lam *= 10.0
                trace.append((it, cost, lam))
                if lam > 1e12:
                    if cost <= max(1e-24, 1e-16 * cost_trace[0]):
                        # stalled at the FD noise floor, not diverging
                        converged = True
                        break
                    raise DivergenceError(
                        f"no downhill step found at iteration {it} "
                        f"(cost {cost:.6e}); the model may not describe "
                        "this data", trace)
        if converged:
            break

    p, winds = _unpack(x, template, n_seg, frozen)
    bounds = np.array([[data.t[0] + k * segment_seconds,
                        data.t[0] + (k + 1) * segment_seconds]
                       for k in range(n_seg)])
    return FitResult(params=p, winds=winds, seg_bounds=bounds,
                     cost_trace=cost_trace, n_iter=it, converged=converged)


# ---------------------------------------------------------------------------
# input and reports

CALIB_COLUMNS = ("t", "phi", "theta", "psi", "omega_x", "omega_y", "omega_z",
                 "v_aspd", "alpha", "beta", "vg_x", "vg_y", "vg_z")


def parse_calib_csv(path) -> CalibData:
    """Read a calibration log; strict, because silent sample drops here
    would bias the wind estimates rather than just shrinking the data."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = None
        for lineno, raw in enumerate(reader, start=1):
            if not raw or not "".join(raw).strip():
                continue
            if raw[0].lstrip().startswith("#"):
                continue
            cells = [c.strip() for c in raw]
            if header is None:
                if tuple(cells) != CALIB_COLUMNS:
                    raise GridError(f"{path}: bad header; expected "
                                    f"{','.join(CALIB_COLUMNS)}")
                header = cells
                continue
            if len(cells) != len(CALIB_COLUMNS):
                raise GridError(f"{path}:{lineno}: expected "
                                f"{len(CALIB_COLUMNS)} fields")
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise GridError(f"{path}:{lineno}: non-numeric field") from None
    if header is None:
        raise GridError(f"{path}: empty file")
    if not rows:
        raise GridError(f"{path}: no data rows")
    arr = np.array(rows)
    return CalibData(t=arr[:, 0], att=arr[:, 1:4], gyro=arr[:, 4:7],
                     v_aspd=arr[:, 7], alpha=arr[:, 8], beta=arr[:, 9],
                     v_gnd=arr[:, 10:13])


def write_param_report(path, result: FitResult) -> None:
    lines = []
    for name, val in zip(ALPHA_NAMES, result.params.alpha):
        lines.append(f"{name} = {float(val)!r}")
    for name, val in zip(BETA_NAMES, result.params.beta):
        lines.append(f"{name} = {float(val)!r}")
    lines.append(f"iterations = {result.n_iter}")
    lines.append(f"converged = {result.converged}")
    lines.append(f"final_cost = {float(result.cost_trace[-1])!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_wind_csv(path, result: FitResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment", "t_start", "t_end", "wind_x", "wind_y", "wind_z"])
        for k, ((t0, t1), (wx, wy)) in enumerate(
                zip(result.seg_bounds, result.winds)):
            w.writerow([k, f"{t0:.3f}", f"{t1:.3f}",
                        f"{wx:.6f}", f"{wy:.6f}", "0.000000"])
