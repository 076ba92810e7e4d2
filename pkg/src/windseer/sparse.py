"""Sparse network inputs: trajectory masks, measurement noise, and fills.

The training input imitates what a drone actually measures: a handful of
cells along a flight path, corrupted by sensor noise, with the rest of
the domain unknown. A sample is composed from a dense label grid by
rasterizing a random piecewise-linear trajectory, copying the label wind
at the visited cells, perturbing those values, and completing the dense
input channels with a fill strategy.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .gridcore import FlowGrid, GridError

_STEP_BUDGET = 100_000  # boundary crossings per segment before giving up


class FillMode(enum.Enum):
    ZERO = "zero"
    AVERAGE = "average"
    VORONOI = "voronoi"


@dataclass(frozen=True)
class NoiseSpec:
    """Disturbance magnitudes as fractions of the sample mean wind speed."""

    gaussian_std_max: float = 0.1
    bias_max: float = 0.1

    def __post_init__(self):
        if self.gaussian_std_max < 0 or self.bias_max < 0:
            raise GridError("noise fractions must be non-negative")


@dataclass(frozen=True)
class NoiseDraw:
    """Realized per-sample noise parameters: one sigma, one bias per channel."""

    sigma: float
    bias: tuple[float, ...]


def draw_noise(rng: np.random.Generator, mean_speed: float, spec: NoiseSpec,
               n_channels: int) -> NoiseDraw:
    if mean_speed < 0:
        raise GridError("mean speed must be non-negative")
    sigma = float(rng.uniform(0.0, spec.gaussian_std_max * mean_speed))
    bias = tuple(float(b) for b in
                 rng.uniform(-spec.bias_max * mean_speed,
                             spec.bias_max * mean_speed, size=n_channels))
    return NoiseDraw(sigma, bias)


def add_noise(values: np.ndarray, draw: NoiseDraw,
              rng: np.random.Generator) -> np.ndarray:
    """values[n_obs, n_channels] + iid Gaussian + per-channel bias."""
    values = np.asarray(values, dtype=np.float64)
    out = values + rng.normal(0.0, draw.sigma, size=values.shape)
    return out + np.asarray(draw.bias)[None, :]


def apply_noise(values: np.ndarray, mean_speed: float, spec: NoiseSpec,
                rng: np.random.Generator) -> np.ndarray:
    """One-shot noise application; labels are never touched, only copies."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise GridError("expected observations shaped [n_obs, n_channels]")
    return add_noise(values, draw_noise(rng, mean_speed, spec, values.shape[1]), rng)


# --- trajectory rasterization -------------------------------------------------

def _unit_sphere(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    n = np.linalg.norm(v)
    while n < 1e-12:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
    return v / n


def _walk(pos: np.ndarray, direction: np.ndarray, n_new: int,
          terrain: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """March a ray through the index lattice, reflecting at domain walls,
    marking previously unmarked free cells until n_new of them are set.

    pos is in continuous index coordinates (cell i spans [i, i+1)); the
    direction array is mutated by reflections. Returns the end position.
    The budget guard stops pathological walks (e.g. fewer free cells than
    requested) without error; the mask is simply less full.
    """
    nz, ny, nx = terrain.shape
    lim = np.array([nx, ny, nz], dtype=np.float64)
    counted = 0
    for _ in range(_STEP_BUDGET):
        ix, iy, iz = (min(int(pos[a]), int(lim[a]) - 1) for a in range(3))
        if not terrain[iz, iy, ix] and not mask[iz, iy, ix]:
            mask[iz, iy, ix] = True
            counted += 1
            if counted >= n_new:
                break
        # distance to the next lattice plane along each axis
        t = np.full(3, np.inf)
        for a in range(3):
            d = direction[a]
            if d > 1e-12:
                t[a] = (math.floor(pos[a]) + 1.0 - pos[a]) / d
            elif d < -1e-12:
                t[a] = (math.floor(pos[a]) - pos[a]) / d
            if t[a] <= 0.0:   # sitting on a boundary: full cell ahead
                t[a] = 1.0 / abs(d)
        pos += direction * (t.min() + 1e-9)
        for a in range(3):
            if pos[a] < 0.0:
                pos[a] = -pos[a]
                direction[a] = -direction[a]
            elif pos[a] > lim[a]:
                pos[a] = 2.0 * lim[a] - pos[a]
                direction[a] = -direction[a]
    return pos


def rasterize_segment(start_cell, direction, length: int,
                      terrain: np.ndarray,
                      mask: np.ndarray | None = None) -> np.ndarray:
    """Mark `length` distinct free cells along one ray from a cell center.

    Deterministic building block of the random mask sampler; exposed so the
    cell-count behavior can be pinned directly.
    """
    if mask is None:
        mask = np.zeros(terrain.shape, dtype=bool)
    d = np.asarray(direction, dtype=np.float64).copy()
    n = np.linalg.norm(d)
    if n < 1e-12:
        raise GridError("zero-length direction")
    ix, iy, iz = start_cell
    pos = np.array([ix + 0.5, iy + 0.5, iz + 0.5])
    _walk(pos, d / n, length, terrain, mask)
    return mask


def sample_trajectory_mask(dims, terrain: np.ndarray, rng: np.random.Generator,
                           *, min_len: int = 3, max_len: int = 500,
                           segments: int = 1,
                           max_start_tries: int = 1000) -> np.ndarray:
    """Observation mask along a random piecewise-linear flight path.

    Segments chain end-to-start: each picks a fresh direction, uniform on
    the sphere, and a fresh length, uniform on [min_len, max_len] counted
    in distinct free cells. Terrain is flown through without marking.
    """
    nx, ny, nz = dims
    if terrain.shape != (nz, ny, nx):
        raise GridError(f"terrain shape {terrain.shape} does not match dims {tuple(dims)}")
    if not (1 <= min_len <= max_len):
        raise GridError("need 1 <= min_len <= max_len")
    mask = np.zeros_like(terrain, dtype=bool)
    for _ in range(max_start_tries):
        cell = (int(rng.integers(nx)), int(rng.integers(ny)), int(rng.integers(nz)))
        if not terrain[cell[2], cell[1], cell[0]]:
            break
    else:
        raise GridError(f"no free start cell found in {max_start_tries} tries")
    pos = np.array([cell[0] + 0.5, cell[1] + 0.5, cell[2] + 0.5])
    for _ in range(segments):
        length = int(rng.integers(min_len, max_len + 1))
        pos = _walk(pos, _unit_sphere(rng), length, terrain, mask)
    return mask


# --- fills ---------------------------------------------------------------------

def _voronoi_assign(mask: np.ndarray) -> np.ndarray:
    """Index of the nearest observed cell for every cell, ties to the lowest
    linear index. Brute force in chunks; observation counts are small."""
    nz, ny, nx = mask.shape
    obs = np.argwhere(mask)                       # [n_obs, 3] (z, y, x), C order
    # C-order argwhere is already sorted by linear index, which makes
    # argmin's first-hit rule implement the tie-break
    kk, jj, ii = np.unravel_index(np.arange(mask.size), mask.shape)
    grid_pts = np.stack([kk, jj, ii], axis=1).astype(np.float64)
    owner = np.empty(mask.size, dtype=np.int64)
    chunk = max(1, 2_000_000 // max(len(obs), 1))
    of = obs.astype(np.float64)
    for s in range(0, mask.size, chunk):
        d2 = ((grid_pts[s:s + chunk, None, :] - of[None, :, :]) ** 2).sum(axis=2)
        owner[s:s + chunk] = np.argmin(d2, axis=1)
    return owner


def fill_unobserved(mask: np.ndarray, values: np.ndarray,
                    mode: FillMode) -> np.ndarray:
    """Dense channel from sparse observations.

    `values` holds the observed scalars in the C-order of the mask cells.
    Observed cells always carry their own value; unobserved cells get the
    fill. ZERO works with no observations, the other modes do not.
    """
    values = np.asarray(values, dtype=np.float64)
    n_obs = int(mask.sum())
    if values.shape != (n_obs,):
        raise GridError(f"expected {n_obs} values, got shape {values.shape}")
    if mode is not FillMode.ZERO and n_obs == 0:
        raise GridError(f"{mode.value} fill requires at least one observation")
    if mode is FillMode.ZERO:
        out = np.zeros(mask.shape)
    elif mode is FillMode.AVERAGE:
        out = np.full(mask.shape, values.mean())
    elif mode is FillMode.VORONOI:
        out = values[_voronoi_assign(mask)].reshape(mask.shape)
    else:  # pragma: no cover
        raise GridError(f"unknown fill mode {mode!r}")
    out[mask] = values
    return out


# --- composition ----------------------------------------------------------------

LABEL_CHANNELS = ("ux", "uy", "uz", "tke")


@dataclass
class ComposedSample:
    """Everything one training example needs, detached from the source grid."""

    inputs: np.ndarray        # [4 or 5, nz, ny, nx] float32: T, B, Ux, Uy(, Uz)
    labels: np.ndarray        # [4, nz, ny, nx] float32: ux, uy, uz, tke
    terrain: np.ndarray       # [nz, ny, nx] bool
    n_free: int
    label_scales: np.ndarray  # [4] mean |label| over free cells, per channel
    mean_speed: float


def label_scales(labels: np.ndarray, free: np.ndarray) -> np.ndarray:
    """Per-channel mean absolute label over free cells; zero if none free."""
    if not free.any():
        return np.zeros(labels.shape[0])
    return np.abs(labels[:, free]).mean(axis=1)


def compose_input(label: FlowGrid, dist: np.ndarray, mask: np.ndarray,
                  noise: NoiseSpec, fill: FillMode, rng: np.random.Generator,
                  *, include_uz: bool = False) -> ComposedSample:
    """Stack the network input and label tensors for one sample.

    Input channels: distance field, binary mask, fill-completed noisy
    horizontal wind (plus vertical wind when include_uz is set). Noise is
    scaled by the label's mean free-cell speed, so calm fields pass
    through untouched. Labels are copied unperturbed.
    """
    shape = label.geom.shape
    if dist.shape != shape or mask.shape != shape:
        raise GridError("distance field / mask dims do not match the label grid")
    if (mask & label.terrain).any():
        raise GridError("mask marks terrain cells")
    labels = np.stack([label.channels[c] for c in LABEL_CHANNELS]).astype(np.float32)
    free = label.free
    n_free = int(free.sum())
    speed = np.sqrt(labels[0] ** 2 + labels[1] ** 2 + labels[2] ** 2)
    mean_speed = float(speed[free].mean()) if n_free else 0.0

    wind_names = ("ux", "uy", "uz") if include_uz else ("ux", "uy")
    obs = np.stack([label.channels[c][mask] for c in wind_names], axis=1)
    noisy = apply_noise(obs, mean_speed, noise, rng) if obs.size \
        else obs.astype(np.float64)
    channels = [np.asarray(dist, dtype=np.float64), mask.astype(np.float64)]
    channels += [fill_unobserved(mask, noisy[:, j], fill)
                 for j in range(len(wind_names))]
    return ComposedSample(
        inputs=np.stack(channels).astype(np.float32),
        labels=labels,
        terrain=label.terrain.copy(),
        n_free=n_free,
        label_scales=label_scales(labels, free),
        mean_speed=mean_speed,
    )
