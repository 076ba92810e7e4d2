"""Analytic wind fields over procedural hills, for desk-scale training sets.

The construction is a terrain-following sigma coordinate: the column above
each point is compressed between the ground h(x, y) and the domain top H,
the inflow log profile is evaluated in the stretched coordinate, and the
horizontal speed picks up a squeeze factor that peaks over crests and
decays toward the top. Vertical velocity follows the stream surfaces, so
the flow is tangent to the ground to first order. It is cheap, smooth,
and has the two properties a reconstruction model must learn: shear with
height and terrain-induced speed-up.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gridcore import FlowGrid, GridError, GridGeometry, write_wsgrid

KAPPA = 0.4  # von Karman constant for the mixing-length proxy


class CoarseGridWarning(UserWarning):
    """A hill radius is resolved by fewer than 3 cells."""


@dataclass(frozen=True)
class Hill:
    cx: float
    cy: float
    height: float
    radius: float


@dataclass(frozen=True)
class TerrainPatch:
    """A sum of Gaussian hills; empty means flat ground at z = 0."""

    hills: tuple[Hill, ...] = ()

    def height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        h = np.zeros(np.broadcast(x, y).shape)
        for b in self.hills:
            r2 = (x - b.cx) ** 2 + (y - b.cy) ** 2
            h += b.height * np.exp(-r2 / (2.0 * b.radius**2))
        return h

    def gradient(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gx = np.zeros(np.broadcast(x, y).shape)
        gy = np.zeros_like(gx)
        for b in self.hills:
            r2 = (x - b.cx) ** 2 + (y - b.cy) ** 2
            e = b.height * np.exp(-r2 / (2.0 * b.radius**2)) / b.radius**2
            gx += -(x - b.cx) * e
            gy += -(y - b.cy) * e
        return gx, gy


@dataclass(frozen=True)
class WindCase:
    """One inflow condition: direction, strength, and surface roughness."""

    direction: float          # radians, 0 = +x (east), pi/2 = +y (north)
    u_ref: float              # m/s at z_ref above ground
    z_ref: float = 100.0
    z0: float = 0.5           # roughness length, m
    zero: bool = False        # all-zero calm case

    def __post_init__(self):
        if not self.zero:
            if self.z0 <= 0 or self.z_ref <= self.z0:
                raise GridError(f"need 0 < z0 < z_ref, got z0={self.z0}, z_ref={self.z_ref}")
            if self.u_ref < 0:
                raise GridError("u_ref must be non-negative")


@dataclass(frozen=True)
class FlowParams:
    """Dials of the analytic construction; defaults are sane for 10 m/s winds."""

    speedup_gain: float = 2.0     # crest squeeze amplitude
    decay_power: float = 2.0      # how fast the squeeze dies toward the top
    tke_coeff: float = 1.0
    mixing_length_cap: float = 100.0  # m


def log_profile(z_agl, u_ref: float, z_ref: float = 100.0, z0: float = 0.5):
    """Logarithmic wind profile; zero at and below the roughness height."""
    z = np.maximum(np.asarray(z_agl, dtype=np.float64), z0)
    return u_ref * np.log(z / z0) / np.log(z_ref / z0)


def terrain_occupancy(geom: GridGeometry, patch: TerrainPatch) -> np.ndarray:
    """Solid cells: centers below the terrain surface (column-monotone)."""
    x = geom.axis_centers(0)
    y = geom.axis_centers(1)
    h = patch.height(x[None, :], y[:, None])            # [ny, nx]
    zc = geom.axis_centers(2)
    return zc[:, None, None] < h[None, :, :]


def hill_flow(geom: GridGeometry, patch: TerrainPatch, case: WindCase,
              params: FlowParams = FlowParams()) -> FlowGrid:
    """Evaluate the analytic flow on a grid.

    Cells inside terrain hold zeros in every channel. The calm (zero)
    case short-circuits to an all-zero field on the same terrain.
    """
    x = geom.axis_centers(0)
    y = geom.axis_centers(1)
    h = patch.height(x[None, :], y[:, None])
    gx, gy = patch.gradient(x[None, :], y[:, None])
    H = geom.top()
    if np.max(h, initial=0.0) >= 0.75 * H:
        raise GridError("terrain reaches too close to the domain top "
                        f"(max {np.max(h):.1f} m vs top {H:.1f} m)")
    for b in patch.hills:
        if b.radius < 3.0 * max(geom.res[0], geom.res[1]):
            warnings.warn(
                f"hill radius {b.radius:.1f} m under 3 cells at "
                f"{max(geom.res[0], geom.res[1]):.1f} m resolution",
                CoarseGridWarning, stacklevel=2)

    occ = terrain_occupancy(geom, patch)
    grid = FlowGrid(geom, occ)
    shape = geom.shape
    if case.zero:
        for name in ("ux", "uy", "uz", "tke"):
            grid.add_channel(name, np.zeros(shape, np.float32))
        return grid

    zc = geom.axis_centers(2)
    z_agl = zc[:, None, None] - h[None, :, :]
    squeeze = H / (H - h)                                # >= 1, peaks over crests
    zeta = np.clip(z_agl, 0.0, None) * squeeze[None, :, :]
    decay = np.clip(1.0 - zeta / H, 0.0, None) ** params.decay_power
    gain = 1.0 + params.speedup_gain * (h / (H - h))[None, :, :] * decay
    speed = log_profile(zeta, case.u_ref, case.z_ref, case.z0) * gain

    ux = speed * np.cos(case.direction)
    uy = speed * np.sin(case.direction)
    uz = (ux * gx[None, :, :] + uy * gy[None, :, :]) * np.clip(1.0 - zeta / H, 0.0, None)

    dspeed_dz = np.gradient(speed, geom.res[2], axis=0)
    mix = np.minimum(KAPPA * np.clip(z_agl, 0.0, None), params.mixing_length_cap)
    tke = params.tke_coeff * (dspeed_dz * mix) ** 2

    freef = ~occ
    for name, arr in (("ux", ux), ("uy", uy), ("uz", uz), ("tke", tke)):
        grid.add_channel(name, np.where(freef, arr, 0.0))
    return grid


def zero_flow(geom: GridGeometry, patch: TerrainPatch) -> FlowGrid:
    return hill_flow(geom, patch, WindCase(0.0, 0.0, zero=True))


# --- dataset generation -------------------------------------------------------

@dataclass(frozen=True)
class TerrainSampler:
    """Random hill fields sized relative to the domain so they always fit."""

    n_hills: tuple[int, int] = (1, 3)             # inclusive range
    height_frac: tuple[float, float] = (0.06, 0.25)   # of domain top
    radius_frac: tuple[float, float] = (0.10, 0.30)   # of min horizontal extent

    def sample(self, rng: np.random.Generator, extent: tuple[float, float],
               top: float) -> TerrainPatch:
        n = int(rng.integers(self.n_hills[0], self.n_hills[1] + 1))
        span = min(extent)
        hills = [
            Hill(cx=float(rng.uniform(0.0, extent[0])),
                 cy=float(rng.uniform(0.0, extent[1])),
                 height=float(rng.uniform(*self.height_frac)) * top,
                 radius=float(rng.uniform(*self.radius_frac)) * span)
            for _ in range(n)]
        # overlapping hills stack; rescale so the summit stays well below the lid
        xs = np.linspace(0.0, extent[0], 65)
        ys = np.linspace(0.0, extent[1], 65)
        peak = TerrainPatch(tuple(hills)).height(xs[None, :], ys[:, None]).max()
        cap = 0.6 * top
        if peak > cap:
            hills = [Hill(b.cx, b.cy, b.height * cap / peak, b.radius) for b in hills]
        return TerrainPatch(tuple(hills))


@dataclass(frozen=True)
class CaseSampler:
    u_ref: tuple[float, float] = (4.0, 14.0)
    z0: tuple[float, float] = (0.1, 1.0)
    z_ref: float = 100.0

    def sample(self, rng: np.random.Generator) -> WindCase:
        return WindCase(direction=float(rng.uniform(0.0, 2.0 * np.pi)),
                        u_ref=float(rng.uniform(*self.u_ref)),
                        z_ref=self.z_ref,
                        z0=float(rng.uniform(*self.z0)))


@dataclass(frozen=True)
class ManifestRow:
    split: str
    terrain_id: str
    case_id: str
    path: Path

    @property
    def is_zero(self) -> bool:
        return self.case_id == "zero"


def _split_counts(split, n: int) -> tuple[int, int, int]:
    s = tuple(split)
    if len(s) != 3:
        raise GridError("split needs (train, val, test)")
    if all(float(v).is_integer() for v in s) and sum(int(v) for v in s) == n:
        return tuple(int(v) for v in s)
    if abs(sum(s) - 1.0) > 1e-9:
        raise GridError(f"split fractions must sum to 1, got {s}")
    n_train = round(s[0] * n)
    n_val = round(s[1] * n)
    if n_train + n_val > n:
        n_val = n - n_train
    return n_train, n_val, n - n_train - n_val


def generate_dataset(out_dir, *, n_terrains: int = 20, cases_per_terrain: int = 2,
                     dims: tuple[int, int, int] = (64, 64, 64),
                     res: tuple[float, float, float] = (16.5, 16.5, 11.5),
                     split=(0.7, 0.15, 0.15), seed: int = 0,
                     terrain_sampler: TerrainSampler = TerrainSampler(),
                     case_sampler: CaseSampler = CaseSampler(),
                     params: FlowParams = FlowParams()) -> Path:
    """Write labeled wsgrid files plus a manifest; reruns are byte-identical.

    Each terrain gets `cases_per_terrain` wind cases and one calm case, and
    splits are assigned per terrain so no geometry leaks between them. The
    grid origin puts the bottom cell layer underground, which anchors the
    distance field and the loss mask on flat ground. Returns the manifest
    path (tab-separated: split, terrain id, case id, relative path).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    geom = GridGeometry(dims, res, (0.0, 0.0, -float(res[2])))
    extent = (dims[0] * res[0], dims[1] * res[1])
    n_train, n_val, n_test = _split_counts(split, n_terrains)
    split_of = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test

    seeds = np.random.SeedSequence(seed).spawn(n_terrains)
    rows: list[str] = []
    for t in range(n_terrains):
        rng = np.random.default_rng(seeds[t])
        patch = terrain_sampler.sample(rng, extent, geom.top())
        tdir = out_dir / f"terrain_{t:03d}"
        tdir.mkdir(exist_ok=True)
        cases = [(f"case_{c:02d}", case_sampler.sample(rng))
                 for c in range(cases_per_terrain)]
        cases.append(("zero", WindCase(0.0, 0.0, zero=True)))
        for case_id, case in cases:
            grid = hill_flow(geom, patch, case, params)
            rel = Path(tdir.name) / f"{case_id}.wsgrid"
            write_wsgrid(out_dir / rel, grid)
            rows.append(f"{split_of[t]}\t{tdir.name}\t{case_id}\t{rel.as_posix()}")

    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(rows) + "\n")
    return manifest


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    rows = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise GridError(f"{path}:{ln}: expected 4 tab-separated fields")
        split, terrain_id, case_id, rel = parts
        if split not in ("train", "val", "test"):
            raise GridError(f"{path}:{ln}: unknown split {split!r}")
        rows.append(ManifestRow(split, terrain_id, case_id, path.parent / rel))
    return rows
