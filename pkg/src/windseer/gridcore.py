"""Regular wind-field grids over terrain: geometry, sampling, binary I/O.

Conventions shared by the whole package:

* axes are x east, y north, z up; cell (ix, iy, iz) has its center at
  origin + ((ix + 0.5) hx, (iy + 0.5) hy, (iz + 0.5) hz)
* volumetric arrays are stored [nz, ny, nx] C-contiguous, so .ravel()
  enumerates cells x-fastest (linear index = ix + nx * (iy + ny * iz))
* terrain occupancy is column-monotone: every cell below a solid cell
  is solid (no overhangs)
* flow channels are "ux", "uy", "uz" (m/s, east/north/up) and "tke"
  (m^2/s^2)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

CHANNELS = ("ux", "uy", "uz", "tke")
VELOCITY_CHANNELS = ("ux", "uy", "uz")

WSGRID_MAGIC = b"WSGR"
WSGRID_VERSION = 1
TERRAIN_CHANNEL = "terrain_mask"


class GridError(ValueError):
    """A grid contract was violated (geometry, occupancy, channels)."""


class OutOfDomainError(GridError):
    """A sample point lies outside the hull of cell centers."""


class FormatError(GridError):
    """Base for binary-format problems (wsgrid / wsnn files)."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class MissingTerrainError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


@dataclass(frozen=True)
class GridGeometry:
    """Placement of a regular grid in the world: dims, cell size, corner."""

    dims: tuple[int, int, int]          # (nx, ny, nz)
    res: tuple[float, float, float]     # (hx, hy, hz), meters
    origin: tuple[float, float, float]  # world coords of the (0,0,0) cell corner

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(n) <= 0 for n in self.dims):
            raise GridError(f"dims must be three positive ints, got {self.dims}")
        if len(self.res) != 3 or any(not (h > 0) for h in self.res):
            raise GridError(f"resolution must be strictly positive, got {self.res}")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "res", tuple(float(h) for h in self.res))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape [nz, ny, nx] for this geometry."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    def axis_centers(self, axis: int) -> np.ndarray:
        """World coordinates of cell centers along axis 0=x, 1=y, 2=z."""
        n = self.dims[axis]
        return self.origin[axis] + (np.arange(n) + 0.5) * self.res[axis]

    def world_to_frac(self, points: np.ndarray) -> np.ndarray:
        """Map world points [n, 3] to fractional center coordinates.

        Coordinate f along an axis with n cells is such that f = 0 at the
        first cell center and f = n - 1 at the last.
        """
        pts = np.asarray(points, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.res) - 0.5

    def frac_to_world(self, frac: np.ndarray) -> np.ndarray:
        f = np.asarray(frac, dtype=np.float64)
        return np.asarray(self.origin) + (f + 0.5) * np.asarray(self.res)

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        """Containing cell (ix, iy, iz) of world points, clipped to bounds."""
        pts = np.asarray(points, dtype=np.float64)
        idx = np.floor((pts - np.asarray(self.origin)) / np.asarray(self.res))
        return np.clip(idx, 0, np.asarray(self.dims) - 1).astype(np.int64)

    def top(self) -> float:
        return self.origin[2] + self.dims[2] * self.res[2]


def linear_index(geom: GridGeometry, cells: np.ndarray) -> np.ndarray:
    """x-fastest linear index of (ix, iy, iz) cell triples."""
    nx, ny, _ = geom.dims
    c = np.asarray(cells, dtype=np.int64)
    return c[..., 0] + nx * (c[..., 1] + ny * c[..., 2])


class FlowGrid:
    """A terrain occupancy plus named scalar channels on a regular grid."""

    __slots__ = ("geom", "terrain", "channels")

    def __init__(self, geom: GridGeometry, terrain: np.ndarray,
                 channels: dict[str, np.ndarray] | None = None):
        if not isinstance(geom, GridGeometry):
            geom = GridGeometry(*geom)
        terrain = np.asarray(terrain, dtype=bool)
        if terrain.shape != geom.shape:
            raise GridError(
                f"terrain shape {terrain.shape} does not match geometry {geom.shape}")
        # no overhangs: a solid cell must sit on a solid cell
        if np.any(terrain[1:] & ~terrain[:-1]):
            raise GridError("terrain occupancy is not column-monotone")
        self.geom = geom
        self.terrain = terrain
        self.channels = {}
        for name, arr in (channels or {}).items():
            self.add_channel(name, arr)

    # geometry passthroughs, used everywhere
    @property
    def dims(self):
        return self.geom.dims

    @property
    def res(self):
        return self.geom.res

    @property
    def origin(self):
        return self.geom.origin

    @property
    def free(self) -> np.ndarray:
        return ~self.terrain

    def add_channel(self, name: str, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if arr.shape != self.geom.shape:
            raise GridError(
                f"channel {name!r} shape {arr.shape} != grid shape {self.geom.shape}")
        self.channels[name] = arr

    def terrain_surface(self) -> np.ndarray:
        """Ground elevation per column [ny, nx]: top face of the occupancy."""
        n_solid = self.terrain.sum(axis=0)
        return self.origin[2] + n_solid * self.res[2]

    def cells_above_terrain(self) -> np.ndarray:
        """For each cell, its height above the local ground in whole cells.

        Terrain cells get negative values. Used for altitude filtering.
        """
        n_solid = self.terrain.sum(axis=0)  # [ny, nx]
        k = np.arange(self.dims[2]).reshape(-1, 1, 1)
        return k - n_solid[None, :, :]

    def copy(self, channels: bool = True) -> "FlowGrid":
        ch = {k: v.copy() for k, v in self.channels.items()} if channels else None
        return FlowGrid(self.geom, self.terrain.copy(), ch)


@dataclass
class ObservationSet:
    """Sparse per-cell wind observations, already averaged per cell."""

    cells: np.ndarray                    # (n, 3) int64, (ix, iy, iz)
    values: np.ndarray                   # (n, k) float64
    weights: np.ndarray                  # (n,) int64, raw samples per cell
    channel_names: tuple[str, ...] = VELOCITY_CHANNELS

    def __post_init__(self):
        self.cells = np.atleast_2d(np.asarray(self.cells, dtype=np.int64))
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.int64))
        n = len(self.cells)
        if self.values.shape[0] != n or self.weights.shape[0] != n:
            raise GridError("observation arrays disagree on sample count")
        if self.values.shape[1] != len(self.channel_names):
            raise GridError("value columns do not match channel names")
        if n and np.any(self.weights < 1):
            raise GridError("observation weights must be >= 1")

    def __len__(self) -> int:
        return len(self.cells)

    def validate(self, geom: GridGeometry, terrain: np.ndarray | None = None) -> None:
        if len(self) == 0:
            return
        dims = np.asarray(geom.dims)
        if np.any(self.cells < 0) or np.any(self.cells >= dims):
            raise GridError("observation cell index out of bounds")
        lin = linear_index(geom, self.cells)
        if len(np.unique(lin)) != len(lin):
            raise GridError("duplicate observation cells (merge before building the set)")
        if terrain is not None:
            ix, iy, iz = self.cells.T
            if np.any(terrain[iz, iy, ix]):
                raise GridError("observation inside terrain")


def merge_cell_samples(cells: np.ndarray, values: np.ndarray,
                       dims: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Average raw samples that fall in the same cell.

    Returns (unique_cells, mean_values, counts), ordered by linear index.
    """
    cells = np.atleast_2d(np.asarray(cells, dtype=np.int64))
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    nx, ny, _ = dims
    lin = cells[:, 0] + nx * (cells[:, 1] + ny * cells[:, 2])
    uniq, inverse, counts = np.unique(lin, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), values.shape[1]))
    np.add.at(sums, inverse, values)
    means = sums / counts[:, None]
    ux = uniq % nx
    uy = (uniq // nx) % ny
    uz = uniq // (nx * ny)
    return np.stack([ux, uy, uz], axis=1), means, counts.astype(np.int64)


def distance_transform(terrain: np.ndarray, res: tuple[float, float, float],
                       *, ground_plane: bool = False) -> np.ndarray:
    """Euclidean distance (meters) from each cell center to the terrain.

    Exact and anisotropic: cell spacing (hx, hy, hz) is honored. Terrain
    cells get 0. With no terrain cells, `ground_plane=True` measures the
    vertical distance to the plane at the domain bottom instead; without
    the flag an all-free grid is rejected. When both terrain cells and
    the flag are present, the pointwise minimum of the two is returned.
    """
    terrain = np.asarray(terrain, dtype=bool)
    hx, hy, hz = res
    dist = None
    if terrain.any():
        # EDT conventions: zero cells are the features, sampling is per array axis
        dist = ndimage.distance_transform_edt(~terrain, sampling=(hz, hy, hx))
    if ground_plane:
        nz = terrain.shape[0]
        plane = (np.arange(nz) + 0.5) * hz
        plane = np.broadcast_to(plane.reshape(-1, 1, 1), terrain.shape)
        dist = plane.copy() if dist is None else np.minimum(dist, plane)
    if dist is None:
        raise GridError("no terrain cells and no ground plane to measure distance to")
    return np.ascontiguousarray(dist, dtype=np.float64)


class TrilinearStencil:
    """Precomputed corner indices and weights for a fixed point set.

    Lets callers sample many channels of the same grid at the same points
    without redoing the index arithmetic.
    """

    __slots__ = ("i0", "i1", "w", "n_axis")

    def __init__(self, geom: GridGeometry, points: np.ndarray, *, tol: float = 1e-9):
        frac = geom.world_to_frac(np.atleast_2d(points))
        nxyz = np.asarray(geom.dims)
        low = frac < -tol
        high = frac > (nxyz - 1) + tol
        if np.any(low | high):
            bad = int(np.argmax(np.any(low | high, axis=1)))
            axis = int(np.argmax((low | high)[bad]))
            raise OutOfDomainError(
                f"sample point {bad} outside the cell-center hull on axis "
                f"{'xyz'[axis]}: frac={frac[bad, axis]:.6g}, valid [0, {nxyz[axis] - 1}]")
        frac = np.clip(frac, 0.0, nxyz - 1)
        i0 = np.floor(frac).astype(np.int64)
        i0 = np.minimum(i0, np.maximum(nxyz - 2, 0))  # size-1 axes stay at 0
        t = frac - i0
        self.i0 = i0
        self.i1 = np.minimum(i0 + 1, nxyz - 1)
        self.w = t
        self.n_axis = nxyz

    def _corners(self):
        # eight (dx, dy, dz) corner selectors with their weights
        x0, y0, z0 = self.i0[:, 0], self.i0[:, 1], self.i0[:, 2]
        x1, y1, z1 = self.i1[:, 0], self.i1[:, 1], self.i1[:, 2]
        tx, ty, tz = self.w[:, 0], self.w[:, 1], self.w[:, 2]
        for cz, wz in ((z0, 1 - tz), (z1, tz)):
            for cy, wy in ((y0, 1 - ty), (y1, ty)):
                for cx, wx in ((x0, 1 - tx), (x1, tx)):
                    yield cx, cy, cz, wx * wy * wz

    def apply(self, arr: np.ndarray) -> np.ndarray:
        """Interpolate one [nz, ny, nx] array at the stencil's points."""
        out = np.zeros(len(self.i0), dtype=np.float64)
        for cx, cy, cz, w in self._corners():
            out += w * arr[cz, cy, cx]
        return out

    def contaminated(self, terrain: np.ndarray) -> np.ndarray:
        """True where any corner of the interpolation cube is terrain."""
        out = np.zeros(len(self.i0), dtype=bool)
        for cx, cy, cz, _ in self._corners():
            out |= terrain[cz, cy, cx]
        return out


def trilinear_sample(grid: FlowGrid, points: np.ndarray,
                     channel: str) -> tuple[np.ndarray, np.ndarray]:
    """Sample one channel at world points [n, 3].

    Returns (values, contaminated) where `contaminated` flags points whose
    interpolation cube touches terrain; the value is still computed there.
    Points outside the hull of cell centers raise OutOfDomainError.
    """
    if channel not in grid.channels:
        raise GridError(f"no channel {channel!r} in grid")
    st = TrilinearStencil(grid.geom, points)
    return st.apply(grid.channels[channel]), st.contaminated(grid.terrain)


def resample(src: FlowGrid, geom: GridGeometry) -> FlowGrid:
    """Regrid every channel onto `geom` (trilinear at destination centers).

    The destination center hull must sit inside the source center hull on
    every axis. Terrain is transferred by nearest neighbor, then flooded
    down so occupancy stays column-monotone.
    """
    for axis in range(3):
        lo = geom.origin[axis] + 0.5 * geom.res[axis]
        hi = geom.origin[axis] + (geom.dims[axis] - 0.5) * geom.res[axis]
        slo = src.origin[axis] + 0.5 * src.res[axis]
        shi = src.origin[axis] + (src.dims[axis] - 0.5) * src.res[axis]
        eps = 1e-9 * max(1.0, abs(shi))
        if lo < slo - eps or hi > shi + eps:
            raise GridError(
                f"destination grid exceeds source on axis {'xyz'[axis]}: "
                f"[{lo:.6g}, {hi:.6g}] vs [{slo:.6g}, {shi:.6g}]")
    zc = geom.axis_centers(2)
    yc = geom.axis_centers(1)
    xc = geom.axis_centers(0)
    Z, Y, X = np.meshgrid(zc, yc, xc, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    st = TrilinearStencil(src.geom, pts)

    # nearest-neighbor terrain, then flood down
    frac = src.geom.world_to_frac(pts)
    nn = np.clip(np.rint(frac), 0, np.asarray(src.dims) - 1).astype(np.int64)
    occ = src.terrain[nn[:, 2], nn[:, 1], nn[:, 0]].reshape(geom.shape)
    occ = flood_down(occ)

    out = FlowGrid(geom, occ)
    for name, arr in src.channels.items():
        out.add_channel(name, st.apply(arr).reshape(geom.shape))
    return out


def flood_down(occ: np.ndarray) -> np.ndarray:
    """Make occupancy column-monotone: everything under a solid cell is solid."""
    return np.flip(np.maximum.accumulate(np.flip(occ, axis=0), axis=0), axis=0)


# ---------------------------------------------------------------------------
# wsgrid binary format
#
# little-endian throughout:
#   magic "WSGR" | version u32 | nx ny nz u32 | hx hy hz f32 | origin f64 x3
#   | channel_count u32 | per channel: name_len u8, name, values f32
#   (x-fastest); "terrain_mask" is mandatory and comes first.

_HEADER = struct.Struct("<4sIIIIfffdddI")


def write_wsgrid(path, grid: FlowGrid) -> None:
    nx, ny, nz = grid.dims
    names = [TERRAIN_CHANNEL, *grid.channels.keys()]
    arrays = [grid.terrain.astype(np.float32),
              *(grid.channels[n] for n in grid.channels)]
    if len(set(names)) != len(names):
        raise FormatError("duplicate channel name (terrain_mask is reserved)")
    parts = [_HEADER.pack(WSGRID_MAGIC, WSGRID_VERSION, nx, ny, nz,
                          *(np.float32(h) for h in grid.res),
                          *grid.origin, len(names))]
    for name, arr in zip(names, arrays):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"channel {name!r} contains non-finite values")
        raw = name.encode("utf-8")
        if not 0 < len(raw) < 256:
            raise FormatError(f"channel name {name!r} does not fit a u8 length")
        parts.append(struct.pack("<B", len(raw)))
        parts.append(raw)
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_wsgrid(path) -> FlowGrid:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: shorter than the magic number")
    if buf[:4] != WSGRID_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {WSGRID_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    (_, version, nx, ny, nz, hx, hy, hz,
     ox, oy, oz, n_channels) = _HEADER.unpack_from(buf, 0)
    if version != WSGRID_VERSION:
        raise UnsupportedVersionError(
            f"{path}: wsgrid version {version}, this build reads {WSGRID_VERSION}")
    geom = GridGeometry((nx, ny, nz), (hx, hy, hz), (ox, oy, oz))
    n_values = geom.n_cells
    off = _HEADER.size
    channels: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(n_channels):
        if off + 1 > len(buf):
            raise TruncatedFileError(f"{path}: truncated at channel name length")
        (name_len,) = struct.unpack_from("<B", buf, off)
        off += 1
        if off + name_len > len(buf):
            raise TruncatedFileError(f"{path}: truncated channel name")
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        end = off + 4 * n_values
        if end > len(buf):
            raise TruncatedFileError(f"{path}: truncated values for channel {name!r}")
        arr = np.frombuffer(buf[off:end], dtype="<f4").reshape(geom.shape)
        off = end
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{path}: non-finite values in channel {name!r}")
        if name in channels:
            raise FormatError(f"{path}: duplicate channel {name!r}")
        channels[name] = arr
        order.append(name)
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    if not order or order[0] != TERRAIN_CHANNEL:
        raise MissingTerrainError(
            f"{path}: first channel must be {TERRAIN_CHANNEL!r}, got {order[:1]!r}")
    mask = channels.pop(TERRAIN_CHANNEL)
    if not np.isin(mask, (0.0, 1.0)).all():
        raise FormatError(f"{path}: terrain_mask values must be 0 or 1")
    return FlowGrid(geom, mask.astype(bool), channels)
