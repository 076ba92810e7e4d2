"""Field-data ingestion: mast and flight CSVs, DEMs, and grid embedding.

Measurement campaigns arrive as flat files; this module turns them into
the grid-shaped inputs the rest of the package consumes. Parsing is
deliberately forgiving at the row level (a bad line is reported with its
number and skipped) and strict at the file level (a wrong header is a
hard error, because it means the file is not what the caller thinks).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .evalkit import Mast, VehicleStream, embed_observations
from .gridcore import (
    FlowGrid,
    GridError,
    GridGeometry,
    ObservationSet,
    OutOfDomainError,
)

#: native grid spacing (m); site presets scale it down for smaller terrain
BASE_RES = (16.5, 16.5, 11.5)

MAST_COLUMNS = ("mast_id", "x", "y", "z_agl", "u", "v", "w", "tke",
                "std_u", "std_v", "std_w", "t_start", "t_end")
FLIGHT_COLUMNS = ("t", "x", "y", "z", "u", "v", "w", "loiter_id")


class ParseError(GridError):
    """File-level problem: wrong header, unreadable structure."""


@dataclass(frozen=True)
class RowIssue:
    line: int          # 1-based line number in the file
    reason: str


@dataclass(frozen=True)
class MastRecord:
    """One averaged sensor reading on a mast.

    Heights are above ground level; the absolute position needs a DEM.
    Optional quantities are None when the file left them blank.
    """

    mast_id: str
    x: float
    y: float
    z_agl: float
    u: float
    v: float
    w: float | None = None
    tke: float | None = None
    std_u: float | None = None
    std_v: float | None = None
    std_w: float | None = None
    t_start: float = 0.0
    t_end: float = 0.0


@dataclass
class MastParse:
    records: list[MastRecord]
    rejected: list[RowIssue] = field(default_factory=list)


def _data_rows(path) -> Iterable[tuple[int, list[str]]]:
    """Yield (line_number, fields) skipping blank and '#' comment lines."""
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if row[0].lstrip().startswith("#"):
                continue
            yield lineno, [c.strip() for c in row]


def _check_header(path, got: list[str], want: tuple[str, ...]) -> None:
    if tuple(got) != want:
        raise ParseError(f"{path}: bad header {got!r}; expected "
                         f"{','.join(want)}")


def _number(text: str, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"{column}: not a number: {text!r}") from None
    if not np.isfinite(value):
        raise ValueError(f"{column}: non-finite value")
    return value


def parse_mast_csv(path) -> MastParse:
    """Read mast measurements, rejecting broken rows individually.

    The header must match MAST_COLUMNS exactly. Mandatory per row:
    mast_id, position, z_agl, u, v, and the averaging window. w, tke and
    the stds may be blank. A row with a missing mandatory field, a
    non-numeric value, or a backwards averaging window is reported in
    `rejected` with its line number; the rest of the file still parses.
    """
    rows = _data_rows(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise ParseError(f"{path}: empty file") from None
    _check_header(path, header, MAST_COLUMNS)

    records: list[MastRecord] = []
    rejected: list[RowIssue] = []
    for lineno, cells in rows:
        if len(cells) != len(MAST_COLUMNS):
            rejected.append(RowIssue(lineno, f"expected {len(MAST_COLUMNS)} "
                                             f"fields, got {len(cells)}"))
            continue
        named = dict(zip(MAST_COLUMNS, cells))
        try:
            if not named["mast_id"]:
                raise ValueError("mast_id: empty")
            mandatory = {k: _number(named[k], k)
                         for k in ("x", "y", "z_agl", "u", "v",
                                   "t_start", "t_end")}
            if mandatory["z_agl"] < 0:
                raise ValueError("z_agl: negative height above ground")
            if mandatory["t_start"] > mandatory["t_end"]:
                raise ValueError("t_start: averaging window ends before it starts")
            optional = {k: (_number(named[k], k) if named[k] else None)
                        for k in ("w", "tke", "std_u", "std_v", "std_w")}
            if optional["tke"] is not None and optional["tke"] < 0:
                raise ValueError("tke: negative")
            for k in ("std_u", "std_v", "std_w"):
                if optional[k] is not None and optional[k] < 0:
                    raise ValueError(f"{k}: negative")
        except ValueError as err:
            rejected.append(RowIssue(lineno, str(err)))
            continue
        records.append(MastRecord(mast_id=named["mast_id"], **mandatory,
                                  **optional))
    return MastParse(records=records, rejected=rejected)


def parse_flight_csv(path, vehicle_id: str | None = None,
                     ) -> tuple[VehicleStream, list[RowIssue]]:
    """Read one vehicle's wind-estimate log.

    All columns but loiter_id are mandatory; a blank loiter_id means the
    sample was not flown in a loiter (stored as -1). Timestamps must be
    nondecreasing; that is a file-level error, not a row-level one, since
    it usually means the log was concatenated wrong.
    """
    rows = _data_rows(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise ParseError(f"{path}: empty file") from None
    _check_header(path, header, FLIGHT_COLUMNS)

    t, pts, vals, loiter = [], [], [], []
    rejected: list[RowIssue] = []
    for lineno, cells in rows:
        if len(cells) != len(FLIGHT_COLUMNS):
            rejected.append(RowIssue(lineno, f"expected {len(FLIGHT_COLUMNS)} "
                                             f"fields, got {len(cells)}"))
            continue
        named = dict(zip(FLIGHT_COLUMNS, cells))
        try:
            nums = {k: _number(named[k], k)
                    for k in ("t", "x", "y", "z", "u", "v", "w")}
            lid = int(_number(named["loiter_id"], "loiter_id")) \
                if named["loiter_id"] else -1
        except ValueError as err:
            rejected.append(RowIssue(lineno, str(err)))
            continue
        t.append(nums["t"])
        pts.append((nums["x"], nums["y"], nums["z"]))
        vals.append((nums["u"], nums["v"], nums["w"]))
        loiter.append(lid)
    if not t:
        raise ParseError(f"{path}: no valid data rows")
    name = vehicle_id if vehicle_id is not None else Path(path).stem
    try:
        stream = VehicleStream(name, np.array(t), np.array(pts),
                               np.array(vals), loiter_id=np.array(loiter))
    except GridError as err:
        raise ParseError(f"{path}: {err}") from None
    return stream, rejected


# ---------------------------------------------------------------------------
# DEMs

def dem_grid(heights: np.ndarray, res_xy: tuple[float, float],
             origin_xy: tuple[float, float]) -> FlowGrid:
    """Wrap a [ny, nx] elevation raster as a single-layer grid.

    The layer carries one channel, "elevation"; terrain occupancy is left
    empty because a DEM is a surface, not a volume.
    """
    heights = np.asarray(heights, dtype=np.float64)
    if heights.ndim != 2:
        raise GridError("a DEM raster must be 2-D [ny, nx]")
    if not np.isfinite(heights).all():
        raise GridError("non-finite elevation in DEM")
    ny, nx = heights.shape
    geom = GridGeometry((nx, ny, 1), (res_xy[0], res_xy[1], 1.0),
                        (origin_xy[0], origin_xy[1], 0.0))
    terrain = np.zeros(geom.shape, dtype=bool)
    return FlowGrid(geom, terrain, {"elevation": heights[None, :, :]})


def is_dem(grid: FlowGrid) -> bool:
    return grid.dims[2] == 1 and "elevation" in grid.channels


def dem_height(dem: FlowGrid, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear ground elevation at world (x, y); edges clamp outward.

    Clamping matches common raster practice: queries just past the border
    get the border value rather than failing, which keeps grid corners
    usable when the DEM exactly covers the domain.
    """
    if not is_dem(dem):
        raise GridError("grid is not a DEM (needs dims (*, *, 1) and "
                        "an 'elevation' channel)")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    geom = dem.geom
    h = dem.channels["elevation"][0]           # [ny, nx]
    fx = np.clip((x - geom.origin[0]) / geom.res[0] - 0.5, 0, geom.dims[0] - 1)
    fy = np.clip((y - geom.origin[1]) / geom.res[1] - 0.5, 0, geom.dims[1] - 1)
    ix0 = np.minimum(np.floor(fx).astype(np.int64), max(geom.dims[0] - 2, 0))
    iy0 = np.minimum(np.floor(fy).astype(np.int64), max(geom.dims[1] - 2, 0))
    tx = fx - ix0
    ty = fy - iy0
    ix1 = np.minimum(ix0 + 1, geom.dims[0] - 1)
    iy1 = np.minimum(iy0 + 1, geom.dims[1] - 1)
    return ((1 - ty) * ((1 - tx) * h[iy0, ix0] + tx * h[iy0, ix1])
            + ty * ((1 - tx) * h[iy1, ix0] + tx * h[iy1, ix1]))


# ---------------------------------------------------------------------------
# grid planning

@dataclass(frozen=True)
class GridPlan:
    """Where and how finely to lay the computation grid over a site.

    res_scale multiplies BASE_RES; smaller sites use finer grids so the
    terrain features stay resolved. center fixes the horizontal domain
    center; None means "center on the data" (mast centroid or first
    vehicle fix).
    """

    dims: tuple[int, int, int] = (384, 384, 192)
    res_scale: float = 1.0
    center: tuple[float, float] | None = None

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise GridError("grid dims must be positive")
        if self.res_scale <= 0:
            raise GridError("resolution scale must be positive")

    @property
    def res(self) -> tuple[float, float, float]:
        return tuple(r * self.res_scale for r in BASE_RES)

    def geometry(self, center_xy: tuple[float, float], z_bottom: float,
                 depth: int = 4) -> GridGeometry:
        div = 2 ** depth
        bad = [d for d in self.dims if d % div]
        if bad:
            raise GridError(f"grid dims {self.dims} must be multiples of "
                            f"{div} for a depth-{depth} model")
        res = self.res
        origin = (center_xy[0] - 0.5 * self.dims[0] * res[0],
                  center_xy[1] - 0.5 * self.dims[1] * res[1],
                  z_bottom)
        return GridGeometry(self.dims, res, origin)


#: campaign grids cover whole sites; flight grids track a single sortie
SITE_PRESETS: dict[str, GridPlan] = {
    "askervein": GridPlan(res_scale=1 / 4),
    "bolund": GridPlan(res_scale=1 / 30),
    "perdigao": GridPlan(res_scale=1 / 2),
    "flight": GridPlan(dims=(64, 64, 64), res_scale=1.0),
}


# ---------------------------------------------------------------------------
# embedding

@dataclass
class EmbedResult:
    grid: FlowGrid                     # terrain occupancy only
    obs: ObservationSet
    notes: list[str] = field(default_factory=list)


def plan_domain(plan: GridPlan, dem: FlowGrid, center_xy: tuple[float, float],
                depth: int = 4) -> GridGeometry:
    """Resolve a plan against a DEM: center it and sink the floor.

    The bottom layer sits one cell below the lowest ground in the domain,
    so every column has at least one solid cell once terrain is built.
    """
    res = plan.res
    half = (0.5 * plan.dims[0] * res[0], 0.5 * plan.dims[1] * res[1])
    xs = np.linspace(center_xy[0] - half[0], center_xy[0] + half[0], 64)
    ys = np.linspace(center_xy[1] - half[1], center_xy[1] + half[1], 64)
    gx, gy = np.meshgrid(xs, ys)
    z_min = float(dem_height(dem, gx.ravel(), gy.ravel()).min())
    return plan.geometry(center_xy, z_min - res[2], depth)


def terrain_from_dem(geom: GridGeometry, dem: FlowGrid) -> np.ndarray:
    """Occupancy: cell centers below the interpolated ground are solid."""
    xc = geom.axis_centers(0)
    yc = geom.axis_centers(1)
    gx, gy = np.meshgrid(xc, yc)                 # [ny, nx]
    ground = dem_height(dem, gx.ravel(), gy.ravel()).reshape(len(yc), len(xc))
    zc = geom.axis_centers(2)[:, None, None]
    return zc < ground[None, :, :]


def grid_embed(records: Sequence[MastRecord], dem: FlowGrid, plan: GridPlan,
               *, channels: tuple[str, ...] = ("ux", "uy"),
               depth: int = 4) -> EmbedResult:
    """Build the computation grid and drop mast readings into it.

    Sensor heights are above ground, so absolute positions come from the
    DEM. Readings sharing a cell are averaged with their counts kept as
    weights. Readings outside the domain are dropped with a note; those
    that land inside terrain (steep ground, coarse cells) are dropped
    with a warning note since that usually flags a datum mismatch.
    """
    if not records:
        raise GridError("no mast records to embed")
    if plan.center is not None:
        center = plan.center
    else:
        center = (float(np.mean([r.x for r in records])),
                  float(np.mean([r.y for r in records])))
    geom = plan_domain(plan, dem, center, depth)
    terrain = terrain_from_dem(geom, dem)
    grid = FlowGrid(geom, terrain)

    need = {"ux": "u", "uy": "v", "uz": "w", "tke": "tke"}
    unknown = [c for c in channels if c not in need]
    if unknown:
        raise GridError(f"cannot embed channels {unknown}")
    notes: list[str] = []
    pts, vals = [], []
    for r in records:
        row = [getattr(r, need[c]) for c in channels]
        if any(v is None for v in row):
            blanks = [need[c] for c, v in zip(channels, row) if v is None]
            notes.append(f"mast {r.mast_id}: record at z_agl={r.z_agl:g} "
                         f"dropped, blank {','.join(blanks)}")
            continue
        ground = float(dem_height(dem, r.x, r.y))
        pts.append((r.x, r.y, ground + r.z_agl))
        vals.append(row)
    if not pts:
        raise GridError("no record carries all requested channels")
    obs, n_out, n_buried = embed_observations(
        grid, np.array(pts), np.array(vals), tuple(channels))
    if n_out:
        notes.append(f"{n_out} reading(s) outside the domain, dropped")
    if n_buried:
        notes.append(f"warning: {n_buried} reading(s) inside terrain, dropped "
                     "(datum mismatch between DEM and mast heights?)")
    return EmbedResult(grid=grid, obs=obs, notes=notes)


def masts_from_records(records: Sequence[MastRecord],
                       dem: FlowGrid) -> list[Mast]:
    """Group records per mast for ensemble evaluation.

    Each mast's channel set is the largest one every reading supports:
    u and v always, w and tke only when no reading of that mast leaves
    them blank. Mast order follows first appearance in the records.
    """
    order: list[str] = []
    groups: dict[str, list[MastRecord]] = {}
    for r in records:
        if r.mast_id not in groups:
            order.append(r.mast_id)
            groups[r.mast_id] = []
        groups[r.mast_id].append(r)

    masts = []
    for mid in order:
        rows = groups[mid]
        names = ["ux", "uy"]
        if all(r.w is not None for r in rows):
            names.append("uz")
        if all(r.tke is not None for r in rows):
            names.append("tke")
        attr = {"ux": "u", "uy": "v", "uz": "w", "tke": "tke"}
        pts = np.array([(r.x, r.y,
                         float(dem_height(dem, r.x, r.y)) + r.z_agl)
                        for r in rows])
        vals = np.array([[getattr(r, attr[c]) for c in names] for r in rows])
        masts.append(Mast(mid, pts, vals, tuple(names)))
    return masts
