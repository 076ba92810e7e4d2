"""Rotated window extraction for training-time augmentation.

A training sample is a small window cut from a larger labeled grid at a
random yaw angle. The window keeps the source resolution; channels are
trilinearly resampled at the rotated cell centers, the in-plane velocity
pair is re-expressed in window axes, and the terrain mask is taken from
the nearest source cell then flooded downward so columns stay monotone.

Feasibility is geometric: the axis-aligned bounding box of the rotated
window must lie inside the source extent. For a square window of side n
cut from a side-N source at yaw theta, the box half-side is
(n/2)(|cos| + |sin|) cells, so the offset interval per axis is
[a - n/2, N - a - n/2]. Wide windows are infeasible near 45 degrees and
the sampler retries with a fresh angle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridcore import (
    FlowGrid,
    GridError,
    GridGeometry,
    TrilinearStencil,
    flood_down,
)

VECTOR_PAIR = ("ux", "uy")


@dataclass(frozen=True)
class WindowSpec:
    """One extraction: yaw angle plus fractional cell offsets in the source."""

    theta: float
    offset: tuple[float, float, float]


def rotate_uv(u, v, theta: float):
    """World-frame (u, v) re-expressed in axes yawed by theta.

    At theta = pi/2 the window x-axis points along world +y, so a pure
    eastward flow (1, 0) becomes (0, -1).
    """
    c, s = np.cos(theta), np.sin(theta)
    return u * c + v * s, -u * s + v * c


def feasible_intervals(src_dims, out_dims, theta: float):
    """Offset interval (lo, hi) per horizontal axis, in cells; lo > hi means
    the window does not fit at this angle."""
    c, s = abs(np.cos(theta)), abs(np.sin(theta))
    ax = 0.5 * (out_dims[0] * c + out_dims[1] * s)
    ay = 0.5 * (out_dims[0] * s + out_dims[1] * c)
    return ((ax - out_dims[0] / 2.0, src_dims[0] - ax - out_dims[0] / 2.0),
            (ay - out_dims[1] / 2.0, src_dims[1] - ay - out_dims[1] / 2.0))


def sample_window(rng: np.random.Generator, src_dims, out_dims, *,
                  rotate: bool = True, max_tries: int = 100) -> WindowSpec:
    """Draw a random feasible window.

    Yaw is uniform on [0, 2pi) and redrawn when infeasible; horizontal
    offsets are uniform over the feasible interval; the vertical offset is
    triangular with mode at the ground, biasing windows toward terrain.
    """
    if any(o > s for o, s in zip(out_dims, src_dims)):
        raise GridError(f"window {tuple(out_dims)} exceeds source {tuple(src_dims)}")
    zmax = src_dims[2] - out_dims[2]
    oz = float(rng.triangular(0.0, 0.0, zmax)) if zmax > 0 else 0.0
    for _ in range(max_tries):
        theta = float(rng.uniform(0.0, 2.0 * np.pi)) if rotate else 0.0
        (lox, hix), (loy, hiy) = feasible_intervals(src_dims, out_dims, theta)
        if lox > hix or loy > hiy:
            continue
        ox = float(rng.uniform(lox, hix))
        oy = float(rng.uniform(loy, hiy))
        return WindowSpec(theta, (ox, oy, oz))
    raise GridError(f"no feasible window in {max_tries} tries "
                    f"for {tuple(out_dims)} from {tuple(src_dims)}")


def extract_window(src: FlowGrid, out_dims, spec: WindowSpec) -> FlowGrid:
    """Cut a rotated window out of a source grid.

    All channels ride along; the ("ux", "uy") pair, when both exist, is
    rotated into window components, everything else is sampled as a scalar.
    The window geometry keeps the source z origin at its floor and puts the
    horizontal origin at zero, a fresh local frame.
    """
    g = src.geom
    hx, hy, hz = g.res
    if spec.theta != 0.0 and abs(hx - hy) > 1e-12:
        raise GridError("rotation requires square horizontal cells")
    nx, ny, nz = out_dims
    out_geom = GridGeometry((nx, ny, nz), g.res,
                            (0.0, 0.0, g.origin[2] + spec.offset[2] * hz))

    # window cell centers in the window frame, relative to its center
    xc = (np.arange(nx) + 0.5) * hx - nx * hx / 2.0
    yc = (np.arange(ny) + 0.5) * hy - ny * hy / 2.0
    zc = g.origin[2] + (spec.offset[2] + np.arange(nz) + 0.5) * hz
    dX, dY = np.meshgrid(xc, yc, indexing="xy")        # [ny, nx]

    c, s = np.cos(spec.theta), np.sin(spec.theta)
    cx = g.origin[0] + (spec.offset[0] + nx / 2.0) * hx
    cy = g.origin[1] + (spec.offset[1] + ny / 2.0) * hy
    sx = cx + c * dX - s * dY
    sy = cy + s * dX + c * dY

    n_plane = nx * ny
    pts = np.empty((nz * n_plane, 3))
    pts[:, 0] = np.tile(sx.ravel(), nz)
    pts[:, 1] = np.tile(sy.ravel(), nz)
    pts[:, 2] = np.repeat(zc, n_plane)
    stencil = TrilinearStencil(g, pts)

    # terrain: nearest source cell, then flood down to keep columns monotone
    fi = np.stack([(pts[:, 0] - g.origin[0]) / hx - 0.5,
                   (pts[:, 1] - g.origin[1]) / hy - 0.5,
                   (pts[:, 2] - g.origin[2]) / hz - 0.5], axis=1)
    nn = np.clip(np.rint(fi).astype(np.int64), 0,
                 np.array(g.dims, dtype=np.int64) - 1)
    occ = src.terrain[nn[:, 2], nn[:, 1], nn[:, 0]].reshape(nz, ny, nx)
    out = FlowGrid(out_geom, flood_down(occ))

    sampled = {name: stencil.apply(arr).reshape(nz, ny, nx)
               for name, arr in src.channels.items()}
    if all(k in sampled for k in VECTOR_PAIR):
        u, v = sampled["ux"], sampled["uy"]
        sampled["ux"], sampled["uy"] = rotate_uv(u, v, spec.theta)
    for name in src.channels:
        out.add_channel(name, sampled[name])
    return out
