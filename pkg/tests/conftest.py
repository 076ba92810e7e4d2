import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for _oracles

from windseer.gridcore import FlowGrid, GridGeometry, flood_down


@pytest.fixture
def rng():
    return np.random.default_rng(20260819)


def random_terrain(rng, shape):
    """Column-monotone occupancy with a random height per column."""
    nz, ny, nx = shape
    heights = rng.integers(0, nz, size=(ny, nx))
    k = np.arange(nz).reshape(-1, 1, 1)
    return k < heights[None, :, :]


def make_grid(rng, dims=(6, 5, 4), res=(2.0, 3.0, 1.5), origin=(0.0, 0.0, 0.0),
              channels=("ux", "uy"), terrain=None):
    geom = GridGeometry(dims, res, origin)
    if terrain is None:
        terrain = random_terrain(rng, geom.shape)
        terrain = flood_down(terrain)
    ch = {name: rng.normal(size=geom.shape).astype(np.float32) for name in channels}
    return FlowGrid(geom, terrain, ch)
