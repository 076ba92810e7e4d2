"""
From dense labels to sparse network inputs
==========================================

The model never sees a dense flow field at inference time. Training
therefore starts from a dense label and degrades it: crop a window,
maybe rotate it, keep only the cells a vehicle would have visited, add
sensor noise, and fill everything unobserved with a constant.
"""
import numpy as np

from windseer.augment import extract_window, sample_window
from windseer.sparse import (FillMode, NoiseSpec, apply_noise, compose_input,
                             sample_trajectory_mask)
from windseer.synthflow import (GridGeometry, Hill, TerrainPatch, WindCase,
                                hill_flow)

rng = np.random.default_rng(7)

geom = GridGeometry(dims=(96, 96, 32), res=(16.5, 16.5, 11.5),
                    origin=(0.0, 0.0, -11.5))
patch = TerrainPatch(hills=(Hill(cx=800.0, cy=760.0, height=120.0,
                                 radius=180.0),))
full = hill_flow(geom, patch, WindCase(direction=2.1, u_ref=7.0))

# Pick a 64 x 64 x 32 window at a random yaw. The sampler rejects
# placements whose rotated footprint would leave the source domain.
spec = sample_window(rng, full.dims, out_dims=(64, 64, 32), rotate=True)
print(f"window offset ({spec.offset[0]:.1f}, {spec.offset[1]:.1f}) cells, "
      f"yaw {np.degrees(spec.theta):.1f} deg")
window = extract_window(full, (64, 64, 32), spec)
print("window dims:", window.dims)

# Sparse observation pattern: a random straight-line trajectory through
# free space, rasterized onto the grid.
mask = sample_trajectory_mask(window.dims, window.terrain, rng,
                              min_len=20, max_len=200)
print(f"observed cells: {int(mask.sum())} "
       f"({100 * mask.sum() / (~window.terrain).sum():.2f}% of free space)")

# compose_input builds the 4-channel tensor the network consumes:
# distance field, observation mask, then noisy filled-in ux and uy.
from windseer.gridcore import distance_transform
dist = distance_transform(window.terrain, window.geom.res)
noise = NoiseSpec()          # defaults: modest gaussian + per-sample bias
sample = compose_input(window, dist, mask, noise, FillMode.AVERAGE, rng)
print("network input channels:", sample.inputs.shape[0],
      "| observed cells in mask channel:", int(sample.inputs[1].sum()))

# The noise model redraws its gaussian scale and bias per call, so
# repeated draws over the same observations scatter differently each time.
vals = np.full((5, 2), 6.0)
for trial in range(3):
    noisy = apply_noise(vals, 6.0, noise, rng)
    print(f"  noise draw {trial}: "
          + " ".join(f"{v:+.3f}" for v in (noisy - vals)[:, 0]))
