"""
Evaluating a reconstruction against baselines
=============================================

Given a dense reference flow and a sparse set of observations along a
simulated flight path, compare three predictors: the network (untrained
here, so expect it to lose), the constant per-channel average of the
observations, and the reference itself as a sanity stub.
"""
import numpy as np
import torch

from windseer.evalkit import (Mast, avg_predictor, label_predictor,
                              mast_ensemble_eval, net_predictor, sample_points,
                              velocity_norm_error)
from windseer.gridcore import ObservationSet, distance_transform
from windseer.net import ModelSpec, build_model
from windseer.sparse import sample_trajectory_mask
from windseer.synthflow import (GridGeometry, Hill, TerrainPatch, WindCase,
                                hill_flow)

torch.set_num_threads(1)
rng = np.random.default_rng(11)

geom = GridGeometry(dims=(64, 64, 32), res=(16.5, 16.5, 11.5),
                    origin=(0.0, 0.0, -11.5))
patch = TerrainPatch(hills=(Hill(cx=500.0, cy=500.0, height=130.0,
                                 radius=170.0),))
ref = hill_flow(geom, patch, WindCase(direction=1.2, u_ref=8.0))
ref.channels["dist"] = distance_transform(ref.terrain, geom.res)

# Observations: velocity at the cells of one random trajectory.
mask = sample_trajectory_mask(ref.dims, ref.terrain, rng,
                              min_len=30, max_len=300)
cells = np.argwhere(mask)[:, ::-1]       # argwhere gives (iz, iy, ix)
values = np.stack([ref.channels[c][mask] for c in ("ux", "uy", "uz")], axis=1)
obs = ObservationSet(cells=cells, values=values,
                     weights=np.ones(len(cells), dtype=np.int64))
print(f"{len(obs)} observed cells along the trajectory")

model = build_model(ModelSpec(depth=4, base_width=8, seed=0))
predictors = {
    "network (untrained)": net_predictor(model),
    "observation average": avg_predictor,
    "reference stub": label_predictor(ref),
}
for name, pred in predictors.items():
    out = pred(ref, obs)
    err = velocity_norm_error(out, ref)
    err_hi = velocity_norm_error(out, ref, min_cells_above=4)
    print(f"  {name:22s} rel speed error {err:6.3f} "
          f"(above 4 cells AGL: {err_hi:6.3f})")

# Mast-style evaluation: vertical profiles at fixed towers, scored per
# mast and pooled. Values come from trilinear sampling of the reference.
masts = []
for i, (mx, my) in enumerate([(300.0, 420.0), (620.0, 550.0), (500.0, 700.0)]):
    z = np.array([40.0, 60.0, 80.0, 100.0])
    pts = np.column_stack([np.full(4, mx), np.full(4, my), z])
    names = ("ux", "uy", "uz", "tke")
    sampled, _ = sample_points(ref, pts, names)
    vals = np.column_stack([sampled[c] for c in names])
    masts.append(Mast(f"mast_{i}", pts, vals, channel_names=names))

res = mast_ensemble_eval(ref, masts, net_predictor(model))
for mast_id, report in res.per_mast.items():
    s = report.scores["S"]
    rho = "n/a" if s.rho is None else f"{s.rho:.2f}"
    print(f"  {mast_id}: speed rmse {s.rmse:.2f} m/s, pearson {rho}")
print("ensemble speed rmse:", f"{res.ensemble.scores['S'].rmse:.2f} m/s")
for note in res.notes:      # masts buried in terrain get skipped, not scored
    print("  note:", note)
