"""
Airflow sensor calibration from a synthetic sortie
==================================================

The calibration model maps raw vane and pitot readings through a small
set of correction coefficients, rotates the result to the world frame,
and explains ground velocity as air velocity plus one constant wind per
time segment. Here the flight is synthetic, so the ground truth is known
and the fit can be checked exactly.
"""
import tempfile
from pathlib import Path

import numpy as np

from windseer.calib import (ALPHA_NAMES, BETA_NAMES, CalibData, CalibParams,
                            body_airflow, euler_to_world, fit_calibration,
                            segment_index, write_param_report, write_wind_csv)

TRUTH = CalibParams(
    alpha=np.array([0.02, 0.10, 0.004, 0.5, 0.0]),
    beta=np.array([0.01, 0.02, 0.4, 2.0, 0.03, 0.15, 0.02, 1.5, 0.1]),
)

# --- synthesize 3 segments of maneuvering flight at 2 Hz ----------------
rng = np.random.default_rng(42)
n_seg, hz, seg_seconds = 3, 2.0, 60.0
n = int(n_seg * seg_seconds * hz)
t = np.arange(n) / hz

# Attitude and vane series are incommensurate sinusoids so that every
# coefficient direction is excited somewhere in the record.
att = np.stack([0.5 * np.sin(2 * np.pi * t / 37),
                0.3 * np.sin(2 * np.pi * t / 23 + 1.0),
                2 * np.pi * t / 150 + 0.8 * np.sin(2 * np.pi * t / 71)],
               axis=1)
gyro = np.stack([0.3 * np.sin(2 * np.pi * t / 9),
                 0.25 * np.cos(2 * np.pi * t / 13),
                 0.2 * np.sin(2 * np.pi * t / 17)], axis=1)
data = CalibData(t=t, att=att, gyro=gyro,
                 v_aspd=14.0 + 3.0 * np.sin(2 * np.pi * t / 41),
                 alpha=0.05 + 0.06 * np.sin(2 * np.pi * t / 19),
                 beta=0.04 * np.sin(2 * np.pi * t / 29),
                 v_gnd=np.zeros((n, 3)))

# Ground velocity from the forward model plus the per-segment wind, so
# the residual at the true parameters is exactly zero. Real sorties add
# GPS noise on top; see the noise argument pattern in the test suite.
winds_true = rng.uniform(-5.0, 5.0, size=(n_seg, 2))
seg = segment_index(t, seg_seconds)
world_air = np.einsum("nij,nj->ni", euler_to_world(att),
                      body_airflow(TRUTH, data))
data.v_gnd = world_air.copy()
data.v_gnd[:, :2] += winds_true[seg]

# --- fit from a mildly wrong starting point -----------------------------
init = CalibParams(TRUTH.alpha * 1.15, TRUTH.beta * 0.85)
result = fit_calibration(data, init=init, segment_seconds=seg_seconds)
print(f"converged: {result.converged} after {result.n_iter} iterations, "
      f"final cost {result.cost_trace[-1]:.3e}")

print("\nrecovered winds vs truth (m/s):")
for k in range(n_seg):
    wx, wy = result.winds[k]
    print(f"  segment {k}: ({wx:+.3f}, {wy:+.3f})  "
          f"truth ({winds_true[k, 0]:+.3f}, {winds_true[k, 1]:+.3f})")

print("\ncoefficients (fit / truth):")
for name, got, want in zip(ALPHA_NAMES, result.params.alpha, TRUTH.alpha):
    print(f"  {name}: {got:+.5f} / {want:+.5f}")
for name, got, want in zip(BETA_NAMES, result.params.beta, TRUTH.beta):
    print(f"  {name}: {got:+.5f} / {want:+.5f}")

# Both report writers emit plain CSV for downstream tooling.
with tempfile.TemporaryDirectory() as td:
    write_wind_csv(Path(td) / "winds.csv", result)
    write_param_report(Path(td) / "params.csv", result)
    print("\nwinds.csv:")
    print((Path(td) / "winds.csv").read_text().rstrip())
