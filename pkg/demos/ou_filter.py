"""Train a short deep BSDE filter for the Ornstein-Uhlenbeck problem and
compare it with the Kalman filter on one observation sequence.

    python3 demos/ou_filter.py [N]

Three observation times and small epochs keep this to about a minute.
"""

import sys

import numpy as np

from bsdefilter import deepbsde as db
from bsdefilter import evaluation as ev
from bsdefilter.model import make_ou_problem
from bsdefilter.reference import KalmanReference
from bsdefilter.sim import TimeGrid

N = int(sys.argv[1]) if len(sys.argv) > 1 else 4
prob = make_ou_problem(horizon=0.3, num_obs=3)
grid = TimeGrid.for_problem(prob, N)
cfg = db.TrainConfig(batches_per_epoch=100, max_epochs=6, patience=3, lr=3e-3, lr_decay=0.7,
                     lr_min=1e-4, obs_pool=512, x0_std=3.0)
tf = db.train_filter(prob, grid, cfg)
for k, losses in enumerate(tf.losses):
    print(f"step {k}: {len(losses)} epochs, loss {losses[-1]:.3e}")

obs = ev.evaluation_observations(prob, 1, seed=1)
x = np.linspace(-5, 5, 1000)
ref = KalmanReference(prob).densities(obs, x)[0]
print(f"observations: {np.round(obs[0, :, 0], 3)}")
for k in range(1, grid.K + 1):
    p = ev.filter_densities(tf, k, obs, x)[0]
    mean_bsde = np.sum(x * p) * (x[1] - x[0])
    mean_kf = np.sum(x * ref[k - 1]) * (x[1] - x[0])
    print(f"t_{k}: sup error {np.abs(p - ref[k - 1]).max():.4f}, "
          f"posterior mean {mean_bsde:+.3f} (Kalman {mean_kf:+.3f})")
