"""Particle filter against the Kalman filter on the OU problem, and the
particle filter alone on the double-well problem.

    python3 demos/reference_filters.py
"""

import numpy as np

from bsdefilter import evaluation as ev
from bsdefilter.model import make_bistable_problem, make_ou_problem
from bsdefilter.reference import KalmanReference, ParticleReference

x = np.linspace(-5, 5, 1000)
dz = x[1] - x[0]

ou = make_ou_problem()
obs = ev.evaluation_observations(ou, 5, seed=1)
kf = KalmanReference(ou).densities(obs, x)
for P in (10**3, 10**4, 10**5):
    pf = ParticleReference(ou, particles=P, seed=0).densities(obs, x)
    print(f"OU, P={P:>6}: max sup error over 5 sequences and 10 steps {np.abs(pf - kf).max():.4f}")

bi = make_bistable_problem()
obs = ev.evaluation_observations(bi, 1, seed=1)
pf = ParticleReference(bi, particles=10**4, seed=0).densities(obs, x)[0]
for k in range(pf.shape[0]):
    left = np.sum(pf[k][x < 0]) * dz
    print(f"double well, t_{k + 1}: o={obs[0, k, 0]:+.2f}, mass left of 0 {left:.3f}")
