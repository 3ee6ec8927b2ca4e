"""Error quantities of a trained filter.

``e_k`` is the largest absolute difference between the normalized filter
density and a reference density, over evaluation sequences and grid points.
``E_k`` is the largest root-mean-square terminal mismatch of the step ``k-1``
rollout started from a fixed point, over sequences and probe points.
``E`` is the sum of the ``E_k``.
"""

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import deepbsde as db
from .errors import ConfigError, DegenerateError, MissingArtifactError
from .model import LIKELIHOOD_FLOOR
from .sim import TimeGrid, brownian_increments, pad_observations, simulate_observation_sequences, stream

# stream tags, see sim.stream
_EVAL_OBS, _EK = 30, 31
# substeps per observation interval for the latent path of evaluation data
EVAL_SUBSTEPS = 128


@dataclass
class EvalConfig:
    m_eval: int = 1000          # observation sequences for e_k
    num_points: int = 1000      # grid points I for e_k
    lo: float = -5.0
    hi: float = 5.0
    probes: int = 16            # probe points for E_k
    inner_batch: int = 128      # rollouts per (sequence, probe)
    m_residual: int | None = None  # sequences for E_k; None uses m_eval
    seed: int = 1
    particles: int = 10**4      # particle filter size for nonlinear problems
    reference: str | None = None  # "kalman", "particle" or None for automatic

    def __post_init__(self):
        for name in ("m_eval", "num_points", "probes", "inner_batch", "particles"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.m_residual is not None and self.m_residual < 1:
            raise ConfigError("m_residual must be positive")
        if not self.hi > self.lo or self.num_points < 2:
            raise ConfigError("need hi > lo and at least two grid points")

    @property
    def x_grid(self):
        return np.linspace(self.lo, self.hi, self.num_points)

    @property
    def x_probe(self):
        return np.linspace(self.lo, self.hi, self.probes)


@dataclass
class ErrorReport:
    N: int
    e: np.ndarray        # e_k for k = 1..K
    E_steps: np.ndarray  # E_k for k = 1..K
    times: np.ndarray    # t_k
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.e = np.asarray(self.e, dtype=float)
        self.E_steps = np.asarray(self.E_steps, dtype=float)
        for a in (self.e, self.E_steps):
            if np.any(~np.isfinite(a)) or np.any(a < 0):
                raise ValueError("error quantities must be finite and nonnegative")

    @property
    def E(self):
        return float(np.sum(self.E_steps))

    @property
    def e_final(self):
        return float(self.e[-1])


def evaluation_observations(prob, m, seed):
    """Observation sequences ``(m, K, d')`` shared by every discretization.

    The latent path uses :data:`EVAL_SUBSTEPS` Euler steps per interval
    independent of the filter's ``N``, so every filter on an ``N`` ladder is
    scored on the same data."""
    grid = TimeGrid(prob.horizon, prob.num_obs, EVAL_SUBSTEPS)
    return simulate_observation_sequences(prob, grid, m, seed, tags=(_EVAL_OBS,))


def _grid_matches(x, quad):
    return x.size == quad.J and np.allclose(x, quad.points, rtol=0, atol=1e-12)


def filter_densities(tf, k, obs, x):
    """Normalized ``p_hat_k`` ``(M, I)`` at points ``x``."""
    if _grid_matches(x, tf.quad):
        # the evaluation grid is the quadrature grid: reuse the values
        dens = db.filter_density(tf, k, x, obs, normalized=False)
        mass = np.sum(dens, axis=1) * tf.quad.dz
        if np.any(mass < db.MASS_FLOOR):
            raise DegenerateError(f"zero filter mass at step {k}")
        return dens / mass[:, None]
    return db.filter_density(tf, k, x, obs, normalized=True)


def compute_e_k(tf, ref, k, obs, x, ref_densities=None):
    """``max_{m,i} |p_k(x_i, o^m) - p_hat_k(x_i, o^m)|``.

    ``ref`` provides ``densities(obs, x) -> (M, K, I)``; precomputed values
    can be passed as ``ref_densities`` instead.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if ref_densities is None:
        if ref is None:
            raise MissingArtifactError("no reference filter available")
        ref_densities = ref.densities(obs, x)
    p_hat = filter_densities(tf, k, obs, x)
    return float(np.max(np.abs(ref_densities[:, k - 1] - p_hat)))


def _step_constants(tf, j, obs):
    """Normalizing constants of the step-``j`` target per sequence."""
    prob = tf.problem
    prefix = pad_observations(obs[:, : j - 1], prob.num_obs)
    return prefix, db.normalizing_constants(tf.w(j - 1), prefix, obs[:, j - 1], prob, tf.quad)


def compute_E_k(tf, k, obs, x_probe, inner_batch, seed=0, chunk=None):
    """``max_{m,q} sqrt(mean_b |g_{k-1}(X_N) - Y_N|^2)`` with ``X_0 = x_q``.

    Uses the step ``k-1`` networks and fresh Brownian increments for every
    ``(m, q, b)``. ``obs`` is ``(M, >=k-1, d')``.
    """
    prob = tf.problem
    if not 1 <= k <= tf.num_steps:
        raise ValueError(f"k must be in 1..{tf.num_steps}")
    nets = tf.steps[k - 1]
    grid = tf.grid
    j = k - 1  # the step whose problem is being scored
    obs = np.asarray(obs, dtype=float)
    x_probe = np.asarray(x_probe, dtype=float).reshape(-1, prob.dim)
    m, q, b = obs.shape[0], x_probe.shape[0], inner_batch
    cond_all = pad_observations(obs[:, :j], prob.num_obs)
    if j >= 1:
        prefix, const = _step_constants(tf, j, obs)
        if np.any(const < db.MASS_FLOOR):
            raise DegenerateError(f"normalizing constant underflow at step {j}")
    if chunk is None:
        chunk = max(1, 65536 // (q * b))
    worst = 0.0
    for s in range(0, m, chunk):
        sl = slice(s, min(s + chunk, m))
        mc = sl.stop - sl.start
        rng = stream(seed, _EK, k, s)
        rows = mc * q * b
        x0 = np.broadcast_to(x_probe[None, :, None, :], (mc, q, b, prob.dim)).reshape(rows, prob.dim)
        cond = np.repeat(cond_all[sl], q * b, axis=0)
        dw = brownian_increments(rng, (rows, grid.N, prob.dim), grid.tau)
        path = db.prepare_path(prob.dynamics, grid.tau, x0, dw, cond)
        y = db.rollout_path(nets, path)
        xn = path.x[:, -1]
        if j == 0:
            target = prob.prior.pdf(xn)
        else:
            num = db.evaluate_w_pointwise(tf.w(j - 1), xn, np.repeat(prefix[sl], q * b, axis=0))
            lik = np.maximum(
                prob.likelihood(np.repeat(obs[sl, j - 1], q * b, axis=0), xn), LIKELIHOOD_FLOOR
            )
            target = num * lik / np.repeat(const[sl], q * b)
        rms = np.sqrt(np.mean(((target - y) ** 2).reshape(mc, q, b), axis=2))
        worst = max(worst, float(rms.max()))
    return worst


def evaluate_filter(tf, cfg, ref=None, obs=None, ref_densities=None, log=None):
    """Compute ``e_k`` and ``E_k`` for ``k = 1..K`` into an :class:`ErrorReport`."""
    prob = tf.problem
    K = tf.num_steps
    x = cfg.x_grid
    if obs is None:
        obs = evaluation_observations(prob, cfg.m_eval, cfg.seed)
    if ref_densities is None:
        if ref is None:
            raise MissingArtifactError("no reference filter available")
        ref_densities = ref.densities(obs, x)
    m_res = cfg.m_eval if cfg.m_residual is None else min(cfg.m_residual, obs.shape[0])
    e, E = np.empty(K), np.empty(K)
    for k in range(1, K + 1):
        e[k - 1] = compute_e_k(tf, None, k, obs, x, ref_densities)
        E[k - 1] = compute_E_k(tf, k, obs[:m_res], cfg.x_probe, cfg.inner_batch, seed=cfg.seed)
        if log is not None:
            log(f"N={tf.grid.N} k={k} e_k={e[k - 1]:.6f} E_k={E[k - 1]:.6f}")
    meta = {
        "m_eval": int(obs.shape[0]),
        "m_residual": int(m_res),
        "num_points": cfg.num_points,
        "probes": cfg.probes,
        "inner_batch": cfg.inner_batch,
        "seed": cfg.seed,
    }
    times = tf.grid.obs_times[:K]
    return ErrorReport(tf.grid.N, e, E, times, meta)


# -- convergence ------------------------------------------------------------------

def fit_slope(ns, values):
    """Least-squares slope of ``log2(values)`` against ``log2(ns)``."""
    ns = np.asarray(ns, dtype=float)
    values = np.asarray(values, dtype=float)
    if ns.size < 2 or np.unique(ns).size < 2:
        raise ConfigError("a slope needs at least two distinct N values")
    if np.any(values <= 0):
        raise ValueError("values must be positive to fit a log-log slope")
    return float(np.polyfit(np.log2(ns), np.log2(values), 1)[0])


@dataclass
class ConvergenceTable:
    reports: list
    slope_e: float
    slope_E: float

    @property
    def N(self):
        return [r.N for r in self.reports]


def convergence_table(reports):
    """Per-``N`` summary and fitted slopes of ``e_K`` and ``E``."""
    reports = sorted(reports, key=lambda r: r.N)
    ns = [r.N for r in reports]
    return ConvergenceTable(
        reports,
        fit_slope(ns, [r.e_final for r in reports]),
        fit_slope(ns, [r.E for r in reports]),
    )


def _fmt(v):
    return repr(float(v))


def e_over_time_csv(reports):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["N", "k", "t_k", "e_k"])
    for r in sorted(reports, key=lambda r: r.N):
        for k, (t, e) in enumerate(zip(r.times, r.e), start=1):
            w.writerow([r.N, k, _fmt(t), _fmt(e)])
    return out.getvalue()


def E_over_time_csv(reports):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["N", "k", "E_k"])
    for r in sorted(reports, key=lambda r: r.N):
        for k, v in enumerate(r.E_steps, start=1):
            w.writerow([r.N, k, _fmt(v)])
    return out.getvalue()


def convergence_csv(table):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["N", "e_K", "E", "slope_e_K", "slope_E"])
    for r in table.reports:
        w.writerow([r.N, _fmt(r.e_final), _fmt(r.E), _fmt(table.slope_e), _fmt(table.slope_E)])
    return out.getvalue()


def write_reports(out_dir, reports, table=None):
    """Write ``e_over_time.csv``, ``E_over_time.csv`` and, given a table,
    ``convergence.csv``. Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    files = {"e_over_time.csv": e_over_time_csv(reports), "E_over_time.csv": E_over_time_csv(reports)}
    if table is not None:
        files["convergence.csv"] = convergence_csv(table)
    paths = []
    for name, text in files.items():
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write(text)
        paths.append(path)
    return paths


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
