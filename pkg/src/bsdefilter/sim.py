"""Seeded Monte Carlo generation of state paths, observations and Brownian
increments on the two-level time grid.

Randomness comes from Philox, a counter-based generator. Every stream is keyed
by ``(seed, *tags)`` through :class:`numpy.random.SeedSequence`, so a given
piece of data never depends on what was drawn before it.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, DivergenceError, ShapeError

# stream tags
X0, DW, S0, B, V = 0, 1, 2, 3, 4


def stream(seed, *tags):
    """Independent Philox generator for ``(seed, *tags)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(t) for t in tags))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class TimeGrid:
    """``K`` observation intervals on ``[0, T]``, each split into ``N`` Euler steps."""

    horizon: float
    K: int
    N: int

    def __post_init__(self):
        if self.K < 1 or self.N < 1 or not self.horizon > 0:
            raise ValueError("need K >= 1, N >= 1 and horizon > 0")

    @property
    def tau(self):
        return self.horizon / (self.K * self.N)

    @property
    def obs_times(self):
        return self.horizon * np.arange(1, self.K + 1) / self.K

    def node(self, k, n):
        return (k * self.N + n) * self.tau

    @classmethod
    def for_problem(cls, prob, N):
        return cls(prob.horizon, prob.num_obs, N)


@dataclass(frozen=True)
class TrajectoryBatch:
    x0: np.ndarray   # (M, d)
    dw: np.ndarray   # (M, K, N, d)
    obs: np.ndarray  # (M, K, d')
    seed: int

    @property
    def m(self):
        return self.x0.shape[0]

    def equals(self, other):
        return (
            self.seed == other.seed
            and np.array_equal(self.x0, other.x0)
            and np.array_equal(self.dw, other.dw)
            and np.array_equal(self.obs, other.obs)
        )


def diffusion_term(dyn, x, dw):
    """``sigma(x) dw`` for states ``(..., d)`` and increments ``(..., d)``."""
    if dyn.constant_sigma is not None:
        if dyn.dim == 1:
            return dyn.constant_sigma[0, 0] * dw
        return dw @ dyn.constant_sigma.T
    return (dyn.sigma(x) @ dw[..., None])[..., 0]


def euler_maruyama_path(dyn, x0, increments, tau):
    """Euler-Maruyama path ``x_{n+1} = x_n + mu(x_n) tau + sigma(x_n) dw_n``.

    ``x0`` has shape ``(..., d)`` and ``increments`` shape ``(..., n, d)``;
    returns the path of shape ``(..., n + 1, d)`` starting with ``x0``.
    """
    x = np.asarray(x0, dtype=float)
    inc = np.asarray(increments, dtype=float)
    if inc.ndim < 2 or inc.shape[-2] < 1:
        raise ShapeError("need at least one increment")
    if not tau > 0:
        raise ValueError("tau must be positive")
    steps = inc.shape[-2]
    path = np.empty(np.broadcast_shapes(x.shape[:-1], inc.shape[:-2]) + (steps + 1, x.shape[-1]))
    path[..., 0, :] = x
    for n in range(steps):
        x = x + dyn.mu(x) * tau + diffusion_term(dyn, x, inc[..., n, :])
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at Euler step {n + 1}", step=n + 1)
        path[..., n + 1, :] = x
    return path


def euler_maruyama_terminal(dyn, x0, increments, tau):
    """Like :func:`euler_maruyama_path` but keeps only the final state."""
    x = np.asarray(x0, dtype=float)
    inc = np.asarray(increments, dtype=float)
    for n in range(inc.shape[-2]):
        x = x + dyn.mu(x) * tau + diffusion_term(dyn, x, inc[..., n, :])
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at Euler step {n + 1}", step=n + 1)
    return x


def brownian_increments(rng, shape, tau):
    return np.sqrt(tau) * rng.standard_normal(shape)


def simulate_observation_sequences(prob, grid, m, seed, tags=(0,)):
    """Observations ``O_1..O_K`` for ``m`` independent latent paths, shape
    ``(m, K, d')``. The latent state is simulated on the fine grid."""
    d = prob.dim
    s = prob.prior.sample(stream(seed, *tags, S0), m)
    rng_b = stream(seed, *tags, B)
    rng_v = stream(seed, *tags, V)
    obs = np.empty((m, grid.K, prob.obs_dim))
    for k in range(grid.K):
        db = brownian_increments(rng_b, (m, grid.N, d), grid.tau)
        s = euler_maruyama_terminal(prob.dynamics, s, db, grid.tau)
        obs[:, k] = prob.observation.sample(rng_v, s)
    return obs


def simulate_observations(prob, grid, m, seed):
    """Draw a :class:`TrajectoryBatch` of ``m`` samples.

    ``x0`` and ``dw`` drive the auxiliary process ``X``; ``obs`` come from an
    independent latent path ``S`` driven by its own Brownian motion.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    x0 = prob.prior.sample(stream(seed, 0, X0), m)
    dw = brownian_increments(stream(seed, 0, DW), (m, grid.K, grid.N, prob.dim), grid.tau)
    obs = simulate_observation_sequences(prob, grid, m, seed)
    return TrajectoryBatch(x0=x0, dw=dw, obs=obs, seed=int(seed))


def state_at_interval(prob, grid, batch, k):
    """``X`` at ``t_k`` obtained by integrating the batch increments of the
    first ``k`` intervals."""
    x = batch.x0
    if k == 0:
        return x.copy()
    m = batch.m
    inc = batch.dw[:, :k].reshape(m, k * grid.N, prob.dim)
    return euler_maruyama_terminal(prob.dynamics, x, inc, grid.tau)


def pad_observations(obs_prefix, K):
    """Flatten ``o_1..o_k`` and zero-pad to the fixed length ``(K - 1) d'``.

    ``obs_prefix`` has shape ``(..., k, d')``.
    """
    obs_prefix = np.asarray(obs_prefix, dtype=float)
    if obs_prefix.ndim < 2:
        raise ShapeError("obs_prefix must have shape (..., k, d')")
    k, dp = obs_prefix.shape[-2:]
    if k > K - 1:
        raise ShapeError(f"prefix of length {k} exceeds K - 1 = {K - 1}")
    lead = obs_prefix.shape[:-2]
    out = np.zeros(lead + ((K - 1) * dp,))
    out[..., : k * dp] = obs_prefix.reshape(lead + (k * dp,))
    return out


# -- binary batch files ----------------------------------------------------------

BATCH_MAGIC = b"BSDEBATCH".ljust(16, b"\0")
BATCH_VERSION = 1
_HEADER = struct.Struct("<16s7Q")


def dumps_batch(batch):
    m, K, N, d = batch.dw.shape
    dp = batch.obs.shape[-1]
    head = _HEADER.pack(BATCH_MAGIC, BATCH_VERSION, m, K, N, d, dp, batch.seed & (2**64 - 1))
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (batch.x0, batch.dw, batch.obs)
    )
    return head + body


def loads_batch(data):
    if len(data) < _HEADER.size:
        raise DecodeError("truncated batch header")
    magic, version, m, K, N, d, dp, seed = _HEADER.unpack_from(data)
    if magic != BATCH_MAGIC:
        raise DecodeError("bad batch magic")
    if version != BATCH_VERSION:
        raise DecodeError(f"unsupported batch version {version}")
    sizes = [m * d, m * K * N * d, m * K * dp]
    need = _HEADER.size + 8 * sum(sizes)
    if len(data) != need:
        raise DecodeError(f"batch payload has {len(data)} bytes, expected {need}")
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(float)
    x0, dw, obs = np.split(flat, np.cumsum(sizes)[:-1])
    return TrajectoryBatch(
        x0=x0.reshape(m, d), dw=dw.reshape(m, K, N, d), obs=obs.reshape(m, K, dp), seed=seed
    )


def save_batch(path, batch):
    with open(path, "wb") as fh:
        fh.write(dumps_batch(batch))


def load_batch(path):
    with open(path, "rb") as fh:
        return loads_batch(fh.read())
