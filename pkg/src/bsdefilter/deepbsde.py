"""Deep BSDE filter: per-observation-step rollouts, loss, training and the
resulting density approximation.

For observation step ``k`` the networks ``w`` and ``v_0..v_{N-1}`` take the
state together with the zero-padded observations ``o_1..o_k``. The rollout is

    Y_0     = w(X_0, o)
    Y_{n+1} = Y_n - f~(X_n, Y_n, v_n(X_n, o)) tau + v_n(X_n, o) . sigma(X_n) dW_n

and training minimizes ``mean |Y_N - target(X_N)|^2``. Because ``f~`` is
affine in ``(u, v)`` the step can be written ``Y_{n+1} = c_n Y_n + v_n . r_n``
with ``c_n = 1 - tau alpha(X_n)`` and ``r_n = sigma(X_n) dW_n - tau beta(X_n)``;
both depend only on the forward path, which is what makes the reverse sweep
cheap.
"""

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import net
from .errors import ConfigError, DegenerateError, DivergenceError, MissingArtifactError
from .grid import QuadratureGrid
from .model import LIKELIHOOD_FLOOR, driver_coefficients, make_problem
from .sim import (
    DW,
    X0,
    TimeGrid,
    brownian_increments,
    diffusion_term,
    euler_maruyama_path,
    euler_maruyama_terminal,
    pad_observations,
    simulate_observation_sequences,
    state_at_interval,
    stream,
)

log = logging.getLogger(__name__)

MASS_FLOOR = 1e-300
# rows per network evaluation chunk; bounds memory of the 128-wide layers
EVAL_CHUNK = 16384

# stream tags, see sim.stream
_INIT, _EPOCH, _POOL, _PICK = 10, 11, 12, 13


@dataclass
class StepNetworks:
    """The ``w`` network and the stacked ``N`` gradient networks of one step."""

    w: net.MlpParams
    v: net.MlpParams
    k: int

    @property
    def N(self):
        return self.v.stack

    def arrays(self):
        return self.w.arrays() + self.v.arrays()

    def copy(self, k=None):
        return StepNetworks(self.w.copy(), self.v.copy(), self.k if k is None else k)

    def v_net(self, n):
        return self.v.member(n)

    def equal(self, other):
        return self.k == other.k and self.w.equal(other.w) and self.v.equal(other.v)

    @classmethod
    def init(cls, prob, N, k, rng, w_hidden=128, v_hidden=32):
        in_dim = prob.net_input_dim
        w = net.init_params(net.MlpSpec.w_network(in_dim, w_hidden), rng)
        v = net.init_params(net.MlpSpec.v_network(in_dim, prob.dim, v_hidden), rng, stack=N)
        return cls(w, v, k)


@dataclass
class TrainConfig:
    batch_size: int = 512
    batches_per_epoch: int = 200
    max_epochs: int = 100
    patience: int = 5
    lr: float = 1e-4
    # per-epoch multiplicative learning-rate decay, floored at lr_min
    lr_decay: float = 1.0
    lr_min: float = 0.0
    seed: int = 0
    warm_start: bool = True
    # Distinct observation sequences per epoch. None draws one per training
    # sample; a finite pool bounds the cost of the per-sequence quadrature.
    obs_pool: int | None = None
    # Standard deviation of the X_0 sampling distribution. None samples X_0
    # from the prior; a wider Gaussian covers the tails of the evaluation
    # domain more evenly.
    x0_std: float | None = None
    w_hidden: int = 128
    v_hidden: int = 32
    quad: QuadratureGrid = field(default_factory=QuadratureGrid)

    def __post_init__(self):
        if isinstance(self.quad, dict):
            self.quad = QuadratureGrid(**self.quad)
        for name in ("batch_size", "batches_per_epoch", "patience", "w_hidden", "v_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.max_epochs < 0 or not self.lr > 0:
            raise ConfigError("max_epochs must be >= 0 and lr > 0")
        if 0 < self.max_epochs < self.patience:
            raise ConfigError("patience must not exceed max_epochs")
        if not 0 < self.lr_decay <= 1 or self.lr_min < 0:
            raise ConfigError("lr_decay must be in (0, 1] and lr_min >= 0")
        if self.x0_std is not None and not self.x0_std > 0:
            raise ConfigError("x0_std must be positive")
        if self.obs_pool is not None and self.obs_pool < 1:
            raise ConfigError("obs_pool must be positive")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class StepResult:
    nets: StepNetworks
    losses: list
    initial_loss: float
    samples: int
    seconds: float = 0.0


@dataclass
class TrainedFilter:
    problem: object
    grid: TimeGrid
    quad: QuadratureGrid
    steps: list
    losses: list
    config: TrainConfig

    def w(self, k):
        return self.steps[k].w

    @property
    def num_steps(self):
        return len(self.steps)


# -- rollout --------------------------------------------------------------------

@dataclass
class RolloutPath:
    """Network-independent part of a rollout."""

    x: np.ndarray     # (M, N + 1, d)
    cond: np.ndarray  # (M, C) padded observations
    c: np.ndarray     # (M, N)
    r: np.ndarray     # (M, N, d)

    @property
    def m(self):
        return self.x.shape[0]

    def take(self, sl):
        return RolloutPath(self.x[sl], self.cond[sl], self.c[sl], self.r[sl])


def prepare_path(dyn, tau, x0, dw, cond):
    """Integrate ``X`` and tabulate ``c_n`` and ``r_n``.

    ``x0`` is ``(M, d)``, ``dw`` is ``(M, N, d)``, ``cond`` is ``(M, C)``.
    """
    x = euler_maruyama_path(dyn, x0, dw, tau)
    xs = x[:, :-1]
    alpha, beta = driver_coefficients(dyn, xs)
    c = 1.0 - tau * alpha
    r = diffusion_term(dyn, xs, dw) - tau * beta
    return RolloutPath(x, np.asarray(cond, dtype=float), c, r)


def _net_inputs(path):
    m, n1, d = path.x.shape
    cond = path.cond
    zw = np.concatenate([path.x[:, 0], cond], axis=1)
    xs = np.swapaxes(path.x[:, :-1], 0, 1)  # (N, M, d)
    zv = np.concatenate([xs, np.broadcast_to(cond, (n1 - 1,) + cond.shape)], axis=2)
    return zw, zv


def _forward(nets, path, keep=False):
    zw, zv = _net_inputs(path)
    y0, cache_w = net.forward(nets.w, zw, return_cache=True)
    v, cache_v = net.forward(nets.v, zv, return_cache=True)  # (N, M, d)
    y = y0[:, 0]
    for n in range(nets.N):
        y = path.c[:, n] * y + np.sum(v[n] * path.r[:, n], axis=-1)
    if not np.all(np.isfinite(y)):
        bad = int(np.flatnonzero(~np.isfinite(y))[0])
        raise DivergenceError(f"non-finite Y_N for sample {bad}", sample=bad)
    return y, (cache_w, cache_v) if keep else None


def rollout(nets, prob, grid, batch, k):
    """Roll the step-``k`` networks over a :class:`~bsdefilter.sim.TrajectoryBatch`.

    Returns ``(Y_N, X_path)`` with ``X_path`` of shape ``(M, N + 1, d)``.
    """
    path = batch_path(prob, grid, batch, k)
    y, _ = _forward(nets, path)
    return y, path.x


def rollout_path(nets, path):
    """``Y_N`` for a prepared :class:`RolloutPath`."""
    return _forward(nets, path)[0]


def batch_path(prob, grid, batch, k):
    x0 = state_at_interval(prob, grid, batch, k)
    cond = pad_observations(batch.obs[:, :k], grid.K)
    return prepare_path(prob.dynamics, grid.tau, x0, batch.dw[:, k], cond)


def loss_and_gradient(nets, path, target):
    """Mean squared terminal mismatch and its exact gradient.

    The gradient list follows :meth:`StepNetworks.arrays`.
    """
    y, (cache_w, cache_v) = _forward(nets, path, keep=True)
    resid = y - target
    m = y.shape[0]
    g = 2.0 * resid / m
    gv = np.empty((nets.N, m, path.r.shape[-1]))
    for n in range(nets.N - 1, -1, -1):
        gv[n] = g[:, None] * path.r[:, n]
        g = g * path.c[:, n]
    grads_w, _ = net.backward(nets.w, cache_w, g[:, None])
    grads_v, _ = net.backward(nets.v, cache_v, gv)
    return float(np.mean(resid**2)), grads_w + grads_v


def loss(nets, prob, grid, batch, k, target):
    """Empirical loss on a batch; ``target(x, obs)`` gives per-sample values."""
    path = batch_path(prob, grid, batch, k)
    y, _ = _forward(nets, path)
    g = np.asarray(target(path.x[:, -1], batch.obs), dtype=float)
    return float(np.mean((y - g) ** 2))


def loss_gradient(nets, prob, grid, batch, k, target):
    """Gradient of :func:`loss` with respect to every network parameter."""
    path = batch_path(prob, grid, batch, k)
    g = np.asarray(target(path.x[:, -1], batch.obs), dtype=float)
    return loss_and_gradient(nets, path, g)[1]


# -- densities and targets ------------------------------------------------------

def evaluate_w(w, x, cond):
    """``w(x_i, cond_m)`` on the product of points ``x`` ``(I, d)`` and
    conditions ``cond`` ``(M, C)``; returns ``(M, I)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    cond = np.asarray(cond, dtype=float)
    m, i = cond.shape[0], x.shape[0]
    out = np.empty((m, i))
    rows = max(1, EVAL_CHUNK // i)
    for s in range(0, m, rows):
        cc = cond[s : s + rows]
        z = np.concatenate(
            [np.broadcast_to(x, (cc.shape[0], i, x.shape[1])),
             np.broadcast_to(cc[:, None, :], (cc.shape[0], i, cc.shape[1]))],
            axis=2,
        ).reshape(-1, x.shape[1] + cc.shape[1])
        out[s : s + rows] = net.forward(w, z)[:, 0].reshape(cc.shape[0], i)
    return out


def evaluate_w_pointwise(w, x, cond):
    """``w(x_m, cond_m)`` row by row; ``x`` ``(M, d)``, returns ``(M,)``."""
    z = np.concatenate([np.asarray(x, dtype=float), cond], axis=1)
    out = np.empty(z.shape[0])
    for s in range(0, z.shape[0], EVAL_CHUNK):
        out[s : s + EVAL_CHUNK] = net.forward(w, z[s : s + EVAL_CHUNK])[:, 0]
    return out


def _floored_likelihood(prob, o, x):
    return np.maximum(prob.likelihood(o, x), LIKELIHOOD_FLOOR)


def normalizing_constants(w_prev, prefix_cond, o_last, prob, quad):
    """Per-sequence ``C = sum_j w_prev(z_j, prefix) L(o_last, z_j) dz``.

    Rows sharing a prefix reuse one evaluation of ``w_prev`` on the grid.
    """
    if prob.dim != 1:
        raise ConfigError("quadrature normalization is only implemented for d = 1")
    prefix_cond = np.asarray(prefix_cond, dtype=float)
    uniq, inverse = np.unique(prefix_cond, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    z = quad.points[:, None]
    table = evaluate_w(w_prev, z, uniq)  # (U, J)
    o_last = np.asarray(o_last, dtype=float)
    c = np.empty(prefix_cond.shape[0])
    rows = max(1, EVAL_CHUNK // quad.J)
    for s in range(0, c.shape[0], rows):
        sl = slice(s, s + rows)
        lik = _floored_likelihood(prob, o_last[sl, None, :], z[None])
        c[sl] = np.sum(table[inverse[sl]] * lik, axis=1) * quad.dz
    return c


def _prev_w(prev, k):
    if isinstance(prev, TrainedFilter):
        return prev.w(k)
    if isinstance(prev, (list, tuple)):
        item = prev[k]
        return item.w if isinstance(item, StepNetworks) else item
    if isinstance(prev, net.MlpParams):
        return prev
    raise MissingArtifactError(f"no trained network for step {k}")


def build_target(prev, k, obs, x_terminal, quad, prob):
    """Training targets at the terminal states of step ``k``.

    ``k = 0`` uses the prior density. For ``k >= 1`` the target is
    ``w*_{k-1}(x, o_{1:k-1}) L(o_k, x) / C(o_{1:k})`` with ``C`` a per-sample
    Riemann sum on ``quad``. ``prev`` holds ``w*_{k-1}`` (a
    :class:`TrainedFilter`, a list of step networks, or the network itself).
    """
    x_terminal = np.asarray(x_terminal, dtype=float)
    if k == 0:
        return prob.prior.pdf(x_terminal)
    obs = np.asarray(obs, dtype=float)
    w_prev = _prev_w(prev, k - 1) if not isinstance(prev, net.MlpParams) else prev
    cond = pad_observations(obs[:, : k - 1], prob.num_obs)
    o_k = obs[:, k - 1]
    const = normalizing_constants(w_prev, cond, o_k, prob, quad)
    if np.any(const < MASS_FLOOR):
        raise DegenerateError(
            f"normalizing constant below {MASS_FLOOR} at step {k}; "
            "the likelihood support misses the quadrature grid"
        )
    num = evaluate_w_pointwise(w_prev, x_terminal, cond) * _floored_likelihood(prob, o_k, x_terminal)
    return num / const


def filter_density(tf, k, x, obs, normalized=True):
    """Filter approximation ``w*_{k-1}(x, o_{1:k-1}) L(o_k, x)`` at ``t_k``.

    ``x`` holds evaluation points ``(I,)`` or ``(I, d)``; ``obs`` is one
    sequence ``(>=k, d')`` or many ``(M, >=k, d')``. The result has shape
    ``(I,)`` or ``(M, I)``. ``normalized`` divides by the quadrature mass on
    ``tf.quad``.
    """
    if not 1 <= k <= tf.num_steps:
        raise ValueError(f"k must be in 1..{tf.num_steps}")
    prob = tf.problem
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    w = tf.w(k - 1)
    cond = pad_observations(obs[:, : k - 1], prob.num_obs)
    o_k = obs[:, k - 1]
    dens = evaluate_w(w, x, cond) * prob.likelihood(o_k[:, None, :], x[None])
    if normalized:
        const = normalizing_constants(w, cond, o_k, prob, tf.quad)
        if np.any(const < MASS_FLOOR):
            raise DegenerateError(f"zero filter mass at step {k}")
        dens = dens / const[:, None]
    return dens[0] if single else dens


# -- training -------------------------------------------------------------------

@dataclass
class _EpochData:
    path: RolloutPath
    target: np.ndarray


def _epoch_data(prob, grid, k, prev, cfg, epoch):
    total = cfg.batch_size * cfg.batches_per_epoch
    seed = cfg.seed
    d = prob.dim
    x = prob.prior.sample(stream(seed, _EPOCH, k, epoch, X0), total)
    if cfg.x0_std is not None:
        x = prob.prior.mean + (x - prob.prior.mean) * (cfg.x0_std / np.sqrt(np.diag(prob.prior.cov)))
    rng_dw = stream(seed, _EPOCH, k, epoch, DW)
    for _ in range(k):
        x = euler_maruyama_terminal(
            prob.dynamics, x, brownian_increments(rng_dw, (total, grid.N, d), grid.tau), grid.tau
        )
    dw = brownian_increments(rng_dw, (total, grid.N, d), grid.tau)

    if k == 0:
        cond = np.zeros((total, prob.net_input_dim - d))
        path = prepare_path(prob.dynamics, grid.tau, x, dw, cond)
        return _EpochData(path, prob.prior.pdf(path.x[:, -1]))

    pool = total if cfg.obs_pool is None else cfg.obs_pool
    # observations are drawn for the first k intervals only
    sub = TimeGrid(grid.tau * grid.N * k, k, grid.N)
    obs = simulate_observation_sequences(prob, sub, pool, seed, tags=(_POOL, k, epoch))
    if cfg.obs_pool is None:
        pick = np.arange(total)
    else:
        pick = stream(seed, _PICK, k, epoch).integers(pool, size=total)
    cond = pad_observations(obs[:, :k], grid.K)
    path = prepare_path(prob.dynamics, grid.tau, x, dw, cond[pick])

    w_prev = _prev_w(prev, k - 1)
    prefix = pad_observations(obs[:, : k - 1], grid.K)
    const = normalizing_constants(w_prev, prefix, obs[:, k - 1], prob, cfg.quad)
    if np.any(const < MASS_FLOOR):
        raise DegenerateError(f"normalizing constant underflow while training step {k}")
    xn = path.x[:, -1]
    num = evaluate_w_pointwise(w_prev, xn, prefix[pick]) * _floored_likelihood(
        prob, obs[pick, k - 1], xn
    )
    return _EpochData(path, num / const[pick])


def _warm_copy(nets, k, prob):
    """Copy of the step ``k - 1`` networks to start step ``k`` from.

    Step ``k - 1`` never saw ``o_k`` (its input slot held padding), so the
    first-layer weights reading that slot are untrained; they are zeroed so
    the copy starts as the previous step's function of ``(x, o_{1:k-1})``.
    """
    out = nets.copy(k=k)
    if k >= 1:
        c = prob.dim + (k - 1) * prob.obs_dim
        for p in (out.w, out.v):
            p.weights[0][..., c : c + prob.obs_dim, :] = 0.0
    return out


def train_step_k(prob, grid, k, prev, cfg, warm_start=None):
    """Train the step-``k`` networks with Adam on freshly simulated epochs.

    Stops after ``cfg.max_epochs`` or once the epoch-averaged loss has not
    improved for ``cfg.patience`` epochs; the best epoch's parameters are
    returned.
    """
    t0 = time.perf_counter()
    if k >= 1 and prev is None:
        raise MissingArtifactError(f"step {k} needs the trained network of step {k - 1}")
    if warm_start is not None:
        nets = _warm_copy(warm_start, k, prob)
    else:
        nets = StepNetworks.init(
            prob, grid.N, k, stream(cfg.seed, _INIT, k), cfg.w_hidden, cfg.v_hidden
        )
    if cfg.max_epochs == 0:
        return StepResult(nets, [], float("nan"), 0, time.perf_counter() - t0)

    arrays = nets.arrays()
    adam = net.AdamState.create(arrays, lr=cfg.lr)
    best_loss, best = np.inf, nets.copy()
    losses, stale, initial = [], 0, None
    bs = cfg.batch_size
    samples = 0
    for epoch in range(cfg.max_epochs):
        adam.lr = max(cfg.lr * cfg.lr_decay**epoch, cfg.lr_min)
        data = _epoch_data(prob, grid, k, prev, cfg, epoch)
        if initial is None:
            sl = slice(0, bs)
            initial = float(np.mean((rollout_path(nets, data.path.take(sl)) - data.target[sl]) ** 2))
        total = 0.0
        for b in range(cfg.batches_per_epoch):
            sl = slice(b * bs, (b + 1) * bs)
            value, grads = loss_and_gradient(nets, data.path.take(sl), data.target[sl])
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss at step {k}, epoch {epoch}, batch {b}")
            net.adam_step(arrays, grads, adam)
            total += value
        samples += data.path.m
        avg = total / cfg.batches_per_epoch
        losses.append(avg)
        log.info("step %d epoch %d loss %.6e", k, epoch, avg)
        if avg < best_loss:
            best_loss, best, stale = avg, nets.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return StepResult(best, losses, initial, samples, time.perf_counter() - t0)


def train_filter(prob, grid, cfg, out_dir=None, steps=None):
    """Train step networks for ``k = 0..K-1`` in sequence.

    With ``out_dir`` every finished step is persisted immediately, and steps
    already present there (from an interrupted run with the same settings)
    are loaded instead of retrained.
    """
    done, losses, extra = [], [], []
    if out_dir is not None and os.path.exists(os.path.join(out_dir, MANIFEST)):
        existing = load_filter(out_dir)
        if _manifest_key(existing) != _manifest_key_parts(prob, grid, cfg):
            raise ConfigError(f"{out_dir} holds a filter trained with different settings")
        done, losses = list(existing.steps), list(existing.losses)
        extra = existing_info(out_dir)
    tf = TrainedFilter(prob, grid, cfg.quad, done, losses, cfg)
    last = grid.K if steps is None else min(steps, grid.K)
    info = extra
    for k in range(len(done), last):
        warm = tf.steps[k - 1] if (k > 0 and cfg.warm_start) else None
        res = train_step_k(prob, grid, k, tf, cfg, warm_start=warm)
        tf.steps.append(res.nets)
        tf.losses.append(res.losses)
        info.append({"k": k, "epochs": len(res.losses), "samples": res.samples,
                     "initial_loss": res.initial_loss, "seconds": round(res.seconds, 3)})
        log.info("finished step %d after %d epochs (%.1fs)", k, len(res.losses), res.seconds)
        if out_dir is not None:
            save_filter(tf, out_dir, info)
    return tf


# -- persistence ----------------------------------------------------------------

MANIFEST = "manifest.json"


def _manifest_key_parts(prob, grid, cfg):
    return {
        "problem": prob.name,
        "problem_params": dict(prob.params),
        "grid": {"horizon": grid.horizon, "K": grid.K, "N": grid.N},
        "train": cfg.to_dict(),
    }


def _manifest_key(tf):
    return _manifest_key_parts(tf.problem, tf.grid, tf.config)


def save_filter(tf, out_dir, info=None):
    """Write one ``w_k.bin`` and ``v_k.bin`` per trained step plus a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    for s in tf.steps:
        for name, params in (("w", s.w), ("v", s.v)):
            with open(os.path.join(out_dir, f"{name}_{s.k}.bin"), "wb") as fh:
                fh.write(net.serialize(params))
    manifest = _manifest_key(tf)
    manifest.update(
        {
            "format": 1,
            "tau": tf.grid.tau,
            "steps_trained": tf.num_steps,
            "losses": tf.losses,
            "steps": info or [],
        }
    )
    tmp = os.path.join(out_dir, MANIFEST + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, MANIFEST))


def existing_info(out_dir):
    with open(os.path.join(out_dir, MANIFEST)) as fh:
        return json.load(fh).get("steps", [])


def load_filter(out_dir):
    path = os.path.join(out_dir, MANIFEST)
    if not os.path.exists(path):
        raise MissingArtifactError(f"no trained filter in {out_dir}")
    with open(path) as fh:
        man = json.load(fh)
    prob = make_problem(man["problem"], **man.get("problem_params", {}))
    grid = TimeGrid(**man["grid"])
    cfg = TrainConfig(**man["train"])
    steps = []
    for k in range(man["steps_trained"]):
        parts = []
        for name in ("w", "v"):
            fname = os.path.join(out_dir, f"{name}_{k}.bin")
            if not os.path.exists(fname):
                raise MissingArtifactError(f"missing {fname}")
            with open(fname, "rb") as fh:
                parts.append(net.deserialize(fh.read()))
        steps.append(StepNetworks(parts[0], parts[1], k))
    return TrainedFilter(prob, grid, cfg.quad, steps, man.get("losses", []), cfg)
