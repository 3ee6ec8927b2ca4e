"""Filtering problems: state dynamics, observation model, prior and BSDE driver.

All callables are vectorized over leading axes: a state argument ``x`` has
shape ``(..., d)``, an observation ``o`` has shape ``(..., d')``.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, EllipticityError

LIKELIHOOD_FLOOR = 1e-300


@dataclass(frozen=True)
class DynamicsModel:
    """Coefficients of ``dS = mu(S) dt + sigma(S) dB`` and the derivatives the
    driver needs.

    ``a_first_derivs(x)[..., j]`` is ``sum_i d a_ij / d x_i`` and
    ``a_second_trace(x)`` is ``sum_ij d^2 a_ij / d x_i d x_j`` with
    ``a = sigma sigma^T``.
    """

    mu: Callable
    sigma: Callable
    div_mu: Callable
    a_first_derivs: Callable
    a_second_trace: Callable
    dim: int
    # Set for linear drift ``mu(x) = A x`` with constant sigma; used by the
    # Kalman reference.
    linear_drift: Optional[np.ndarray] = None
    constant_sigma: Optional[np.ndarray] = None

    def a(self, x):
        s = self.sigma(x)
        return s @ np.swapaxes(s, -1, -2)


@dataclass(frozen=True)
class ObservationModel:
    """Additive Gaussian observations ``O = h(S) + V`` with ``V ~ N(0, R)``."""

    h: Callable
    noise_cov: np.ndarray
    obs_dim: int
    h_matrix: Optional[np.ndarray] = None
    _chol: np.ndarray = field(init=False, repr=False)
    _log_norm: float = field(init=False, repr=False)

    def __post_init__(self):
        r = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if r.shape != (self.obs_dim, self.obs_dim):
            raise DomainError(f"noise_cov must be {self.obs_dim}x{self.obs_dim}")
        object.__setattr__(self, "noise_cov", r)
        chol = np.linalg.cholesky(r)
        object.__setattr__(self, "_chol", chol)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        object.__setattr__(
            self, "_log_norm", -0.5 * (self.obs_dim * np.log(2 * np.pi) + logdet)
        )

    @property
    def mode_density(self):
        """Largest value the likelihood can take, ``det(2 pi R)^(-1/2)``."""
        return float(np.exp(self._log_norm))

    def log_likelihood(self, o, x):
        resid = np.asarray(o, dtype=float) - self.h(np.asarray(x, dtype=float))
        if self.obs_dim == 1:
            q = resid[..., 0] ** 2 / self.noise_cov[0, 0]
        else:
            sol = np.linalg.solve(self._chol, resid[..., None])[..., 0]
            q = np.sum(sol**2, axis=-1)
        return self._log_norm - 0.5 * q

    def likelihood(self, o, x):
        """``L(o, x) = N(o | h(x), R)``, broadcasting ``o`` against ``x``."""
        return np.exp(self.log_likelihood(o, x))

    def sample(self, rng, x):
        x = np.asarray(x, dtype=float)
        noise = rng.standard_normal(x.shape[:-1] + (self.obs_dim,)) @ self._chol.T
        return self.h(x) + noise


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.shape[0]

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        d = self.dim
        resid = x - self.mean
        chol = np.linalg.cholesky(self.cov)
        sol = np.linalg.solve(chol, resid[..., None])[..., 0] if d > 1 else resid / chol[0, 0]
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return np.exp(-0.5 * np.sum(sol**2, axis=-1) - 0.5 * (d * np.log(2 * np.pi) + logdet))

    def sample(self, rng, m):
        chol = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((m, self.dim)) @ chol.T


@dataclass(frozen=True)
class FilterProblem:
    dynamics: DynamicsModel
    observation: ObservationModel
    prior: GaussianPrior
    horizon: float = 1.0
    num_obs: int = 10
    name: str = "custom"
    # constructor arguments, so the problem can be rebuilt by name
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.horizon > 0:
            raise DomainError("horizon must be positive")
        if self.num_obs < 1:
            raise DomainError("num_obs must be >= 1")
        if self.prior.dim != self.dynamics.dim:
            raise DomainError("prior and dynamics dimensions differ")

    @property
    def dim(self):
        return self.dynamics.dim

    @property
    def obs_dim(self):
        return self.observation.obs_dim

    @property
    def net_input_dim(self):
        return self.dim + (self.num_obs - 1) * self.obs_dim

    def likelihood(self, o, x):
        return self.observation.likelihood(o, x)


def driver_coefficients(dyn, x):
    """Return ``(alpha, beta)`` with ``f~(x, u, v) = alpha(x) u + beta(x) . v``.

    ``alpha = 1/2 sum_ij d^2 a_ij - div mu`` and
    ``beta_j = sum_i d a_ij / d x_i - 2 mu_j``.
    """
    x = np.asarray(x, dtype=float)
    alpha = 0.5 * dyn.a_second_trace(x) - dyn.div_mu(x)
    beta = dyn.a_first_derivs(x) - 2.0 * dyn.mu(x)
    return alpha, beta


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DomainError("non-finite input to driver")


def driver_f_tilde(dyn, x, u, v):
    """Driver in gradient form: ``f~(x, u, v)`` with ``v`` a spatial gradient."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_finite(x, u, v)
    alpha, beta = driver_coefficients(dyn, x)
    return alpha * u + np.sum(beta * v, axis=-1)


def driver_f(dyn, x, u, z):
    """Driver in BSDE form, ``f(x, u, z) = f~(x, u, (sigma sigma^T)^-1 sigma z)``."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    _check_finite(x, z)
    s = dyn.sigma(x)
    a = s @ np.swapaxes(s, -1, -2)
    det = np.linalg.det(a)
    if np.any(~np.isfinite(det)) or np.any(np.abs(det) < 1e-300):
        raise EllipticityError("sigma sigma^T is singular")
    rhs = (s @ z[..., None])
    v = np.linalg.solve(a, rhs)[..., 0]
    return driver_f_tilde(dyn, x, u, v)


# -- finite-difference fallback ------------------------------------------------

def _fd_step(x):
    return 1e-5 * np.maximum(1.0, np.abs(x))


def finite_difference_dynamics(mu, sigma, dim, **kwargs):
    """Build a :class:`DynamicsModel` whose derivative fields are central
    finite differences of ``mu`` and ``a = sigma sigma^T``.

    Intended for prototyping; analytic derivatives should be preferred.
    """

    def a_of(x):
        s = sigma(x)
        return s @ np.swapaxes(s, -1, -2)

    def div_mu(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for i in range(dim):
            h = _fd_step(x[..., i])
            e = np.zeros(dim)
            e[i] = 1.0
            xp = x + h[..., None] * e
            xm = x - h[..., None] * e
            out += (mu(xp)[..., i] - mu(xm)[..., i]) / (2 * h)
        return out

    def a_first(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for i in range(dim):
            h = _fd_step(x[..., i])
            e = np.zeros(dim)
            e[i] = 1.0
            da = (a_of(x + h[..., None] * e) - a_of(x - h[..., None] * e)) / (2 * h)[..., None, None]
            out += da[..., i, :]
        return out

    def a_second(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        # coarser step for second differences
        for i in range(dim):
            for j in range(dim):
                hi = 1e-3 * np.maximum(1.0, np.abs(x[..., i]))
                hj = 1e-3 * np.maximum(1.0, np.abs(x[..., j]))
                ei = np.zeros(dim)
                ej = np.zeros(dim)
                ei[i] = 1.0
                ej[j] = 1.0
                di = hi[..., None] * ei
                dj = hj[..., None] * ej
                val = (
                    a_of(x + di + dj) - a_of(x + di - dj) - a_of(x - di + dj) + a_of(x - di - dj)
                )[..., i, j] / (4 * hi * hj)
                out += val
        return out

    return DynamicsModel(
        mu=mu,
        sigma=sigma,
        div_mu=div_mu,
        a_first_derivs=a_first,
        a_second_trace=a_second,
        dim=dim,
        **kwargs,
    )


def validate_derivatives(dyn, points):
    """Compare the analytic derivative fields of ``dyn`` with central finite
    differences at ``points`` (shape ``(P, d)``).

    Returns a dict of maximum relative errors keyed by field name.
    """
    fd = finite_difference_dynamics(dyn.mu, dyn.sigma, dyn.dim)
    points = np.asarray(points, dtype=float)
    out = {}
    for name in ("div_mu", "a_first_derivs", "a_second_trace"):
        exact = np.asarray(getattr(dyn, name)(points))
        approx = np.asarray(getattr(fd, name)(points))
        scale = np.maximum(np.abs(exact), 1.0)
        out[name] = float(np.max(np.abs(exact - approx) / scale))
    return out


# -- the two experiment problems -----------------------------------------------

def _scalar_dynamics(mu, dmu, sigma_value, linear_drift=None):
    s = np.array([[float(sigma_value)]])

    return DynamicsModel(
        mu=mu,
        sigma=lambda x: np.broadcast_to(s, np.shape(x)[:-1] + (1, 1)),
        div_mu=lambda x: dmu(np.asarray(x, dtype=float)[..., 0]),
        a_first_derivs=lambda x: np.zeros(np.shape(x)),
        a_second_trace=lambda x: np.zeros(np.shape(x)[:-1]),
        dim=1,
        linear_drift=linear_drift,
        constant_sigma=s,
    )


def _scalar_observation(noise_var):
    return ObservationModel(
        h=lambda x: np.asarray(x, dtype=float),
        noise_cov=np.array([[float(noise_var)]]),
        obs_dim=1,
        h_matrix=np.eye(1),
    )


def make_ou_problem(horizon=1.0, num_obs=10, noise_var=1.0, sigma=1.0,
                    prior_mean=0.0, prior_var=1.0):
    """Ornstein-Uhlenbeck state ``mu(x) = -x`` observed directly in Gaussian
    noise. The prior defaults to ``N(0, 1)``."""
    dyn = _scalar_dynamics(
        mu=lambda x: -np.asarray(x, dtype=float),
        dmu=lambda x: -np.ones_like(x),
        sigma_value=sigma,
        linear_drift=np.array([[-1.0]]),
    )
    return FilterProblem(
        dynamics=dyn,
        observation=_scalar_observation(noise_var),
        prior=GaussianPrior([prior_mean], [[prior_var]]),
        horizon=horizon,
        num_obs=num_obs,
        name="ou",
        params=dict(horizon=horizon, num_obs=num_obs, noise_var=noise_var, sigma=sigma,
                    prior_mean=prior_mean, prior_var=prior_var),
    )


def make_bistable_problem(horizon=1.0, num_obs=10, noise_var=1.0, sigma=1.0,
                          prior_mean=0.0, prior_var=1.0):
    """Double-well drift ``mu(x) = 0.4 (5x - x^3)``."""
    def mu(x):
        x = np.asarray(x, dtype=float)
        # products instead of ** keep the particle filter's inner loop cheap
        return 0.4 * x * (5.0 - x * x)

    dyn = _scalar_dynamics(
        mu=mu,
        dmu=lambda x: 2.0 - 1.2 * x * x,
        sigma_value=sigma,
    )
    return FilterProblem(
        dynamics=dyn,
        observation=_scalar_observation(noise_var),
        prior=GaussianPrior([prior_mean], [[prior_var]]),
        horizon=horizon,
        num_obs=num_obs,
        name="bistable",
        params=dict(horizon=horizon, num_obs=num_obs, noise_var=noise_var, sigma=sigma,
                    prior_mean=prior_mean, prior_var=prior_var),
    )


PROBLEMS = {"ou": make_ou_problem, "bistable": make_bistable_problem}


def make_problem(name, **overrides):
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise DomainError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**overrides)
