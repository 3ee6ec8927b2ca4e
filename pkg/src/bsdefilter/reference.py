"""Reference filters: a Kalman filter for linear problems and a bootstrap
particle filter with Gaussian kernel density estimation for the rest.

Both give normalized filtering densities at the observation times and are
vectorized over many observation sequences at once.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, DomainError, MissingArtifactError, ShapeError
from .sim import diffusion_term, euler_maruyama_terminal, stream

BANDWIDTH_FLOOR = 1e-6
SUBSTEPS = 128
# sequences per particle-filter block; each block has its own random stream
PF_BLOCK = 25
_PF = 20


# -- Kalman -----------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianBelief:
    """Gaussian belief ``N(mean, cov)``. ``mean`` may carry leading batch axes
    ``(..., d)`` that share one covariance ``(d, d)``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = mean.shape[-1]
        if cov.shape != (d, d):
            raise ShapeError(f"covariance must be {d}x{d}")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
            raise DomainError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0.0:
            raise DomainError("covariance is not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.shape[-1]

    def pdf(self, x):
        """Density at points ``x`` ``(I, d)``; returns ``(..., I)``."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        resid = x - self.mean[..., None, :]
        q = np.einsum("...i,ij,...j->...", resid, np.linalg.inv(self.cov), resid)
        logdet = np.linalg.slogdet(self.cov)[1]
        return np.exp(-0.5 * q - 0.5 * (self.dim * np.log(2 * np.pi) + logdet))


def _linear_coefficients(dyn):
    if dyn.linear_drift is None or dyn.constant_sigma is None:
        raise MissingArtifactError("Kalman reference needs linear drift and constant sigma")
    return np.asarray(dyn.linear_drift, dtype=float), np.asarray(dyn.constant_sigma, dtype=float)


def kalman_predict(belief, A, sigma, dt, substeps=SUBSTEPS, exact=False):
    """Propagate a belief through ``dS = A S dt + sigma dB`` over ``dt``.

    The default is the Euler moment recursion with ``substeps`` steps. With
    ``exact=True`` the matrix exponential solution is used instead.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    s = np.atleast_2d(np.asarray(sigma, dtype=float))
    q = s @ s.T
    if exact:
        from scipy.linalg import expm

        d = A.shape[0]
        phi = expm(A * dt)
        # Van Loan: the process noise integral from one block exponential
        block = np.zeros((2 * d, 2 * d))
        block[:d, :d] = -A
        block[:d, d:] = q
        block[d:, d:] = A.T
        e = expm(block * dt)
        qd = e[d:, d:].T @ e[:d, d:]
        mean = belief.mean @ phi.T
        cov = phi @ belief.cov @ phi.T + qd
    else:
        delta = dt / substeps
        mean, cov = belief.mean, belief.cov
        for _ in range(substeps):
            mean = mean + (mean @ A.T) * delta
            cov = cov + (A @ cov + cov @ A.T + q) * delta
            cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov).min() <= 0.0:
        raise DomainError("predicted covariance lost positive definiteness")
    return GaussianBelief(mean, cov)


def kalman_update(belief, H, R, o):
    """Condition on ``o = H S + V`` with ``V ~ N(0, R)``."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    o = np.asarray(o, dtype=float)
    P = belief.cov
    S = H @ P @ H.T + R
    if np.linalg.eigvalsh(0.5 * (S + S.T)).min() <= 0.0:
        raise DomainError("innovation covariance is singular")
    gain = np.linalg.solve(S, H @ P).T  # P H^T S^-1
    innov = o - belief.mean @ H.T
    mean = belief.mean + innov @ gain.T
    cov = P - gain @ H @ P
    cov = 0.5 * (cov + cov.T)
    return GaussianBelief(mean, cov)


def kalman_filter(prob, obs, substeps=SUBSTEPS, exact=False):
    """Posterior beliefs at ``t_1..t_K`` for observation sequences ``obs``
    ``(M, K, d')``; returns a list of :class:`GaussianBelief` with batched means."""
    A, s = _linear_coefficients(prob.dynamics)
    obs = np.asarray(obs, dtype=float)
    H = prob.observation.h_matrix
    if H is None:
        raise MissingArtifactError("Kalman reference needs a linear observation matrix")
    dt = prob.horizon / prob.num_obs
    m = obs.shape[0]
    belief = GaussianBelief(np.broadcast_to(prob.prior.mean, (m, prob.dim)), prob.prior.cov)
    out = []
    for k in range(obs.shape[1]):
        belief = kalman_predict(belief, A, s, dt, substeps, exact)
        belief = kalman_update(belief, H, prob.observation.noise_cov, obs[:, k])
        out.append(belief)
    return out


# -- particle filter ----------------------------------------------------------------

@dataclass
class ParticleEnsemble:
    positions: np.ndarray  # (P, d)
    weights: np.ndarray    # (P,)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[0] < 1:
            raise ShapeError("positions must have shape (P, d) with P >= 1")
        if self.weights.shape != self.positions.shape[:1]:
            raise ShapeError("one weight per particle")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainError("weights must be nonnegative and sum to 1")

    @property
    def size(self):
        return self.positions.shape[0]

    @classmethod
    def uniform(cls, positions):
        positions = np.asarray(positions, dtype=float)
        return cls(positions, np.full(positions.shape[0], 1.0 / positions.shape[0]))

    def mean(self):
        return self.weights @ self.positions


def systematic_resample(weights, u):
    """Systematic resampling indices for rows of normalized ``weights``
    ``(..., P)`` with one uniform offset ``u`` per row."""
    w = np.asarray(weights, dtype=float)
    lead, p = w.shape[:-1], w.shape[-1]
    w2 = w.reshape(-1, p)
    rows = w2.shape[0]
    cum = np.cumsum(w2, axis=1)
    cum /= cum[:, -1:]
    cum[:, -1] = 1.0
    offs = np.arange(rows)[:, None]
    pos = (np.asarray(u, dtype=float).reshape(rows, 1) + np.arange(p)) / p
    idx = np.searchsorted((cum + offs).ravel(), (pos + offs).ravel(), side="right")
    idx = np.minimum(idx.reshape(rows, p) - offs * p, p - 1)
    return idx.reshape(lead + (p,))


def _log_weights_to_normalized(logw):
    if np.any(np.all(~np.isfinite(logw) | (logw == -np.inf), axis=-1)):
        raise DegenerateError("all particle weights are zero")
    top = np.max(logw, axis=-1, keepdims=True)
    w = np.exp(logw - top)
    return w / w.sum(axis=-1, keepdims=True)


def pf_step(ens, dyn, dt, substeps, likelihood, o, rng):
    """One bootstrap step: Euler-Maruyama propagation over ``dt`` in
    ``substeps`` steps, weighting by ``likelihood(o, x)`` and systematic
    resampling back to uniform weights."""
    x = ens.positions
    delta = dt / substeps
    inc = np.sqrt(delta) * rng.standard_normal((x.shape[0], substeps, x.shape[1]))
    x = euler_maruyama_terminal(dyn, x, inc, delta)
    w = np.asarray(likelihood(o, x), dtype=float) * ens.weights
    if not np.any(w > 0):
        raise DegenerateError("all particle weights are zero")
    w = w / w.sum()
    idx = systematic_resample(w, rng.uniform())
    return ParticleEnsemble.uniform(x[idx])


def silverman_bandwidth(samples, floor=BANDWIDTH_FLOOR):
    """``0.9 min(sd, IQR / 1.34) P^(-1/5)`` along the last axis (d = 1)."""
    s = np.asarray(samples, dtype=float)
    p = s.shape[-1]
    sd = np.std(s, axis=-1, ddof=1) if p > 1 else np.zeros(s.shape[:-1])
    q75, q25 = np.percentile(s, [75, 25], axis=-1)
    spread = np.minimum(sd, (q75 - q25) / 1.34)
    # the IQR collapses for heavily tied samples; fall back to sd then
    spread = np.where(spread > 0, spread, sd)
    return np.maximum(0.9 * spread * p ** (-0.2), floor)


@dataclass(frozen=True)
class KdeDensity:
    centers: np.ndarray  # (P, d)
    bandwidth: float

    @classmethod
    def from_ensemble(cls, ens):
        if ens.size < 2:
            raise DomainError("KDE needs at least two particles")
        if ens.positions.shape[1] != 1:
            raise DomainError("KDE bandwidth rule is implemented for d = 1")
        return cls(ens.positions, float(silverman_bandwidth(ens.positions[:, 0])))

    def __call__(self, x):
        return kde_eval(self.centers[:, 0], self.bandwidth, np.asarray(x, dtype=float).reshape(-1))


def kde_eval(centers, bandwidth, x, chunk=2048):
    """Exact equal-weight Gaussian KDE at points ``x`` (d = 1)."""
    c = np.asarray(centers, dtype=float)
    out = np.empty(x.shape[0])
    norm = 1.0 / (c.shape[0] * bandwidth * np.sqrt(2 * np.pi))
    for s in range(0, x.shape[0], chunk):
        z = (x[s : s + chunk, None] - c[None]) / bandwidth
        out[s : s + chunk] = np.exp(-0.5 * z * z).sum(axis=1) * norm
    return out


def kde_density(ens, x):
    """Gaussian KDE of an ensemble (equal weights, Silverman bandwidth)."""
    return KdeDensity.from_ensemble(ens)(x)


def binned_kde(samples, bandwidth, lo, dz, count, refine=4):
    """Gaussian KDE of each row of ``samples`` ``(M, P)`` on the equidistant
    points ``lo + i dz``, ``i < count``.

    Samples are linearly binned on a grid ``refine`` times finer than ``dz``
    and convolved with the kernel by FFT. Samples farther than eight
    bandwidths from the evaluation range are dropped; their contribution is
    below ``exp(-32)`` of the kernel peak.
    """
    s = np.asarray(samples, dtype=float)
    m, p = s.shape
    h = np.asarray(bandwidth, dtype=float).reshape(m)
    delta = dz / refine
    pad = int(np.ceil(8.0 * h.max() / delta)) + 1
    nb = (count - 1) * refine + 1 + 2 * pad
    base = lo - pad * delta
    pos = (s - base) / delta
    left = np.floor(pos).astype(np.int64)
    frac = pos - left
    keep = (left >= 0) & (left < nb - 1)
    rows = np.broadcast_to(np.arange(m)[:, None], s.shape)
    flat = rows * nb
    bins = np.zeros(m * nb)
    bins += np.bincount((flat + left)[keep], weights=(1.0 - frac)[keep], minlength=m * nb)
    bins += np.bincount((flat + left + 1)[keep], weights=frac[keep], minlength=m * nb)
    bins = bins.reshape(m, nb)
    # circular convolution with zero padding wide enough to avoid wrap-around
    length = 1 << int(np.ceil(np.log2(nb + 2 * pad)))
    offs = np.arange(length)
    offs = np.where(offs < length // 2, offs, offs - length) * delta
    kern = np.exp(-0.5 * (offs[None] / h[:, None]) ** 2) / (p * h[:, None] * np.sqrt(2 * np.pi))
    dens = np.fft.irfft(np.fft.rfft(bins, length, axis=1) * np.fft.rfft(kern, axis=1), length, axis=1)
    # FFT round-off leaves values of order 1e-17 around zero
    return np.maximum(dens[:, pad : pad + (count - 1) * refine + 1 : refine], 0.0)


def particle_filter(prob, obs, particles, seed, substeps=SUBSTEPS, on_step=None):
    """Run independent bootstrap filters for each sequence in ``obs``
    ``(M, K, d')``. ``on_step(k, block_slice, positions)`` is called with the
    resampled particles ``(B, P, d)`` of every block after observation ``k``
    (1-based). Returns nothing; consumers collect what they need."""
    obs = np.asarray(obs, dtype=float)
    m, K = obs.shape[:2]
    d = prob.dim
    dt = prob.horizon / prob.num_obs
    delta = dt / substeps
    dyn = prob.dynamics
    for b0 in range(0, m, PF_BLOCK):
        sl = slice(b0, min(b0 + PF_BLOCK, m))
        nb = sl.stop - sl.start
        rng = stream(seed, _PF, b0 // PF_BLOCK)
        x = prob.prior.sample(rng, nb * particles).reshape(nb, particles, d)
        for k in range(K):
            for _ in range(substeps):
                dw = np.sqrt(delta) * rng.standard_normal(x.shape)
                x = x + dyn.mu(x) * delta + diffusion_term(dyn, x, dw)
            if not np.all(np.isfinite(x)):
                raise DegenerateError(f"particle filter diverged before observation {k + 1}")
            logw = prob.observation.log_likelihood(obs[sl, k][:, None, :], x)
            w = _log_weights_to_normalized(logw)
            idx = systematic_resample(w, rng.uniform(size=nb))
            x = np.take_along_axis(x, idx[..., None], axis=1)
            if on_step is not None:
                on_step(k + 1, sl, x)


def _equispaced(x):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size < 2:
        return None
    dz = (x[-1] - x[0]) / (x.size - 1)
    if dz > 0 and np.allclose(np.diff(x), dz, rtol=1e-9, atol=1e-12):
        return x[0], dz
    return None


# -- providers ------------------------------------------------------------------

class KalmanReference:
    """Exact Gaussian filtering densities for linear problems."""

    name = "kalman"

    def __init__(self, prob, substeps=SUBSTEPS, exact=False):
        _linear_coefficients(prob.dynamics)
        self.prob = prob
        self.substeps = substeps
        self.exact = exact

    def densities(self, obs, x):
        """Filtering densities ``(M, K, I)`` at points ``x`` ``(I,)``."""
        beliefs = kalman_filter(self.prob, obs, self.substeps, self.exact)
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        return np.stack([b.pdf(x) for b in beliefs], axis=1)


class ParticleReference:
    """Bootstrap particle filter densities via Gaussian KDE (d = 1)."""

    name = "particle"

    def __init__(self, prob, particles=10**4, seed=0, substeps=SUBSTEPS):
        if prob.dim != 1:
            raise DomainError("particle reference densities are implemented for d = 1")
        if particles < 2:
            raise DomainError("need at least two particles")
        self.prob = prob
        self.particles = particles
        self.seed = seed
        self.substeps = substeps

    def densities(self, obs, x):
        obs = np.asarray(obs, dtype=float)
        x = np.asarray(x, dtype=float).reshape(-1)
        m, K = obs.shape[:2]
        out = np.empty((m, K, x.size))
        grid = _equispaced(x)

        def collect(k, sl, pos):
            s = pos[..., 0]
            h = silverman_bandwidth(s)
            if grid is not None:
                out[sl, k - 1] = binned_kde(s, h, grid[0], grid[1], x.size)
            else:
                for i, row in enumerate(s):
                    out[sl.start + i, k - 1] = kde_eval(row, h[i], x)

        particle_filter(self.prob, obs, self.particles, self.seed, self.substeps, collect)
        return out


def make_reference(prob, kind=None, particles=10**4, seed=0, substeps=SUBSTEPS):
    """Kalman for linear problems, the particle filter otherwise."""
    if kind is None:
        kind = "kalman" if prob.dynamics.linear_drift is not None else "particle"
    if kind == "kalman":
        return KalmanReference(prob, substeps)
    if kind == "particle":
        return ParticleReference(prob, particles, seed, substeps)
    raise DomainError(f"unknown reference kind {kind!r}")


def write_density_csv(path, x, densities, seq=0):
    """Write densities ``(M, K, I)`` of sequence ``seq`` as rows ``k, x, density``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "x", "density"])
        for k in range(densities.shape[1]):
            for xi, p in zip(x, densities[seq, k]):
                w.writerow([k + 1, repr(float(xi)), repr(float(p))])
