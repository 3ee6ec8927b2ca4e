import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bsdefilter import reference as rf
from bsdefilter.errors import DegenerateError, DomainError, MissingArtifactError, ShapeError
from bsdefilter.model import _scalar_dynamics, make_bistable_problem, make_ou_problem
from bsdefilter.sim import stream


def static_dynamics():
    return _scalar_dynamics(lambda x: np.zeros_like(np.asarray(x, dtype=float)),
                            lambda x: np.zeros_like(x), 0.0)


def collect_final(prob, obs, particles, seed, k):
    out = {}

    def grab(step, sl, pos):
        if step == k:
            out[sl.start] = pos.copy()

    rf.particle_filter(prob, obs, particles, seed, on_step=grab)
    return np.concatenate([out[s] for s in sorted(out)])


# -- Gaussian beliefs ------------------------------------------------------------

def test_belief_validation():
    with pytest.raises(ShapeError):
        rf.GaussianBelief([0.0], np.eye(2))
    with pytest.raises(DomainError):
        rf.GaussianBelief([0.0, 0.0], [[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(DomainError):
        rf.GaussianBelief([0.0], [[0.0]])


def test_belief_pdf_matches_scipy():
    b = rf.GaussianBelief([[0.5], [-1.0]], [[0.3]])
    x = np.linspace(-3, 3, 7)
    p = b.pdf(x)
    assert p.shape == (2, 7)
    np.testing.assert_allclose(p[1], stats.norm.pdf(x, -1.0, np.sqrt(0.3)), rtol=1e-13)
    b2 = rf.GaussianBelief([0.1, 0.2], [[1.0, 0.3], [0.3, 0.5]])
    pts = np.array([[0.0, 0.0], [1.0, -1.0]])
    ref = stats.multivariate_normal([0.1, 0.2], [[1.0, 0.3], [0.3, 0.5]]).pdf(pts)
    np.testing.assert_allclose(b2.pdf(pts), ref, rtol=1e-12)


# -- Kalman ----------------------------------------------------------------------

def test_predict_without_dynamics():
    b = rf.GaussianBelief([0.7], [[2.0]])
    out = rf.kalman_predict(b, [[0.0]], [[0.0]], 0.1)
    np.testing.assert_array_equal(out.mean, b.mean)
    np.testing.assert_array_equal(out.cov, b.cov)


def test_predict_stationary_ou():
    b = rf.GaussianBelief([0.0], [[0.5]])
    out = rf.kalman_predict(b, [[-1.0]], [[1.0]], 0.1)
    assert out.cov[0, 0] == pytest.approx(0.5, abs=1e-4)


def test_predict_ou_moments():
    b = rf.GaussianBelief([1.0], [[1.0]])
    euler = rf.kalman_predict(b, [[-1.0]], [[1.0]], 0.1)
    exact = rf.kalman_predict(b, [[-1.0]], [[1.0]], 0.1, exact=True)
    var = np.exp(-0.2) + 0.5 * (1 - np.exp(-0.2))
    assert exact.cov[0, 0] == pytest.approx(var, abs=1e-12)
    assert exact.mean[0] == pytest.approx(np.exp(-0.1), abs=1e-12)
    # O(delta) with delta = 0.1 / 128
    assert abs(euler.cov[0, 0] - var) <= 1e-3
    assert abs(euler.mean[0] - np.exp(-0.1)) <= 1e-3


def test_predict_two_dimensional_exact():
    A = np.array([[-1.0, 0.5], [0.0, -2.0]])
    s = np.array([[1.0, 0.0], [0.3, 0.8]])
    b = rf.GaussianBelief([1.0, -1.0], np.eye(2))
    exact = rf.kalman_predict(b, A, s, 0.5, exact=True)
    fine = rf.kalman_predict(b, A, s, 0.5, substeps=20000)
    np.testing.assert_allclose(fine.cov, exact.cov, atol=1e-4)
    np.testing.assert_allclose(fine.mean, exact.mean, atol=1e-4)


def test_update_conjugate_examples():
    prior = rf.GaussianBelief([0.0], [[1.0]])
    post = rf.kalman_update(prior, [[1.0]], [[1.0]], [0.0])
    assert abs(post.mean[0]) <= 1e-12 and abs(post.cov[0, 0] - 0.5) <= 1e-12
    post = rf.kalman_update(prior, [[1.0]], [[1.0]], [2.0])
    assert abs(post.mean[0] - 1.0) <= 1e-12 and abs(post.cov[0, 0] - 0.5) <= 1e-12
    vague = rf.kalman_update(prior, [[1.0]], [[1e12]], [3.0])
    assert vague.mean[0] == pytest.approx(0.0, abs=1e-11)
    assert vague.cov[0, 0] == pytest.approx(1.0, abs=1e-11)


@settings(max_examples=50)
@given(st.floats(-3, 3), st.floats(0.1, 4), st.floats(0.1, 4), st.floats(-5, 5))
def test_update_matches_conjugate_formula(m, p, r, o):
    post = rf.kalman_update(rf.GaussianBelief([m], [[p]]), [[1.0]], [[r]], [o])
    var = p * r / (p + r)
    assert post.cov[0, 0] == pytest.approx(var, rel=1e-12)
    assert post.mean[0] == pytest.approx(var * (m / p + o / r), rel=1e-10, abs=1e-12)


def test_update_singular_innovation():
    b = rf.GaussianBelief([0.0, 0.0], np.eye(2))
    with pytest.raises(DomainError):
        rf.kalman_update(b, np.zeros((1, 2)), [[0.0]], [0.0])


def test_kalman_filter_batched_and_requires_linear():
    prob = make_ou_problem(num_obs=3)
    obs = stream(1, 0).standard_normal((4, 3, 1))
    beliefs = rf.kalman_filter(prob, obs)
    assert len(beliefs) == 3 and beliefs[0].mean.shape == (4, 1)
    one = rf.kalman_filter(prob, obs[2:3])
    np.testing.assert_allclose(one[2].mean[0], beliefs[2].mean[2], rtol=1e-14)
    with pytest.raises(MissingArtifactError):
        rf.KalmanReference(make_bistable_problem())
    dens = rf.KalmanReference(prob).densities(obs, np.linspace(-5, 5, 11))
    assert dens.shape == (4, 3, 11)


# -- particles -------------------------------------------------------------------

def test_ensemble_validation():
    with pytest.raises(ShapeError):
        rf.ParticleEnsemble(np.zeros(3), np.ones(3) / 3)
    with pytest.raises(ShapeError):
        rf.ParticleEnsemble(np.zeros((3, 1)), np.ones(2) / 2)
    with pytest.raises(DomainError):
        rf.ParticleEnsemble(np.zeros((2, 1)), np.array([0.7, 0.7]))
    e = rf.ParticleEnsemble.uniform(np.arange(4.0)[:, None])
    assert abs(e.weights.sum() - 1) <= 1e-12 and e.mean()[0] == 1.5


def test_systematic_resample_counts():
    w = np.array([0.1, 0.0, 0.6, 0.3])
    idx = rf.systematic_resample(w, 0.5)
    # systematic resampling gives floor or ceil of P w_i copies
    counts = np.bincount(idx, minlength=4)
    assert np.all(np.abs(counts - 4 * w) < 1)
    assert counts[1] == 0
    batched = rf.systematic_resample(np.stack([w, w[::-1]]), np.array([0.5, 0.5]))
    np.testing.assert_array_equal(batched[0], idx)
    assert np.all(np.bincount(batched[1], minlength=4) == counts[::-1])


def test_resampling_preserves_expectation():
    rng = stream(3, 0)
    x = rng.standard_normal(10**5)
    w = np.exp(-0.5 * (x - 1.0) ** 2)
    w /= w.sum()
    before = w @ x
    after = x[rf.systematic_resample(w, rng.uniform())].mean()
    se = np.sqrt(w @ (x - before) ** 2 / x.size)
    assert abs(after - before) <= 3 * se


def test_pf_step_unit_likelihood_is_propagation():
    prob = make_ou_problem()
    ens = rf.ParticleEnsemble.uniform(stream(0, 1).standard_normal((500, 1)))
    out = rf.pf_step(ens, prob.dynamics, 0.1, 16, lambda o, x: np.ones(x.shape[0]), np.zeros(1),
                     stream(0, 2))
    np.testing.assert_array_equal(out.weights, 1 / 500)
    # the same increments without resampling
    rng = stream(0, 2)
    inc = np.sqrt(0.1 / 16) * rng.standard_normal((500, 16, 1))
    moved = rf.euler_maruyama_terminal(prob.dynamics, ens.positions, inc, 0.1 / 16)
    assert np.allclose(np.sort(out.positions[:, 0]), np.sort(moved[:, 0]))


def test_pf_step_static_concentrates():
    prob = make_ou_problem()
    dyn = static_dynamics()
    ens = rf.ParticleEnsemble.uniform(np.linspace(-3, 3, 61)[:, None])
    out = rf.pf_step(ens, dyn, 0.1, 4, prob.likelihood, np.array([2.0]), stream(0, 3))
    assert set(out.positions[:, 0]).issubset(set(ens.positions[:, 0]))
    assert abs(out.mean()[0] - 2.0) < abs(ens.mean()[0] - 2.0)
    assert np.mean(np.abs(out.positions[:, 0] - 2.0) < 1.0) > 0.5


def test_pf_step_degenerate():
    ens = rf.ParticleEnsemble.uniform(np.zeros((3, 1)))
    with pytest.raises(DegenerateError):
        rf.pf_step(ens, static_dynamics(), 0.1, 1, lambda o, x: np.zeros(3), np.zeros(1), stream(0, 0))
    with pytest.raises(DegenerateError):
        rf._log_weights_to_normalized(np.full((2, 3), -np.inf))


def test_pf_posterior_moments_match_kalman():
    prob = make_ou_problem()
    obs = np.array([[[0.8]] * 10])
    P = 10**5
    pos = collect_final(prob, obs, P, seed=4, k=1)[0, :, 0]
    b = rf.kalman_filter(prob, obs)[0]
    var = b.cov[0, 0]
    assert abs(pos.mean() - b.mean[0, 0]) <= 3 * np.sqrt(var / P)
    assert abs(pos.var() - var) <= 3 * var * np.sqrt(2.0 / P)


def test_particle_filter_deterministic_and_blocked():
    prob = make_ou_problem(num_obs=2)
    obs = stream(5, 0).standard_normal((rf.PF_BLOCK + 3, 2, 1))
    a = collect_final(prob, obs, 50, seed=1, k=2)
    b = collect_final(prob, obs, 50, seed=1, k=2)
    assert a.shape == (rf.PF_BLOCK + 3, 50, 1)
    np.testing.assert_array_equal(a, b)


# -- KDE -------------------------------------------------------------------------

def test_silverman_rule():
    s = stream(0, 9).standard_normal(1000)
    sd = s.std(ddof=1)
    iqr = np.subtract(*np.percentile(s, [75, 25]))
    assert rf.silverman_bandwidth(s) == pytest.approx(0.9 * min(sd, iqr / 1.34) * 1000 ** -0.2)
    assert rf.silverman_bandwidth(np.zeros(10)) == rf.BANDWIDTH_FLOOR
    # ties collapse the IQR but not the sd
    tied = np.array([0.0] * 8 + [1.0, -1.0])
    assert rf.silverman_bandwidth(tied) == pytest.approx(0.9 * tied.std(ddof=1) * 10 ** -0.2)


def test_kde_tight_cluster_peaks_at_center():
    ens = rf.ParticleEnsemble.uniform(1e-3 * stream(0, 8).standard_normal((200, 1)))
    x = np.linspace(-1, 1, 201)
    p = rf.kde_density(ens, x)
    assert x[np.argmax(p)] == pytest.approx(0.0, abs=0.01)


def test_kde_consistency_and_mass():
    ens = rf.ParticleEnsemble.uniform(stream(0, 7).standard_normal((10**5, 1)))
    x = np.linspace(-5, 5, 1000)
    p = rf.kde_density(ens, x)
    assert np.max(np.abs(p - stats.norm.pdf(x))) <= 0.01
    assert abs(np.sum(p) * (x[1] - x[0]) - 1.0) <= 1e-3


def test_kde_requires_two_particles():
    with pytest.raises(DomainError):
        rf.KdeDensity.from_ensemble(rf.ParticleEnsemble.uniform(np.zeros((1, 1))))


def test_binned_kde_matches_exact():
    s = stream(0, 6).standard_normal((3, 5000)) * np.array([[0.5], [1.0], [2.0]]) + 1.0
    h = rf.silverman_bandwidth(s)
    x = np.linspace(-5, 5, 1000)
    binned = rf.binned_kde(s, h, -5.0, x[1] - x[0], 1000)
    for i in range(3):
        assert np.max(np.abs(binned[i] - rf.kde_eval(s[i], h[i], x))) <= 1e-5


def test_particle_reference_grid_and_scattered_agree():
    prob = make_ou_problem(num_obs=2)
    obs = stream(2, 0).standard_normal((2, 2, 1))
    ref = rf.ParticleReference(prob, particles=2000, seed=3)
    x = np.linspace(-5, 5, 1000)
    a = ref.densities(obs, x)
    assert np.all(a >= 0)
    b = ref.densities(obs, x[::-1].copy())[..., ::-1]
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_pf_and_kalman_agree_on_ou():
    prob = make_ou_problem()
    obs = stream(8, 0).standard_normal((3, 10, 1)) * 1.2
    x = np.linspace(-5, 5, 1000)
    pf = rf.ParticleReference(prob, particles=10**5, seed=0).densities(obs, x)
    kf = rf.KalmanReference(prob).densities(obs, x)
    assert np.max(np.abs(pf - kf), axis=(0, 2)).max() <= 0.05


def test_make_reference_and_csv(tmp_path):
    assert isinstance(rf.make_reference(make_ou_problem()), rf.KalmanReference)
    assert isinstance(rf.make_reference(make_bistable_problem()), rf.ParticleReference)
    assert isinstance(rf.make_reference(make_ou_problem(), "particle"), rf.ParticleReference)
    with pytest.raises(DomainError):
        rf.make_reference(make_ou_problem(), "grid")
    path = tmp_path / "d.csv"
    rf.write_density_csv(path, np.array([0.0, 1.0]), np.ones((1, 2, 2)))
    lines = path.read_text().splitlines()
    assert lines[0] == "k,x,density" and len(lines) == 5
