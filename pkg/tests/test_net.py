import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsdefilter.errors import DecodeError, DomainError, ShapeError
from bsdefilter.net import (
    EXP_CLAMP,
    AdamState,
    MlpParams,
    MlpSpec,
    adam_step,
    backward,
    deserialize,
    forward,
    init_params,
    serialize,
    stack_params,
)


def zero_params(spec):
    p = init_params(spec, np.random.default_rng(0))
    for a in p.arrays():
        a[...] = 0.0
    return p


def fd_check(params, x, cot, h=1e-6):
    """Max relative error of ``backward`` against central differences of
    ``sum(cot * forward)`` over every parameter."""
    out, cache = forward(params, x, return_cache=True)
    grads, _ = backward(params, cache, cot)
    worst = 0.0
    for a, g in zip(params.arrays(), grads):
        fd = np.empty_like(a)
        flat, fflat = a.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = np.sum(cot * forward(params, x))
            flat[i] = old - h
            dn = np.sum(cot * forward(params, x))
            flat[i] = old
            fflat[i] = (up - dn) / (2 * h)
        # the floor keeps vanishing components from dominating
        scale = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-4 * np.max(np.abs(g)) + 1e-12)
        worst = max(worst, float(np.max(np.abs(g - fd) / scale)))
    return worst


# -- specs -----------------------------------------------------------------------

def test_table_architectures():
    w = MlpSpec.w_network(10)
    v = MlpSpec.v_network(10, 1)
    assert (w.hidden_dim, w.output_dim, w.output_activation) == (128, 1, "exponential")
    assert (v.hidden_dim, v.output_dim, v.output_activation) == (32, 1, "none")
    assert w.layer_dims == [(10, 128), (128, 128), (128, 128), (128, 1)]


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec(1, 4, 1, output_activation="tanh")
    with pytest.raises(ValueError):
        MlpSpec(0, 4, 1)


def test_init_shapes_and_head():
    spec = MlpSpec.w_network(3, hidden_dim=16)
    p = init_params(spec, np.random.default_rng(1))
    assert [a.shape for a in p.arrays()] == [
        (3, 16), (16,), (16, 16), (16,), (16, 16), (16,), (16, 1), (1,)
    ]
    assert all(np.all(np.isfinite(a)) for a in p.arrays())
    assert not np.any(p.biases[0])
    out = forward(p, np.random.default_rng(2).standard_normal((50, 3)))
    np.testing.assert_allclose(out, 0.4, rtol=0.2)


# -- forward ---------------------------------------------------------------------

def test_zero_params_outputs():
    x = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_array_equal(forward(zero_params(MlpSpec(4, 8, 2)), x), 0.0)
    np.testing.assert_array_equal(forward(zero_params(MlpSpec(4, 8, 1, output_activation="exponential")), x), 1.0)


def test_dead_relu_leaves_bias_path():
    # one hidden unit with pre-activation -1 contributes nothing
    spec = MlpSpec(1, 1, 1, num_hidden_layers=1)
    p = MlpParams(spec, [np.array([[1.0]]), np.array([[5.0]])], [np.array([-3.0]), np.array([0.7])])
    assert forward(p, np.array([2.0]))[0] == pytest.approx(0.7)
    # pre-activation +1 passes through
    assert forward(p, np.array([4.0]))[0] == pytest.approx(5.7)


def test_single_sample_matches_batch():
    spec = MlpSpec(3, 8, 2)
    p = init_params(spec, np.random.default_rng(4))
    x = np.random.default_rng(5).standard_normal((6, 3))
    batch = forward(p, x)
    for i in range(6):
        np.testing.assert_allclose(forward(p, x[i]), batch[i], rtol=1e-13)


def test_forward_shape_errors():
    p = init_params(MlpSpec(3, 4, 1), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        forward(p, np.zeros((2, 4)))
    s = stack_params([p, p])
    with pytest.raises(ShapeError):
        forward(s, np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        forward(s, np.zeros((3, 2, 3)))


def test_exponential_clamp():
    spec = MlpSpec(1, 1, 1, num_hidden_layers=1, output_activation="exponential")
    p = MlpParams(spec, [np.array([[1.0]]), np.array([[1.0]])], [np.array([0.0]), np.array([0.0])])
    assert forward(p, np.array([1e4]))[0] == pytest.approx(np.exp(EXP_CLAMP))
    assert np.isfinite(forward(p, np.array([1e300]))[0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=3, max_size=3), st.integers(0, 10**6))
def test_w_output_positive(x, seed):
    p = init_params(MlpSpec.w_network(3, hidden_dim=8), np.random.default_rng(seed), output_scale=5.0)
    assert forward(p, np.array(x))[0] > 0


def test_stacked_members_match():
    spec = MlpSpec(2, 6, 1)
    rng = np.random.default_rng(8)
    members = [init_params(spec, rng) for _ in range(3)]
    s = stack_params(members)
    x = rng.standard_normal((3, 4, 2))
    out = forward(s, x)
    for i, m in enumerate(members):
        np.testing.assert_allclose(out[i], forward(m, x[i]), rtol=1e-13)
        assert s.member(i).equal(m)
    with pytest.raises(ShapeError):
        stack_params([members[0], init_params(MlpSpec(2, 5, 1), rng)])
    with pytest.raises(ShapeError):
        members[0].member(0)


# -- backward --------------------------------------------------------------------

def test_linear_network_gradient_is_weight_product():
    spec = MlpSpec(2, 3, 1)
    rng = np.random.default_rng(3)
    p = init_params(spec, rng)
    for w in p.weights:
        w[...] = np.abs(w)
    for b in p.biases:
        b[...] = 1.0
    x = np.array([0.3, 0.8])
    out, cache = forward(p, x, return_cache=True)
    _, gx = backward(p, cache, np.ones(1))
    prod = p.weights[0] @ p.weights[1] @ p.weights[2] @ p.weights[3]
    np.testing.assert_allclose(gx, prod[:, 0], rtol=1e-13)


def test_zero_cotangent_zero_gradients():
    p = init_params(MlpSpec.w_network(4, hidden_dim=8), np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((5, 4))
    out, cache = forward(p, x, return_cache=True)
    grads, gx = backward(p, cache, np.zeros_like(out))
    assert all(not np.any(g) for g in grads)
    assert not np.any(gx)


def test_cotangent_shape_checked():
    p = init_params(MlpSpec(2, 4, 1), np.random.default_rng(0))
    _, cache = forward(p, np.zeros((3, 2)), return_cache=True)
    with pytest.raises(ShapeError):
        backward(p, cache, np.zeros((3, 2)))


@pytest.mark.parametrize("kind", ["w", "v"])
def test_gradients_match_finite_differences_table_sizes(kind):
    # K = 10, d = d' = 1 gives the input width used in the experiments
    rng = np.random.default_rng(10)
    spec = MlpSpec.w_network(10) if kind == "w" else MlpSpec.v_network(10, 1)
    p = init_params(spec, rng, output_scale=1.0)
    x = rng.standard_normal((3, 10))
    cot = rng.standard_normal((3, 1))
    assert fd_check(p, x, cot) <= 1e-4


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3), st.sampled_from(["none", "exponential"]))
def test_gradients_match_finite_differences_random(seed, out_dim, act):
    rng = np.random.default_rng(seed)
    spec = MlpSpec(3, 5, out_dim, output_activation=act)
    p = init_params(spec, rng, output_scale=1.0)
    # nonzero biases keep dead units off the ReLU kink
    for b in p.biases:
        b += 0.1 * rng.standard_normal(b.shape)
    x = rng.standard_normal((4, 3))
    cot = rng.standard_normal((4, out_dim))
    assert fd_check(p, x, cot) <= 1e-4


def test_stacked_backward_matches_members():
    spec = MlpSpec(2, 4, 1)
    rng = np.random.default_rng(6)
    members = [init_params(spec, rng) for _ in range(2)]
    s = stack_params(members)
    x = rng.standard_normal((2, 5, 2))
    cot = rng.standard_normal((2, 5, 1))
    _, cache = forward(s, x, return_cache=True)
    grads, gx = backward(s, cache, cot)
    for i, m in enumerate(members):
        _, c = forward(m, x[i], return_cache=True)
        gi, gxi = backward(m, c, cot[i])
        for a, b in zip(grads, gi):
            np.testing.assert_allclose(a[i], b, rtol=1e-12)
        np.testing.assert_allclose(gx[i], gxi, rtol=1e-12)


def test_forward_backward_deterministic():
    p = init_params(MlpSpec.w_network(3, hidden_dim=8), np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((4, 3))
    a = backward(p, forward(p, x, return_cache=True)[1], np.ones((4, 1)))[0]
    b = backward(p, forward(p, x, return_cache=True)[1], np.ones((4, 1)))[0]
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


# -- Adam ------------------------------------------------------------------------

def test_adam_zero_gradient():
    a = [np.array([1.0, -2.0])]
    st_ = AdamState.create(a, lr=0.1)
    adam_step(a, [np.zeros(2)], st_)
    np.testing.assert_array_equal(a[0], [1.0, -2.0])
    assert st_.step == 1


def test_adam_first_step():
    g = np.array([3.0, -0.5, 1e-3])
    a = [np.zeros(3)]
    s = AdamState.create(a, lr=1e-3)
    adam_step(a, [g], s)
    expect = -1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(a[0], expect, rtol=1e-12)
    np.testing.assert_allclose(a[0], -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_bounded_steps_constant_gradient():
    a = [np.zeros(1)]
    s = AdamState.create(a, lr=1e-3)
    prev = 0.0
    for i in range(10**4):
        adam_step(a, [np.array([2.5])], s)
        step = abs(a[0][0] - prev)
        prev = a[0][0]
        assert 0.9e-3 <= step <= 1.0e-3 + 1e-15
    assert s.step == 10**4


def test_adam_rejects_bad_gradients():
    a = [np.zeros(2)]
    s = AdamState.create(a)
    with pytest.raises(DomainError):
        adam_step(a, [np.array([1.0, np.nan])], s)
    with pytest.raises(ShapeError):
        adam_step(a, [np.zeros(3)], s)
    with pytest.raises(ShapeError):
        adam_step(a, [np.zeros(2), np.zeros(2)], s)
    assert s.step == 0
    np.testing.assert_array_equal(a[0], 0.0)


def test_adam_moment_shapes():
    p = init_params(MlpSpec(2, 3, 1), np.random.default_rng(0), stack=2)
    s = AdamState.create(p.arrays())
    assert [m.shape for m in s.m] == [a.shape for a in p.arrays()]
    assert [v.shape for v in s.v] == [a.shape for a in p.arrays()]


# -- serialization ---------------------------------------------------------------

@pytest.mark.parametrize("stack", [0, 3])
def test_serialize_roundtrip(stack):
    p = init_params(MlpSpec.w_network(4, hidden_dim=6), np.random.default_rng(1), stack=stack)
    q = deserialize(serialize(p))
    assert q.equal(p)
    assert q.spec == p.spec


def test_deserialize_errors():
    data = serialize(init_params(MlpSpec(2, 3, 1), np.random.default_rng(0)))
    for bad in (b"", data[:20], data[:-1], b"XXXXXXXX" + data[8:]):
        with pytest.raises(DecodeError):
            deserialize(bad)
    wrong_version = bytearray(data)
    wrong_version[8] = 7
    with pytest.raises(DecodeError):
        deserialize(bytes(wrong_version))
