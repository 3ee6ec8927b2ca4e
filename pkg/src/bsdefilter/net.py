"""Dense ReLU networks with hand-written reverse mode, Adam, and a binary
parameter format.

A parameter set may be *stacked*: every array then carries a leading axis of
length ``stack`` and ``forward`` evaluates all members at once on inputs of
shape ``(stack, B, input_dim)``. The ``N`` gradient networks of one
observation step are stored this way.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, DomainError, ShapeError

EXP_CLAMP = 60.0
ACTIVATIONS = ("none", "exponential")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dim: int
    output_dim: int
    num_hidden_layers: int = 3
    output_activation: str = "none"

    def __post_init__(self):
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {ACTIVATIONS}")
        if min(self.input_dim, self.hidden_dim, self.output_dim, self.num_hidden_layers) < 1:
            raise ValueError("all MlpSpec sizes must be positive")

    @property
    def layer_dims(self):
        h = [self.hidden_dim] * self.num_hidden_layers
        return list(zip([self.input_dim] + h, h + [self.output_dim]))

    @classmethod
    def w_network(cls, input_dim, hidden_dim=128):
        return cls(input_dim, hidden_dim, 1, 3, "exponential")

    @classmethod
    def v_network(cls, input_dim, dim, hidden_dim=32):
        return cls(input_dim, hidden_dim, dim, 3, "none")


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list
    biases: list
    stack: int = 0  # 0 means a single network

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return MlpParams(
            self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.stack
        )

    def member(self, i):
        """View of member ``i`` of a stacked parameter set."""
        if not self.stack:
            raise ShapeError("not a stacked parameter set")
        return MlpParams(self.spec, [w[i] for w in self.weights], [b[i] for b in self.biases])

    @property
    def num_params(self):
        return sum(a.size for a in self.arrays())

    def allclose(self, other, **kw):
        return all(np.allclose(a, b, **kw) for a, b in zip(self.arrays(), other.arrays()))

    def equal(self, other):
        return self.spec == other.spec and self.stack == other.stack and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


def stack_params(members):
    members = list(members)
    spec = members[0].spec
    if any(m.spec != spec for m in members):
        raise ShapeError("cannot stack networks with different specs")
    weights = [np.stack([m.weights[i] for m in members]) for i in range(len(members[0].weights))]
    biases = [np.stack([m.biases[i] for m in members]) for i in range(len(members[0].biases))]
    return MlpParams(spec, weights, biases, stack=len(members))


def init_params(spec, rng, stack=0, output_scale=1e-2, output_value=None):
    """He-uniform hidden layers with zero biases.

    For an exponential head the last layer gets weights of size
    ``output_scale`` and bias ``log(output_value)`` so the initial output is
    close to ``output_value`` (default 0.4, the mode of a standard normal).
    """
    lead = (stack,) if stack else ()
    weights, biases = [], []
    dims = spec.layer_dims
    for i, (fan_in, fan_out) in enumerate(dims):
        last = i == len(dims) - 1
        if last:
            if spec.output_activation == "exponential":
                bound = output_scale * np.sqrt(6.0 / fan_in)
            else:
                bound = np.sqrt(6.0 / (fan_in + fan_out))
        else:
            bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, lead + (fan_in, fan_out)))
        b = np.zeros(lead + (fan_out,))
        if last and spec.output_activation == "exponential":
            b[...] = np.log(0.4 if output_value is None else output_value)
        biases.append(b)
    return MlpParams(spec, weights, biases, stack)


def _check_input(params, x):
    if x.shape[-1] != params.spec.input_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, network expects {params.spec.input_dim}")
    if params.stack and (x.ndim != 3 or x.shape[0] != params.stack):
        raise ShapeError("stacked networks need input of shape (stack, B, input_dim)")


def forward(params, x, return_cache=False):
    """Evaluate the network. ``x`` has shape ``(B, in)`` or ``(in,)`` (or
    ``(stack, B, in)`` for stacked parameters)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None]
    _check_input(params, x)
    h = x
    inputs = []
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        h = h @ w
        h += b[:, None, :] if params.stack else b
        if i < n_layers - 1:
            np.maximum(h, 0.0, out=h)
    pre = h
    if params.spec.output_activation == "exponential":
        h = np.exp(np.clip(pre, -EXP_CLAMP, EXP_CLAMP))
    out = h[0] if single else h
    if return_cache:
        # hidden activations double as ReLU masks in the reverse pass
        return out, (inputs, pre, h, single)
    return out


def backward(params, cache, output_cotangent):
    """Reverse-mode pass through a cached forward evaluation.

    Returns ``(grads, input_grad)`` where ``grads`` follows the order of
    :meth:`MlpParams.arrays`. For a batch, parameter gradients are summed over
    samples.
    """
    inputs, pre, out, single = cache
    g = np.asarray(output_cotangent, dtype=float)
    if single:
        g = g[None]
    if g.shape != out.shape:
        raise ShapeError(f"cotangent shape {g.shape} does not match output {out.shape}")
    if params.spec.output_activation == "exponential":
        inside = (pre >= -EXP_CLAMP) & (pre <= EXP_CLAMP)
        g = g * out * inside
    n_layers = len(params.weights)
    grads = [None] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = g * (inputs[i + 1] > 0.0)
        grads[2 * i] = np.swapaxes(inputs[i], -1, -2) @ g
        grads[2 * i + 1] = g.sum(axis=-2)
        g = g @ np.swapaxes(params.weights[i], -1, -2)
    return grads, (g[0] if single else g)


@dataclass
class AdamState:
    m: list
    v: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def create(cls, arrays, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(arrays, grads, state):
    """Apply one bias-corrected Adam update to ``arrays`` in place."""
    if len(arrays) != len(grads) or len(grads) != len(state.m):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    for a, g in zip(arrays, grads):
        if a.shape != g.shape:
            raise ShapeError("gradient shape does not match parameter")
        if not np.all(np.isfinite(g)):
            raise DomainError("non-finite gradient; update rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        a -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return arrays, state


# -- serialization -------------------------------------------------------------

NET_MAGIC = b"BSDENET1"
NET_VERSION = 1
_NET_HEADER = struct.Struct("<8s7Q")


def serialize(params):
    spec = params.spec
    head = _NET_HEADER.pack(
        NET_MAGIC,
        NET_VERSION,
        spec.input_dim,
        spec.hidden_dim,
        spec.num_hidden_layers,
        spec.output_dim,
        ACTIVATIONS.index(spec.output_activation),
        params.stack,
    )
    return head + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())


def deserialize(data):
    if len(data) < _NET_HEADER.size:
        raise DecodeError("truncated or empty parameter stream")
    magic, version, ind, hid, nh, outd, act, stack = _NET_HEADER.unpack_from(data)
    if magic != NET_MAGIC:
        raise DecodeError("bad parameter magic")
    if version != NET_VERSION:
        raise DecodeError(f"unsupported parameter version {version}")
    if act >= len(ACTIVATIONS):
        raise DecodeError("unknown output activation code")
    spec = MlpSpec(ind, hid, outd, nh, ACTIVATIONS[act])
    lead = (stack,) if stack else ()
    shapes = []
    for fan_in, fan_out in spec.layer_dims:
        shapes += [lead + (fan_in, fan_out), lead + (fan_out,)]
    sizes = [int(np.prod(s)) for s in shapes]
    need = _NET_HEADER.size + 8 * sum(sizes)
    if len(data) != need:
        raise DecodeError(f"parameter payload has {len(data)} bytes, expected {need}")
    flat = np.frombuffer(data, dtype="<f8", offset=_NET_HEADER.size).astype(float)
    parts = [p.reshape(s) for p, s in zip(np.split(flat, np.cumsum(sizes)[:-1]), shapes)]
    return MlpParams(spec, parts[0::2], parts[1::2], stack)
