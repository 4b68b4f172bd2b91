"""MLP and GRU building blocks plus Adam, written against the autodiff ops.

Every forward function accepts parameters and inputs as either plain numpy
arrays or tape Vars; the ops dispatch accordingly, so the same code trains
(traced) and simulates (untraced).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch


def _dim(x) -> int:
    v = ad.value_of(x)
    return v.shape[-1] if v.ndim else 1


@dataclass
class MlpParams:
    """Dense layers with tanh hidden activations and a linear output."""

    weights: list  # (fan_in, fan_out) per layer
    biases: list  # (fan_out,) per layer

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return ad.value_of(self.weights[0]).shape[0]

    @property
    def out_dim(self) -> int:
        return ad.value_of(self.weights[-1]).shape[1]

    def tensors(self, prefix: str):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.W{i}", w
            yield f"{prefix}.b{i}", b


@dataclass
class GruParams:
    """Single-layer GRU: reset/update/candidate gates."""

    Wr: object
    Wz: object
    Wn: object
    Ur: object
    Uz: object
    Un: object
    br: object
    bz: object
    bn: object

    @property
    def input_dim(self) -> int:
        return ad.value_of(self.Wr).shape[0]

    @property
    def hidden_dim(self) -> int:
        return ad.value_of(self.Wr).shape[1]

    def tensors(self, prefix: str):
        for name in ("Wr", "Wz", "Wn", "Ur", "Uz", "Un", "br", "bz", "bn"):
            yield f"{prefix}.{name}", getattr(self, name)


def init_mlp(sizes: list[int], rng: np.random.Generator) -> MlpParams:
    """Uniform fan-in initialization, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def init_gru(input_dim: int, hidden_dim: int, rng: np.random.Generator) -> GruParams:
    bw = 1.0 / np.sqrt(input_dim)
    bu = 1.0 / np.sqrt(hidden_dim)

    def w():
        return rng.uniform(-bw, bw, size=(input_dim, hidden_dim))

    def u():
        return rng.uniform(-bu, bu, size=(hidden_dim, hidden_dim))

    return GruParams(
        Wr=w(), Wz=w(), Wn=w(),
        Ur=u(), Uz=u(), Un=u(),
        br=np.zeros(hidden_dim), bz=np.zeros(hidden_dim), bn=np.zeros(hidden_dim),
    )


def mlp_forward(params: MlpParams, x, final_bias: bool = True):
    """Forward pass; input (..., in_dim) or (in_dim,).

    ``final_bias=False`` omits the output-layer bias entirely (it is not
    subtracted afterwards), giving values that are exactly independent of
    that bias parameter.
    """
    if _dim(x) != params.in_dim:
        raise ShapeMismatch(f"mlp input dim {_dim(x)} != {params.in_dim}")
    h = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.matmul(h, w)
        if i != last:
            h = ad.tanh(ad.add(h, b))
        elif final_bias:
            h = ad.add(h, b)
    return h


def mlp_value_and_input_grad(params: MlpParams, x):
    """Scalar-output MLP value and its gradient with respect to the input.

    The gradient is built from the same primitive ops as the forward pass
    (chain rule written out), so a surrounding tape can differentiate
    through it when the gradient feeds an unrolled solver.  Input (B, d)
    gives value (B, 1) and gradient (B, d).
    """
    if params.out_dim != 1:
        raise ShapeMismatch("input-gradient path requires a scalar output head")
    h = x
    hiddens = []
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if i != last:
            h = ad.tanh(h)
            hiddens.append(h)
    value = h
    # backprop to the input: delta after output layer is W_L^T broadcast
    g = ad.transpose(params.weights[last])  # (1, h_last)
    for i in range(last - 1, -1, -1):
        g = ad.mul(ad.sub(1.0, ad.square(hiddens[i])), g)
        g = ad.matmul(g, ad.transpose(params.weights[i]))
    return value, g


def gru_step_pre(params: GruParams, hidden, xr, xz, xn):
    """GRU recurrence given precomputed input projections x@Wr, x@Wz, x@Wn.

        r = sigmoid(x Wr + h Ur + br)
        z = sigmoid(x Wz + h Uz + bz)
        n = tanh(x Wn + (r*h) Un + bn)
        h' = z*h + (1-z)*n
    """
    r = ad.sigmoid(ad.add(ad.add(xr, ad.matmul(hidden, params.Ur)), params.br))
    z = ad.sigmoid(ad.add(ad.add(xz, ad.matmul(hidden, params.Uz)), params.bz))
    n = ad.tanh(ad.add(ad.add(xn, ad.matmul(ad.mul(r, hidden), params.Un)), params.bn))
    return ad.add(ad.mul(z, hidden), ad.mul(ad.sub(1.0, z), n))


def gru_step(params: GruParams, hidden, x):
    """One GRU recurrence; see gru_step_pre for the gate equations."""
    if _dim(x) != params.input_dim:
        raise ShapeMismatch(f"gru input dim {_dim(x)} != {params.input_dim}")
    if _dim(hidden) != params.hidden_dim:
        raise ShapeMismatch(f"gru hidden dim {_dim(hidden)} != {params.hidden_dim}")
    return gru_step_pre(params, hidden,
                        ad.matmul(x, params.Wr), ad.matmul(x, params.Wz), ad.matmul(x, params.Wn))


def gru_sequence(params: GruParams, xs, hidden0=None):
    """Run the GRU over a time-major sequence, returning hidden states.

    ``xs`` is a list of (B, input_dim) steps (arrays or Vars).  The state at
    index t depends only on inputs 0..t, so the encoder is causal by
    construction.
    """
    if hidden0 is None:
        b = ad.value_of(xs[0]).shape[0]
        hidden0 = np.zeros((b, params.hidden_dim))
    h = hidden0
    out = []
    for x in xs:
        h = gru_step(params, h, x)
        out.append(h)
    return out


@dataclass
class AdamState:
    """Per-parameter first/second moments and the step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update over a dict of named arrays.

    Only names present in ``grads`` are updated. Mutates ``state``, returns
    the updated params dict (new arrays; the input dict is updated in place).
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != np.shape(p):
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {np.shape(p)} for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * np.square(g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / corr1
        vhat = v / corr2
        params[name] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


def global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g)))
    return float(np.sqrt(total))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients so their joint 2-norm is at most max_norm."""
    norm = global_norm(grads)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm
