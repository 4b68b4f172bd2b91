"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tape`` records primitive operations eagerly; ``backward`` walks the tape
in reverse, accumulating gradients of a scalar root with respect to every
leaf.  The same primitive functions also operate directly on plain numpy
arrays when no ``Var`` is involved, so model code runs traced (training) or
untraced (simulation, analysis) through a single code path.

Hessians come from central finite differences of exact gradients
(``hessian_fd``); there is deliberately no higher-order tape.
"""

from __future__ import annotations

from typing import Any, Callable, Sequence, Union

import numpy as np

from .errors import NonScalarRoot

ArrayLike = Union["Var", np.ndarray, float, int]


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    __slots__ = ("op", "parents", "value", "aux", "needs_grad")

    def __init__(self, op, parents, value, aux, needs_grad):
        self.op = op
        self.parents = parents
        self.value = value
        self.aux = aux
        self.needs_grad = needs_grad


class Var:
    """Handle to a node on a tape. Supports the usual arithmetic operators."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Append-only record of primitive ops; parents always precede children."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name: str | None = None) -> Var:
        """Record a differentiable input (parameter or traced state)."""
        self.nodes.append(Node("leaf", (), _asarray(value), name, True))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        """Record a non-differentiable input."""
        self.nodes.append(Node("const", (), _asarray(value), None, False))
        return Var(self, len(self.nodes) - 1)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node value from the recorded ops.

        Leaves/constants keep their stored values. Used to verify that the
        tape is a faithful, deterministic description of the computation.
        """
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op in ("leaf", "const"):
                values.append(node.value)
            else:
                pvals = [values[p] for p in node.parents]
                values.append(_FORWARD[node.op](pvals, node.aux))
        return values


def _apply(op: str, args: Sequence[ArrayLike], aux=None) -> ArrayLike:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    if tape is None:
        return _FORWARD[op]([_asarray(a) for a in args], aux)
    parents = []
    pvals = []
    for a in args:
        if isinstance(a, Var):
            parents.append(a.index)
            pvals.append(a.value)
        else:
            cv = tape.constant(a)
            parents.append(cv.index)
            pvals.append(cv.value)
    value = _FORWARD[op](pvals, aux)
    needs = any(tape.nodes[p].needs_grad for p in parents)
    tape.nodes.append(Node(op, tuple(parents), value, aux, needs))
    return Var(tape, len(tape.nodes) - 1)


# ---------------------------------------------------------------------------
# forward rules


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _sigmoid(x):
    # tanh form is stable for large |x|
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


_FORWARD: dict[str, Callable[[list, Any], np.ndarray]] = {
    "add": lambda p, aux: p[0] + p[1],
    "sub": lambda p, aux: p[0] - p[1],
    "mul": lambda p, aux: p[0] * p[1],
    "div": lambda p, aux: p[0] / p[1],
    "neg": lambda p, aux: -p[0],
    "matmul": lambda p, aux: p[0] @ p[1],
    "transpose": lambda p, aux: p[0].T,
    "tanh": lambda p, aux: np.tanh(p[0]),
    "sigmoid": lambda p, aux: _sigmoid(p[0]),
    "softplus": lambda p, aux: np.logaddexp(0.0, p[0]),
    "exp": lambda p, aux: np.exp(p[0]),
    "log": lambda p, aux: np.log(p[0]),
    "sqrt": lambda p, aux: np.sqrt(p[0]),
    "square": lambda p, aux: np.square(p[0]),
    "sum": lambda p, aux: p[0].sum(axis=aux[0], keepdims=aux[1]),
    "reshape": lambda p, aux: p[0].reshape(aux),
    "slice": lambda p, aux: p[0][aux],
    "concat": lambda p, aux: np.concatenate(p, axis=aux),
    "broadcast": lambda p, aux: np.broadcast_to(p[0], aux),
}


# ---------------------------------------------------------------------------
# backward rules: (g, parent_values, value, aux, wanted) -> grad per parent


def _bw_add(g, p, v, aux, w):
    return (
        _unbroadcast(g, p[0].shape) if w[0] else None,
        _unbroadcast(g, p[1].shape) if w[1] else None,
    )


def _bw_sub(g, p, v, aux, w):
    return (
        _unbroadcast(g, p[0].shape) if w[0] else None,
        _unbroadcast(-g, p[1].shape) if w[1] else None,
    )


def _bw_mul(g, p, v, aux, w):
    return (
        _unbroadcast(g * p[1], p[0].shape) if w[0] else None,
        _unbroadcast(g * p[0], p[1].shape) if w[1] else None,
    )


def _bw_div(g, p, v, aux, w):
    ga = _unbroadcast(g / p[1], p[0].shape) if w[0] else None
    gb = _unbroadcast(-g * v / p[1], p[1].shape) if w[1] else None
    return (ga, gb)


def _bw_matmul(g, p, v, aux, w):
    a, b = p
    ga = gb = None
    if a.ndim == 2 and b.ndim == 2:
        if w[0]:
            ga = g @ b.T
        if w[1]:
            gb = a.T @ g
    elif a.ndim == 1 and b.ndim == 2:
        if w[0]:
            ga = g @ b.T
        if w[1]:
            gb = np.outer(a, g)
    elif a.ndim == 2 and b.ndim == 1:
        if w[0]:
            ga = np.outer(g, b)
        if w[1]:
            gb = a.T @ g
    else:  # 1-D @ 1-D -> scalar
        if w[0]:
            ga = g * b
        if w[1]:
            gb = g * a
    return (ga, gb)


def _bw_sum(g, p, v, aux, w):
    axis, keepdims = aux
    x = p[0]
    if axis is None:
        return (np.broadcast_to(g, x.shape),)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % x.ndim for a in axes)
        shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
        g = g.reshape(shape)
    return (np.broadcast_to(g, x.shape),)


def _bw_slice(g, p, v, aux, w):
    out = np.zeros_like(p[0])
    out[aux] = g
    return (out,)


def _bw_concat(g, p, v, aux, w):
    sizes = np.cumsum([q.shape[aux] for q in p])[:-1]
    return tuple(np.split(g, sizes, axis=aux))


_BACKWARD: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "neg": lambda g, p, v, aux, w: (-g,),
    "matmul": _bw_matmul,
    "transpose": lambda g, p, v, aux, w: (g.T,),
    "tanh": lambda g, p, v, aux, w: (g * (1.0 - np.square(v)),),
    "sigmoid": lambda g, p, v, aux, w: (g * v * (1.0 - v),),
    "softplus": lambda g, p, v, aux, w: (g * _sigmoid(p[0]),),
    "exp": lambda g, p, v, aux, w: (g * v,),
    "log": lambda g, p, v, aux, w: (g / p[0],),
    "sqrt": lambda g, p, v, aux, w: (g * 0.5 / v,),
    "square": lambda g, p, v, aux, w: (g * 2.0 * p[0],),
    "sum": _bw_sum,
    "reshape": lambda g, p, v, aux, w: (g.reshape(p[0].shape),),
    "slice": _bw_slice,
    "concat": _bw_concat,
    "broadcast": lambda g, p, v, aux, w: (_unbroadcast(g, p[0].shape),),
}


# ---------------------------------------------------------------------------
# public ops


def add(a, b):
    return _apply("add", (a, b))


def sub(a, b):
    return _apply("sub", (a, b))


def mul(a, b):
    return _apply("mul", (a, b))


def div(a, b):
    return _apply("div", (a, b))


def neg(a):
    return _apply("neg", (a,))


def matmul(a, b):
    return _apply("matmul", (a, b))


def transpose(a):
    return _apply("transpose", (a,))


def tanh(a):
    return _apply("tanh", (a,))


def sigmoid(a):
    return _apply("sigmoid", (a,))


def softplus(a):
    return _apply("softplus", (a,))


def exp(a):
    return _apply("exp", (a,))


def log(a):
    return _apply("log", (a,))


def sqrt(a):
    return _apply("sqrt", (a,))


def square(a):
    return _apply("square", (a,))


def reduce_sum(a, axis=None, keepdims=False):
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply("sum", (a,), aux=(axis, keepdims))


def reshape(a, shape):
    return _apply("reshape", (a,), aux=tuple(shape))


def take(a, key):
    """Basic slicing (slices/ints only); gradient scatters into zeros."""
    if not isinstance(key, tuple):
        key = (key,)
    return _apply("slice", (a,), aux=key)


def concat(parts, axis=0):
    return _apply("concat", tuple(parts), aux=axis)


def broadcast_to(a, shape):
    return _apply("broadcast", (a,), aux=tuple(shape))


def value_of(x) -> np.ndarray:
    """Underlying array of a Var, or the input coerced to float64."""
    return x.value if isinstance(x, Var) else _asarray(x)


class Gradients:
    """Result of backward(): gradient lookup per Var, zeros off the root's cone."""

    def __init__(self, tape: Tape, table: dict[int, np.ndarray]):
        self._tape = tape
        self._table = table

    def wrt(self, var: Var) -> np.ndarray:
        g = self._table.get(var.index)
        if g is None:
            return np.zeros_like(self._tape.nodes[var.index].value)
        return g


def backward(root: Var) -> Gradients:
    """Gradients of a scalar root with respect to every tape leaf."""
    tape = root.tape
    nodes = tape.nodes
    if nodes[root.index].value.shape != ():
        raise NonScalarRoot(f"root has shape {nodes[root.index].value.shape}, expected scalar")
    grads: dict[int, np.ndarray] = {root.index: np.ones(())}
    # indices whose accumulation buffer we allocated ourselves and may mutate
    owned: set[int] = set()
    for idx in range(root.index, -1, -1):
        g = grads.get(idx)
        if g is None:
            continue
        node = nodes[idx]
        if node.op in ("leaf", "const"):
            continue
        if node.op == "slice":
            # scatter-add in place; a fresh zeros buffer per slice would
            # dominate the backward pass for long unrolled loops
            p = node.parents[0]
            if nodes[p].needs_grad:
                acc = grads.get(p)
                if acc is None:
                    acc = np.zeros_like(nodes[p].value)
                    grads[p] = acc
                    owned.add(p)
                elif p not in owned:
                    acc = acc.copy()
                    grads[p] = acc
                    owned.add(p)
                acc[node.aux] += g
            if idx != root.index:
                del grads[idx]
            continue
        wanted = tuple(nodes[p].needs_grad for p in node.parents)
        pvals = [nodes[p].value for p in node.parents]
        pgrads = _BACKWARD[node.op](g, pvals, node.value, node.aux, wanted)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not nodes[p].needs_grad:
                continue
            acc = grads.get(p)
            if acc is None:
                grads[p] = pg
            elif p in owned:
                acc += pg
            else:
                # np.asarray: 0-d sums come back as immutable numpy scalars,
                # which would silently break the in-place accumulation above
                grads[p] = np.asarray(acc + pg)
                owned.add(p)
        if idx != root.index:
            del grads[idx]
    return Gradients(tape, grads)


def grad_of(f: Callable[[Var], Var], x: np.ndarray) -> np.ndarray:
    """Gradient of a scalar-valued function at x via a fresh tape."""
    tape = Tape()
    xv = tape.leaf(x)
    return backward(f(xv)).wrt(xv)


def gradient_check(f: Callable, x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between the AD gradient of f and central differences.

    ``f`` must accept either a Var or a plain array (the ops in this module
    are polymorphic, so the same callable serves both paths).
    """
    x = _asarray(x)
    g_ad = grad_of(f, x)
    g_fd = np.zeros_like(x)
    flat = x.reshape(-1)
    fd = g_fd.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = value_of(f(xp.reshape(x.shape)))
        fm = value_of(f(xm.reshape(x.shape)))
        fd[i] = (fp - fm) / (2.0 * h)
    err = np.abs(g_ad - g_fd) / (np.abs(g_fd) + 1e-12)
    return float(err.max()) if err.size else 0.0


def hessian_fd(grad_f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Symmetrized central-difference Hessian from an exact gradient function.

    Steps scale with coordinate magnitude: h_i = h * (1 + |x_i|).
    """
    x = _asarray(x)
    n = x.size
    cols = np.zeros((n, n))
    flat = x.reshape(-1)
    for i in range(n):
        hi = h * (1.0 + abs(flat[i]))
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += hi
        xm[i] -= hi
        gp = _asarray(grad_f(xp.reshape(x.shape))).reshape(-1)
        gm = _asarray(grad_f(xm.reshape(x.shape))).reshape(-1)
        cols[:, i] = (gp - gm) / (2.0 * hi)
    return 0.5 * (cols + cols.T)
