"""Tape-based reverse-mode differentiation over numpy arrays.

Gradients are taken on the flat real parameterisation: every tuple component
is an independent real parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .algebra import StructureTable, mul_generic, _check_dim

__all__ = [
    "NonFiniteError",
    "Tape",
    "Var",
    "backward_mul",
    "backward_norm",
    "grad_check",
    "unbroadcast",
]

Backward = Callable[[np.ndarray], tuple]


class NonFiniteError(FloatingPointError):
    """A recorded value or adjoint contains NaN or inf."""


@dataclass
class Node:
    op: str
    value: np.ndarray
    parents: tuple[int, ...] = ()
    backward: Backward | None = None
    # distance to the nearest non-differentiable point, if the op has one
    kink_margin: float = float("inf")


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "index")
    __array_priority__ = 100  # so ndarray op Var dispatches to Var

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Var(#{self.index} {self.tape.nodes[self.index].op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Var) else -np.asarray(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


@dataclass
class Tape:
    """Append-only record of primitive ops. One tape per forward pass."""

    nodes: list[Node] = field(default_factory=list)

    def leaf(self, value, name: str = "leaf") -> Var:
        return self.record(name, np.asarray(value, dtype=np.float64), ())

    def constant(self, value) -> Var:
        return self.record("const", np.asarray(value, dtype=np.float64), ())

    def record(self, op: str, value: np.ndarray, parents: tuple[Var, ...],
               backward: Backward | None = None, kink_margin: float = float("inf")) -> Var:
        for p in parents:
            if p.tape is not self:
                raise ValueError("cannot mix vars from different tapes")
        node = Node(op, value, tuple(p.index for p in parents), backward, kink_margin)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def backward(self, root: Var, seed=None) -> dict[int, np.ndarray]:
        """Propagate adjoints from ``root``; returns adjoints keyed by node index.

        Only nodes that ``root`` depends on are visited, each exactly once,
        in reverse recording order.
        """
        n = root.index + 1
        needed = np.zeros(n, dtype=bool)
        needed[root.index] = True
        for idx in range(root.index, -1, -1):
            if needed[idx]:
                for p in self.nodes[idx].parents:
                    needed[p] = True
        if seed is None:
            seed = np.ones_like(root.value)
        adj: dict[int, np.ndarray] = {root.index: np.asarray(seed, dtype=np.float64)}
        for idx in range(root.index, -1, -1):
            if not needed[idx] or idx not in adj:
                continue
            node = self.nodes[idx]
            if node.backward is None or not node.parents:
                continue
            grads = node.backward(adj[idx])
            for p, g in zip(node.parents, grads):
                if g is None:
                    continue
                if p in adj:
                    adj[p] = adj[p] + g
                else:
                    adj[p] = g
        return adj

    def gradients(self, root: Var, params: Mapping[str, Var], seed=None) -> dict[str, np.ndarray]:
        """Gradient bundle: one adjoint per named parameter, zeros if unused."""
        adj = self.backward(root, seed)
        return {name: adj.get(v.index, np.zeros_like(v.value)) for name, v in params.items()}

    def check_finite(self) -> None:
        for idx, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.value)):
                raise NonFiniteError(f"non-finite value at node #{idx} ({node.op})")

    def min_kink_margin(self) -> float:
        return min((n.kink_margin for n in self.nodes), default=float("inf"))


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_var(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def add(x, y) -> Var:
    tape = x.tape if isinstance(x, Var) else y.tape
    x, y = _as_var(tape, x), _as_var(tape, y)
    xs, ys = x.shape, y.shape
    return tape.record("add", x.value + y.value, (x, y),
                       lambda g: (unbroadcast(g, xs), unbroadcast(g, ys)))


def neg(x: Var) -> Var:
    return x.tape.record("neg", -x.value, (x,), lambda g: (-g,))


def scale(x: Var, s: float) -> Var:
    s = float(s)
    return x.tape.record("scale", s * x.value, (x,), lambda g: (s * g,))


def hadamard(x, y) -> Var:
    """Component-wise product (not the algebra product)."""
    tape = x.tape if isinstance(x, Var) else y.tape
    x, y = _as_var(tape, x), _as_var(tape, y)
    xv, yv = x.value, y.value
    return tape.record("hadamard", xv * yv, (x, y),
                       lambda g: (unbroadcast(g * yv, xv.shape), unbroadcast(g * xv, yv.shape)))


def total(x: Var, axis=None, keepdims: bool = False) -> Var:
    shape = x.shape
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape.record("sum", np.asarray(out), (x,), back)


def mean(x: Var, axis=None, keepdims: bool = False) -> Var:
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(total(x, axis, keepdims), 1.0 / count)


def reshape(x: Var, shape) -> Var:
    old = x.shape
    return x.tape.record("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: list[Var], axis: int = -1) -> Var:
    tape = xs[0].tape
    sizes = [v.shape[axis] for v in xs]
    splits = np.cumsum(sizes)[:-1]
    return tape.record("concat", np.concatenate([v.value for v in xs], axis=axis), tuple(xs),
                       lambda g: tuple(np.split(g, splits, axis=axis)))


def backward_mul(table: StructureTable, x, y, out_adjoint) -> tuple[np.ndarray, np.ndarray]:
    """Adjoints of ``mul_generic(table, x, y)`` read straight off the table.

    ``x_adj[i] = sum sign * g[k] * y[j]`` and ``y_adj[j] = sum sign * g[k] * x[i]``.
    Works on broadcast stacks; adjoints come back in the broadcast shape.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    g = np.asarray(out_adjoint, dtype=np.float64)
    _check_dim(table.dim, x, y, g)
    shape = np.broadcast_shapes(x.shape, y.shape, g.shape)
    gx = np.zeros(shape)
    gy = np.zeros(shape)
    for e in table.entries:
        gx[..., e.i] += e.sign * g[..., e.k] * y[..., e.j]
        gy[..., e.j] += e.sign * g[..., e.k] * x[..., e.i]
    return gx, gy


def algebra_mul(table: StructureTable, x: Var, y: Var) -> Var:
    """Tuple-wise algebra product of two broadcastable vars."""
    xv, yv = x.value, y.value

    def back(g):
        gx, gy = backward_mul(table, xv, yv, g)
        return unbroadcast(gx, xv.shape), unbroadcast(gy, yv.shape)

    return x.tape.record("algebra_mul", mul_generic(table, xv, yv), (x, y), back)


def backward_norm(x, out_adjoint) -> np.ndarray:
    """Adjoint of the tuple L2 norm. Zero tuples get a zero adjoint."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(out_adjoint, dtype=np.float64)
    n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    safe = np.where(n > 0.0, n, 1.0)
    return np.where(n > 0.0, g[..., None] * x / safe, 0.0)


def norm(x: Var) -> Var:
    xv = x.value
    out = np.sqrt(np.sum(xv * xv, axis=-1))
    margin = float(out.min()) if out.size else float("inf")
    return x.tape.record("norm", out, (x,), lambda g: (backward_norm(xv, g),), margin)


def _sigmoid(v):
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def activation(x: Var, kind: str) -> Var:
    """Component-wise nonlinearity: relu, swish, tanh or sigmoid."""
    v = x.value
    if kind == "relu":
        out = np.maximum(v, 0.0)
        margin = float(np.abs(v).min()) if v.size else float("inf")
        return x.tape.record("relu", out, (x,), lambda g: (g * (v > 0),), margin)
    if kind == "swish":
        s = _sigmoid(v)
        return x.tape.record("swish", v * s, (x,), lambda g: (g * (s + v * s * (1.0 - s)),))
    if kind == "tanh":
        t = np.tanh(v)
        return x.tape.record("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))
    if kind == "sigmoid":
        s = _sigmoid(v)
        return x.tape.record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))
    if kind in ("identity", "none"):
        return x
    raise ValueError(f"unknown activation {kind!r}")


def softmax_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean cross-entropy of integer ``labels`` over the last axis of ``logits``."""
    z = logits.value
    labels = np.asarray(labels)
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    flat_logp = logp.reshape(-1, z.shape[-1])
    flat_y = labels.reshape(-1)
    count = flat_y.size
    loss = -flat_logp[np.arange(count), flat_y].mean()

    def back(g):
        p = np.exp(flat_logp)
        p[np.arange(count), flat_y] -= 1.0
        return ((g / count) * p.reshape(z.shape),)

    return logits.tape.record("xent", np.asarray(loss), (logits,), back)


def grad_check(fragment, inputs, seed: int = 0, step: float = 1e-6,
               min_margin: float = 1e-4, max_resample: int = 50) -> float:
    """Compare tape gradients of ``fragment`` with central differences.

    ``fragment(tape, vars)`` builds the computation from a dict of leaf vars
    and returns an output var. ``inputs`` is a dict of arrays, or a callable
    ``rng -> dict`` which is re-sampled while any recorded kink (ReLU input,
    gate mean, zero norm) lies within ``min_margin``. A vector output is
    reduced with seeded random weights. Returns
    ``max |analytic - numeric| / max(1, |numeric|)`` over every component.
    """
    rng = np.random.default_rng(seed)
    sampler = inputs if callable(inputs) else None
    for _ in range(max_resample):
        values = {k: np.array(v, dtype=np.float64) for k, v in (sampler(rng) if sampler else inputs).items()}
        tape = Tape()
        leaves = {k: tape.leaf(v, k) for k, v in values.items()}
        out = fragment(tape, leaves)
        tape.check_finite()
        if sampler is None or tape.min_kink_margin() >= min_margin:
            break
    weights = rng.standard_normal(out.shape)

    def scalar(vals: dict[str, np.ndarray]) -> float:
        t = Tape()
        o = fragment(t, {k: t.leaf(v, k) for k, v in vals.items()})
        return float(np.sum(o.value * weights))

    grads = tape.gradients(out, leaves, seed=weights)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for input {name!r}")
    worst = 0.0
    for name, base in values.items():
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + step
            up = scalar(values)
            base[idx] = orig - step
            down = scalar(values)
            base[idx] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(grads[name][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
