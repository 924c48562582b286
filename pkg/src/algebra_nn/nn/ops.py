"""Differentiable layer ops recorded on a :class:`~algebra_nn.autodiff.Tape`."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Var
from ..algebra import StructureTable
from . import functional as F

__all__ = [
    "linear",
    "conv2d",
    "batchnorm",
    "tuple_gate",
    "lift",
    "flat_attention",
    "readout",
    "dropout",
    "global_avg_pool",
    "gru_cell",
    "BatchNormState",
]


def linear(x: Var, w: Var, b: Var | None, table: StructureTable) -> Var:
    xv, wv = x.value, w.value
    out = F.linear_forward(xv, wv, None if b is None else b.value, table)
    has_bias = b is not None

    def back(g):
        dx, dw, db = F.linear_backward(g, xv, wv, table, bias=has_bias)
        return (dx, dw, db) if has_bias else (dx, dw)

    parents = (x, w, b) if has_bias else (x, w)
    return x.tape.record("linear", out, parents, back)


def conv2d(x: Var, w: Var, b: Var | None, table: StructureTable, stride=1, padding="valid") -> Var:
    xv, wv = x.value, w.value
    out = F.conv2d_forward(xv, wv, None if b is None else b.value, table, stride, padding)
    has_bias = b is not None

    def back(g):
        dx, dw, db = F.conv2d_backward(g, xv, wv, table, stride, padding, bias=has_bias)
        return (dx, dw, db) if has_bias else (dx, dw)

    parents = (x, w, b) if has_bias else (x, w)
    return x.tape.record("conv2d", out, parents, back)


class BatchNormState:
    """Running statistics for one batch-norm layer, shaped ``(C, A)``."""

    def __init__(self, channels: int, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros((channels, dim))
        self.running_var = np.ones((channels, dim))
        self.momentum = momentum
        self.eps = eps

    def update(self, mean: np.ndarray, var: np.ndarray, count: int) -> None:
        unbiased = var * count / max(count - 1, 1)
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * mean
        self.running_var = (1.0 - m) * self.running_var + m * unbiased


def batchnorm(x: Var, gamma: Var, beta: Var, state: BatchNormState, training: bool) -> Var:
    xv, gv, bv = x.value, gamma.value, beta.value
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        out = gv * (xv - state.running_mean) * inv + bv
        xhat = (xv - state.running_mean) * inv
        axes = tuple(range(xv.ndim - 2))
        return x.tape.record("batchnorm_eval", out, (x, gamma, beta),
                             lambda g: (g * gv * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)))
    out, mu, var, cache = F.batchnorm_train(xv, gv, bv, state.eps)
    state.update(mu, var, int(np.prod(xv.shape[:-2])))
    return x.tape.record("batchnorm", out, (x, gamma, beta),
                         lambda g: F.batchnorm_backward(g, gv, cache))


def tuple_gate(x: Var) -> tuple[Var, float]:
    """Heaviside-of-mean gate. The step itself passes no gradient."""
    xv = x.value
    m = xv.mean(axis=-1, keepdims=True)
    keep = m >= 0.0
    frac = 1.0 - float(keep.mean()) if keep.size else 0.0
    margin = float(np.abs(m).min()) if m.size else float("inf")
    out = x.tape.record("tuple_gate", xv * keep, (x,), lambda g: (g * keep,), margin)
    return out, frac


def lift(x: Var, weight: Var, bias: Var, hidden: tuple[Var, Var] | None = None) -> Var:
    """Real ``(..., C)`` input to ``(..., C, A)`` tuples; see :func:`functional.lift_forward`."""
    tape = x.tape
    src = x
    if hidden is not None:
        w1, b1 = hidden
        src = ad.activation(_affine(src, w1, b1), "relu")
    xv, wv, sv = x.value, weight.value, src.value
    extra = np.einsum("mcf,...f->...cm", wv, sv) + bias.value.T
    lead = tuple(range(sv.ndim - 1))

    def back_extra(g):
        dsrc = np.einsum("mcf,...cm->...f", wv, g)
        dw = np.einsum("ncm,nf->mcf", g.reshape(-1, *g.shape[-2:]), sv.reshape(-1, sv.shape[-1]))
        db = g.sum(axis=lead).T
        return dsrc, dw, db

    extra_var = tape.record("lift_extra", extra, (src, weight, bias), back_extra)
    first = tape.record("expand", xv[..., None], (x,), lambda g: (g[..., 0],))
    return ad.concat([first, extra_var], axis=-1)


def _affine(x: Var, w: Var, b: Var) -> Var:
    xv, wv = x.value, w.value
    lead = tuple(range(xv.ndim - 1))
    return x.tape.record("affine", xv @ wv.T + b.value, (x, w, b),
                         lambda g: (g @ wv, g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1]),
                                    g.sum(axis=lead)))


def flat_attention(k: Var, q: Var) -> Var:
    kv, qv = k.value, q.value
    kf = kv.reshape(kv.shape[0], kv.shape[1], -1)
    qf = qv.reshape(qv.shape[0], qv.shape[1], -1)
    out = F.flat_attention_score(kv, qv)

    def back(g):
        dk = (g @ qf).reshape(kv.shape)
        dq = (np.swapaxes(g, 1, 2) @ kf).reshape(qv.shape)
        return dk, dq

    return k.tape.record("flat_attention", out, (k, q), back)


def readout(x: Var) -> Var:
    """Tuple L2 norm: one real logit per tuple."""
    return ad.norm(x)


def dropout(x: Var, rate: float, rng: np.random.Generator) -> Var:
    """Component-wise inverted dropout."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.hadamard(x, keep)


def global_avg_pool(x: Var) -> Var:
    """Mean over the spatial axes of ``(B, H, W, C, A)``."""
    return ad.mean(x, axis=(1, 2))


def gru_cell(x: Var, h: Var, p: dict[str, Var], table: StructureTable) -> Var:
    """One GRU step with algebra linear maps and component-wise gates.

    ``p`` holds ``w_ir w_iz w_in`` (H, C_in, A), ``w_hr w_hz w_hn`` (H, H, A)
    and matching biases ``b_*`` of shape (H, A).
    """
    def lin(src, name):
        return linear(src, p[f"w_{name}"], p.get(f"b_{name}"), table)

    r = ad.activation(lin(x, "ir") + lin(h, "hr"), "sigmoid")
    z = ad.activation(lin(x, "iz") + lin(h, "hz"), "sigmoid")
    n = ad.activation(lin(x, "in") + r * lin(h, "hn"), "tanh")
    return (1.0 - z) * n + z * h
