"""Numpy kernels for algebra layers (forward and backward).

Tensors carry a trailing tuple axis of length ``dim``. Weights multiply
activations from the left: ``out = sum W * x`` in algebra order.

Linear and convolution layers are assembled component by component: for
every structure-table entry ``(i, j, k, sign)`` one real matmul between
weight component ``i`` and input component ``j`` is accumulated into output
component ``k``. The ``*_tuplewise`` variants compute the same thing via the
dense structure tensor and exist as cross-checks.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..algebra import AlgebraId, StructureTable, structure_table
from ..autodiff import _sigmoid

__all__ = [
    "ShapeError",
    "rule_matmul",
    "rule_matmul_backward",
    "linear_forward",
    "linear_backward",
    "linear_tuplewise",
    "conv_output_size",
    "resolve_padding",
    "conv2d_forward",
    "conv2d_backward",
    "conv2d_tuplewise",
    "activation",
    "tuple_gate",
    "batchnorm_train",
    "batchnorm_eval",
    "batchnorm_backward",
    "flat_attention_score",
    "glorot_init",
    "logits_readout",
    "lift_forward",
]


class ShapeError(ValueError):
    pass


def _table(algebra) -> StructureTable:
    if isinstance(algebra, StructureTable):
        return algebra
    return structure_table(AlgebraId.parse(algebra))


def rule_matmul(table: StructureTable, cols: np.ndarray, wmat: np.ndarray) -> np.ndarray:
    """``cols`` is ``(N, A, F)``, ``wmat`` is ``(A, C_out, F)``; returns ``(N, C_out, A)``."""
    n, out_c = cols.shape[0], wmat.shape[1]
    out = np.zeros((table.dim, n, out_c))
    for e in table.entries:
        prod = cols[:, e.j, :] @ wmat[e.i].T
        if e.sign > 0:
            out[e.k] += prod
        else:
            out[e.k] -= prod
    return np.moveaxis(out, 0, -1)


def rule_matmul_backward(table: StructureTable, g: np.ndarray, cols: np.ndarray,
                         wmat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gk = np.moveaxis(g, -1, 0)  # (A, N, C_out)
    dcols = np.zeros_like(cols)
    dw = np.zeros_like(wmat)
    for e in table.entries:
        s = float(e.sign)
        dcols[:, e.j, :] += s * (gk[e.k] @ wmat[e.i])
        dw[e.i] += s * (gk[e.k].T @ cols[:, e.j, :])
    return dcols, dw


def _check_linear(x, w, table):
    if w.ndim != 3 or w.shape[-1] != table.dim:
        raise ShapeError(f"linear weight must be (C_out, C_in, {table.dim}), got {w.shape}")
    if x.shape[-1] != table.dim or x.shape[-2] != w.shape[1]:
        raise ShapeError(f"input {x.shape} does not match weight {w.shape}")


def linear_forward(x, w, b=None, algebra="R") -> np.ndarray:
    """``out[..., o] = sum_c W[o, c] * x[..., c] + b[o]`` for ``x`` of shape ``(..., C_in, A)``."""
    table = _table(algebra)
    x, w = np.asarray(x, dtype=np.float64), np.asarray(w, dtype=np.float64)
    _check_linear(x, w, table)
    lead = x.shape[:-2]
    cols = np.ascontiguousarray(np.swapaxes(x.reshape(-1, *x.shape[-2:]), 1, 2))
    wmat = np.ascontiguousarray(np.moveaxis(w, -1, 0))
    out = rule_matmul(table, cols, wmat)
    if b is not None:
        out = out + b
    return out.reshape(*lead, w.shape[0], table.dim)


def linear_backward(g, x, w, algebra="R", bias: bool = True):
    """Returns ``(dx, dw, db)``; ``db`` is ``None`` when ``bias`` is false."""
    table = _table(algebra)
    lead = x.shape[:-2]
    cols = np.ascontiguousarray(np.swapaxes(x.reshape(-1, *x.shape[-2:]), 1, 2))
    wmat = np.ascontiguousarray(np.moveaxis(w, -1, 0))
    g2 = g.reshape(-1, *g.shape[-2:])
    dcols, dwmat = rule_matmul_backward(table, g2, cols, wmat)
    dx = np.swapaxes(dcols, 1, 2).reshape(*lead, *x.shape[-2:])
    dw = np.moveaxis(dwmat, 0, -1)
    db = g2.sum(axis=0) if bias else None
    return dx, dw, db


def linear_tuplewise(x, w, b=None, algebra="R") -> np.ndarray:
    """Same as :func:`linear_forward`, via the dense structure tensor."""
    table = _table(algebra)
    x, w = np.asarray(x, dtype=np.float64), np.asarray(w, dtype=np.float64)
    _check_linear(x, w, table)
    out = np.einsum("oci,...cj,ijk->...ok", w, x, table.dense())
    return out if b is None else out + b


def resolve_padding(padding, kernel: tuple[int, int], stride: tuple[int, int],
                    size: tuple[int, int]) -> tuple[tuple[int, int], tuple[int, int]]:
    """Normalise ``padding`` to ``((top, bottom), (left, right))``."""
    if isinstance(padding, str):
        mode = padding.lower()
        if mode == "valid":
            return (0, 0), (0, 0)
        if mode == "same":
            pads = []
            for n, k, s in zip(size, kernel, stride):
                total = max((math.ceil(n / s) - 1) * s + k - n, 0)
                pads.append((total // 2, total - total // 2))
            return tuple(pads)
        raise ShapeError(f"unsupported padding mode {padding!r}")
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        return (p, p), (p, p)
    ph, pw = padding
    return (int(ph), int(ph)), (int(pw), int(pw))


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    return int(v[0]), int(v[1])


def conv_output_size(size: int, kernel: int, stride: int, pad: tuple[int, int]) -> int:
    return (size + pad[0] + pad[1] - kernel) // stride + 1


def _im2col(x, kernel, stride, pads):
    kh, kw = kernel
    sh, sw = stride
    xp = np.pad(x, ((0, 0), pads[0], pads[1], (0, 0), (0, 0)))
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError(f"kernel {kernel} larger than padded input {xp.shape[1:3]}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    # win: (B, Ho, Wo, C, A, kh, kw) -> (N, A, C*kh*kw)
    b, ho, wo, c, a = win.shape[:5]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 3, 5, 6)).reshape(b * ho * wo, a, c * kh * kw)
    return cols, xp.shape, (b, ho, wo)


def _check_conv(x, w, table):
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError("conv2d expects x (B, H, W, C, A) and w (C_out, C_in, kh, kw, A)")
    if x.shape[-1] != table.dim or w.shape[-1] != table.dim or x.shape[3] != w.shape[1]:
        raise ShapeError(f"input {x.shape} does not match weight {w.shape}")


def conv2d_forward(x, w, b=None, algebra="R", stride=1, padding="valid") -> np.ndarray:
    """Algebra convolution on ``(B, H, W, C_in, A)`` inputs (cross-correlation, like deep
    learning frameworks). ``w`` is ``(C_out, C_in, kh, kw, A)``."""
    table = _table(algebra)
    x, w = np.asarray(x, dtype=np.float64), np.asarray(w, dtype=np.float64)
    _check_conv(x, w, table)
    kernel, stride = (w.shape[2], w.shape[3]), _pair(stride)
    pads = resolve_padding(padding, kernel, stride, x.shape[1:3])
    cols, _, (bs, ho, wo) = _im2col(x, kernel, stride, pads)
    wmat = np.ascontiguousarray(np.moveaxis(w, -1, 0)).reshape(table.dim, w.shape[0], -1)
    out = rule_matmul(table, cols, wmat)
    if b is not None:
        out = out + b
    return out.reshape(bs, ho, wo, w.shape[0], table.dim)


def conv2d_backward(g, x, w, algebra="R", stride=1, padding="valid", bias: bool = True):
    table = _table(algebra)
    kernel, stride = (w.shape[2], w.shape[3]), _pair(stride)
    kh, kw = kernel
    sh, sw = stride
    pads = resolve_padding(padding, kernel, stride, x.shape[1:3])
    cols, padded_shape, (bs, ho, wo) = _im2col(x, kernel, stride, pads)
    wmat = np.ascontiguousarray(np.moveaxis(w, -1, 0)).reshape(table.dim, w.shape[0], -1)
    g2 = g.reshape(-1, w.shape[0], table.dim)
    dcols, dwmat = rule_matmul_backward(table, g2, cols, wmat)
    dw = np.moveaxis(dwmat.reshape(table.dim, *w.shape[:4]), 0, -1)
    c = x.shape[3]
    dwin = dcols.reshape(bs, ho, wo, table.dim, c, kh, kw)
    dxp = np.zeros(padded_shape)
    for u in range(kh):
        for v in range(kw):
            dxp[:, u:u + sh * (ho - 1) + 1:sh, v:v + sw * (wo - 1) + 1:sw] += \
                dwin[..., u, v].transpose(0, 1, 2, 4, 3)
    h, wdt = x.shape[1:3]
    dx = dxp[:, pads[0][0]:pads[0][0] + h, pads[1][0]:pads[1][0] + wdt]
    db = g2.sum(axis=0) if bias else None
    return dx, dw, db


def conv2d_tuplewise(x, w, b=None, algebra="R", stride=1, padding="valid") -> np.ndarray:
    """Reference convolution summing algebra products window by window."""
    table = _table(algebra)
    x, w = np.asarray(x, dtype=np.float64), np.asarray(w, dtype=np.float64)
    _check_conv(x, w, table)
    kh, kw = w.shape[2:4]
    sh, sw = _pair(stride)
    pads = resolve_padding(padding, (kh, kw), (sh, sw), x.shape[1:3])
    xp = np.pad(x, ((0, 0), pads[0], pads[1], (0, 0), (0, 0)))
    ho = (xp.shape[1] - kh) // sh + 1
    wo = (xp.shape[2] - kw) // sw + 1
    c = table.dense()
    out = np.zeros((x.shape[0], ho, wo, w.shape[0], table.dim))
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, u:u + sh * (ho - 1) + 1:sh, v:v + sw * (wo - 1) + 1:sw]
            out += np.einsum("oci,bhwcj,ijk->bhwok", w[:, :, u, v], patch, c)
    return out if b is None else out + b


def activation(x, kind: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "swish":
        return x * _sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return _sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def tuple_gate(x) -> tuple[np.ndarray, float]:
    """Zero every tuple whose component mean is negative.

    The step at exactly zero passes (H(0) = 1). Returns the gated tensor and
    the fraction of tuples zeroed.
    """
    x = np.asarray(x, dtype=np.float64)
    keep = x.mean(axis=-1, keepdims=True) >= 0.0
    frac = 1.0 - float(keep.mean()) if keep.size else 0.0
    return x * keep, frac


def _bn_axes(x):
    # all axes except channel (-2) and tuple (-1)
    return tuple(range(x.ndim - 2))


def batchnorm_train(x, gamma, beta, eps: float = 1e-5):
    """Per (channel, component) standardisation over batch and spatial axes.

    Returns ``(out, batch_mean, batch_var, cache)``; ``batch_var`` is biased.
    """
    x = np.asarray(x, dtype=np.float64)
    axes = _bn_axes(x)
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, mu, var, (xhat, inv)


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps: float = 1e-5):
    return gamma * (x - running_mean) / np.sqrt(running_var + eps) + beta


def batchnorm_backward(g, gamma, cache):
    xhat, inv = cache
    axes = _bn_axes(g)
    m = np.prod([g.shape[a] for a in axes])
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    gx = g * gamma
    dx = inv / m * (m * gx - gx.sum(axis=axes) - xhat * (gx * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def flat_attention_score(k, q) -> np.ndarray:
    """Real attention scores ``<flatten(k_l), flatten(q_m)>`` for ``(heads, L, D, A)`` inputs."""
    k, q = np.asarray(k, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if k.shape[0] != q.shape[0] or k.shape[2:] != q.shape[2:]:
        raise ShapeError(f"key {k.shape} and query {q.shape} do not match")
    kf = k.reshape(k.shape[0], k.shape[1], -1)
    qf = q.reshape(q.shape[0], q.shape[1], -1)
    return kf @ np.swapaxes(qf, 1, 2)


def glorot_init(shape, algebra, rng_seed=None, fan_in: int | None = None,
                fan_out: int | None = None) -> np.ndarray:
    """Uniform Glorot draw for every tuple component independently.

    ``shape`` is the weight shape in tuples, e.g. ``(C_out, C_in)`` or
    ``(C_out, C_in, kh, kw)``; fans are counted in tuples.
    """
    algebra = AlgebraId.parse(algebra)
    shape = tuple(int(s) for s in shape)
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    if fan_in is None:
        fan_in = shape[1] * receptive if len(shape) > 1 else shape[0]
    if fan_out is None:
        fan_out = shape[0] * receptive
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return rng.uniform(-limit, limit, size=shape + (algebra.dim,))


def logits_readout(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(np.sum(x * x, axis=-1))


def lift_forward(x_real, weight, bias, hidden=None) -> np.ndarray:
    """Lift real ``(..., C)`` inputs to ``(..., C, A)`` tuples.

    Component 0 is the input itself; component ``m >= 1`` is
    ``x @ weight[m-1].T + bias[m-1]``. With ``hidden=(w1, b1)`` the extra
    components come from a one-hidden-layer ReLU MLP instead.
    """
    x = np.asarray(x_real, dtype=np.float64)
    src = x
    if hidden is not None:
        w1, b1 = hidden
        src = np.maximum(x @ w1.T + b1, 0.0)
    extra = np.einsum("mcf,...f->...cm", weight, src) + bias.T
    return np.concatenate([x[..., None], extra], axis=-1)
