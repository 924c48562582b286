"""Quick programmatic invariant checks, used by ``algebra-nn selftest``."""

from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from .. import autodiff as ad
from ..algebra import (ALL_ALGEBRAS, ASSOCIATIVE_ALGEBRAS, identity, mul_fast, mul_generic,
                       structure_table)
from ..cost import LayerSpec, layer_cost, product_cost, table_cost
from ..nn import ops
from ..nn.serialize import dumps_arrays, loads_arrays
from ..pruning import PruneSchedule, target_sparsity
from .bench import DEFAULT_SHAPES, KERNELS, count_multiplies, tuple_products

Check = tuple[str, bool, str]


def _axioms() -> Check:
    rng = np.random.default_rng(0)
    worst = 0.0
    for alg in ALL_ALGEBRAS:
        t = structure_table(alg)
        x, y, z = rng.normal(size=(3, 50, alg.dim))
        a, b = rng.normal(size=2)
        lhs = mul_generic(t, a * x + b * y, z)
        worst = max(worst, np.abs(lhs - a * mul_generic(t, x, z) - b * mul_generic(t, y, z)).max())
        if alg in ASSOCIATIVE_ALGEBRAS:
            worst = max(worst, np.abs(mul_generic(t, mul_generic(t, x, y), z)
                                      - mul_generic(t, x, mul_generic(t, y, z))).max())
            e = identity(alg)
            worst = max(worst, np.abs(mul_generic(t, e, x) - x).max(), np.abs(mul_generic(t, x, e) - x).max())
    return "algebra axioms", worst < 1e-10, f"max residual {worst:.2e}"


def _fast_kernels() -> Check:
    rng = np.random.default_rng(1)
    worst = 0
    for alg in ALL_ALGEBRAS:
        x, y = rng.normal(size=(2, 200, alg.dim))
        ref = mul_generic(structure_table(alg), x, y)
        fast = mul_fast(alg, x, y)
        ulps = np.abs(fast - ref) / np.spacing(np.maximum(np.abs(ref), np.finfo(float).tiny))
        worst = max(worst, float(ulps.max()))
    return "fast kernels match generic", worst <= 4, f"max {worst:.0f} ulps"


def _cost_table() -> Check:
    bad = [a.tag for a in ALL_ALGEBRAS if table_cost(structure_table(a)).multiplies != product_cost(a).multiplies]
    return "multiply counts match tables", not bad, f"mismatched: {bad}" if bad else "all agree"


def _param_ratio() -> Check:
    real = layer_cost(LayerSpec("r", "linear", "R", 64, 64, bias=False))
    mat = layer_cost(LayerSpec("m", "linear", "M2R", 16, 16, bias=False))
    ratio = mat.real_params / real.real_params
    dens = (real.multiplies / real.values_loaded, mat.multiplies / mat.values_loaded)
    ok = ratio == 0.25 and dens == (0.5, 1.0)
    return "2x2 matrix vs real layer", ok, f"param ratio {ratio}, density {dens}"


def _gradients() -> Check:
    worst = 0.0
    for alg in ALL_ALGEBRAS:
        t = structure_table(alg)

        def frag(tape, v, t=t):
            return ad.total(ad.activation(ops.linear(v["x"], v["w"], v["b"], t), "tanh"))

        worst = max(worst, ad.grad_check(frag, lambda r, d=alg.dim: {
            "x": r.normal(size=(2, 3, d)), "w": r.normal(size=(2, 3, d)), "b": r.normal(size=(2, d))}))
    return "linear layer gradients", worst < 1e-6, f"max relative error {worst:.2e}"


def _schedule() -> Check:
    s = PruneSchedule(10000, 0.8, interval=1)
    mid = target_sparsity(s, 5000)
    return "pruning schedule midpoint", abs(mid - 0.7) < 1e-12, f"target at midpoint {mid}"


def _bench_counts() -> Check:
    bad = []
    for alg in ALL_ALGEBRAS:
        for k in KERNELS:
            want = tuple_products(k, DEFAULT_SHAPES[k]) * product_cost(alg).multiplies
            if count_multiplies(k, alg, DEFAULT_SHAPES[k]) != want:
                bad.append(f"{alg.tag}/{k}")
    return "benchmark multiply counts", not bad, f"mismatched: {bad}" if bad else "all agree"


def _checkpoint() -> Check:
    arrays = {"w": np.random.default_rng(2).normal(size=(3, 4, 2))}
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "x.ckpt"
        path.write_bytes(dumps_arrays(arrays, "C", {"k": 1}))
        back, alg, meta = loads_arrays(path.read_bytes())
    ok = alg == "C" and meta == {"k": 1} and np.array_equal(back["w"], arrays["w"])
    return "checkpoint round trip", ok, "bit exact" if ok else "mismatch"


CHECKS: list[Callable[[], Check]] = [_axioms, _fast_kernels, _cost_table, _param_ratio, _gradients,
                                     _schedule, _bench_counts, _checkpoint]


def run_all() -> list[Check]:
    results = []
    for fn in CHECKS:
        try:
            results.append(fn())
        except Exception as exc:  # a crashing check is a failing check
            results.append((fn.__name__.strip("_"), False, f"{type(exc).__name__}: {exc}"))
    return results
