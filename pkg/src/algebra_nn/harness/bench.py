"""Micro-benchmarks of the fast algebra kernels, with exact multiply counting.

Counting runs the kernels on :class:`CountingArray` operands, which tally the
elements produced by every ``np.multiply``. Timing runs use plain arrays.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from ..algebra import ALL_ALGEBRAS, AlgebraId, mul_fast
from ..cost import product_cost

BYTES_PER_VALUE = 8


class CountingArray(np.ndarray):
    """ndarray view whose ``np.multiply`` calls add to a shared counter."""

    counter = {"multiplies": 0}

    @classmethod
    def wrap(cls, a) -> "CountingArray":
        return np.asarray(a).view(cls)

    @classmethod
    def reset(cls) -> None:
        cls.counter["multiplies"] = 0

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        plain = [np.asarray(x) if isinstance(x, CountingArray) else x for x in inputs]
        if "out" in kwargs:
            kwargs["out"] = tuple(np.asarray(o) if isinstance(o, CountingArray) else o for o in kwargs["out"])
        result = getattr(ufunc, method)(*plain, **kwargs)
        if ufunc is np.multiply and method == "__call__":
            CountingArray.counter["multiplies"] += int(np.size(result))
        if isinstance(result, np.ndarray) and method == "__call__":
            return result.view(CountingArray)
        return result


# kernels: every algebra product goes through mul_fast, sums are plain adds


def matvec(algebra, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``w (M, N, A) @ x (N, A) -> (M, A)``."""
    return mul_fast(algebra, w, x[None]).sum(axis=1)


def matmul(algebra, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``w (M, N, A) @ x (N, P, A) -> (M, P, A)``."""
    return mul_fast(algebra, w[:, :, None, :], x[None]).sum(axis=1)


def depthwise_conv(algebra, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid depthwise conv: ``x (H, W, C, A)``, ``w (kh, kw, C, A)`` -> ``(Ho, Wo, C, A)``."""
    kh, kw = w.shape[:2]
    ho, wo = x.shape[0] - kh + 1, x.shape[1] - kw + 1
    out = None
    for u in range(kh):
        for v in range(kw):
            term = mul_fast(algebra, w[u, v], x[u:u + ho, v:v + wo])
            out = term if out is None else out + term
    return out


KERNELS = ("matvec", "matmul", "dwconv")
DEFAULT_SHAPES = {"matvec": (64, 64), "matmul": (16, 16, 16), "dwconv": (10, 10, 4, 3)}


def tuple_products(kernel: str, shape: tuple[int, ...]) -> int:
    if kernel == "matvec":
        m, n = shape
        return m * n
    if kernel == "matmul":
        m, n, p = shape
        return m * n * p
    if kernel == "dwconv":
        h, w, c, k = shape
        return (h - k + 1) * (w - k + 1) * c * k * k
    raise ValueError(f"unknown kernel {kernel!r}")


def make_operands(kernel: str, shape, dim: int, rng: np.random.Generator):
    if kernel == "matvec":
        m, n = shape
        return rng.normal(size=(m, n, dim)), rng.normal(size=(n, dim))
    if kernel == "matmul":
        m, n, p = shape
        return rng.normal(size=(m, n, dim)), rng.normal(size=(n, p, dim))
    h, w, c, k = shape
    return rng.normal(size=(h, w, c, dim)), rng.normal(size=(k, k, c, dim))


def run_kernel(kernel: str, algebra, a, b):
    fn = {"matvec": matvec, "matmul": matmul, "dwconv": depthwise_conv}[kernel]
    return fn(algebra, a, b)


@dataclass
class BenchRow:
    algebra: str
    kernel: str
    shape: str
    tuple_products: int
    analytic_density: float
    predicted_multiplies: int
    counted_multiplies: int | None = None
    operand_bytes: int | None = None
    multiplies_per_byte: float | None = None
    wall_time_s: float | None = None
    repetitions: int = 0


BENCH_COLUMNS = ("algebra", "kernel", "shape", "tuple_products", "analytic_density", "predicted_multiplies",
                 "counted_multiplies", "operand_bytes", "multiplies_per_byte", "wall_time_s", "repetitions")


def count_multiplies(kernel: str, algebra, shape, seed: int = 0) -> int:
    dim = AlgebraId.parse(algebra).dim
    a, b = make_operands(kernel, shape, dim, np.random.default_rng(seed))
    CountingArray.reset()
    run_kernel(kernel, algebra, CountingArray.wrap(a), CountingArray.wrap(b))
    return CountingArray.counter["multiplies"]


def bench_one(kernel: str, algebra, shape, repetitions: int = 5, seed: int = 0) -> BenchRow:
    """Measure one kernel. ``repetitions=0`` fills the analytic columns only."""
    alg = AlgebraId.parse(algebra)
    pc = product_cost(alg)
    n = tuple_products(kernel, shape)
    row = BenchRow(alg.tag, kernel, "x".join(map(str, shape)), n, pc.density, n * pc.multiplies,
                   repetitions=repetitions)
    if repetitions <= 0:
        return row
    row.counted_multiplies = count_multiplies(kernel, alg, shape, seed)
    # each product streams one weight tuple and one activation tuple
    row.operand_bytes = n * 2 * alg.dim * BYTES_PER_VALUE
    row.multiplies_per_byte = row.counted_multiplies / row.operand_bytes
    a, b = make_operands(kernel, shape, alg.dim, np.random.default_rng(seed))
    run_kernel(kernel, alg, a, b)  # warm-up
    times = []
    for _ in range(repetitions):
        t = time.perf_counter()
        run_kernel(kernel, alg, a, b)
        times.append(time.perf_counter() - t)
    row.wall_time_s = float(np.median(times))
    return row


def sweep(algebras=None, kernels=KERNELS, shapes=None, repetitions: int = 5, seed: int = 0) -> list[BenchRow]:
    algebras = [AlgebraId.parse(a) for a in algebras] if algebras else list(ALL_ALGEBRAS)
    shapes = {**DEFAULT_SHAPES, **(shapes or {})}
    return [bench_one(k, a, shapes[k], repetitions, seed) for a in algebras for k in kernels]


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        vals = [getattr(r, c) for c in BENCH_COLUMNS]
        w.writerow(["" if v is None else (f"{v:.6g}" if isinstance(v, float) else v) for v in vals])
    return buf.getvalue()
