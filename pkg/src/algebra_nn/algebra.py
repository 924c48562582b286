"""Algebra definitions: structure tables, product kernels, norms and oracles.

Every algebra is a real vector space of dimension ``dim`` whose elements are
stored as tuples (trailing array axis of length ``dim``). The product is
bilinear and fully described by a sparse list of signed structure constants
``(i, j, k, sign)``: left component ``i`` times right component ``j``
contributes ``sign * x_i * y_j`` to output component ``k``.

Matrix algebras use row-major component order, so ``(a, b, c, d)`` is
``[[a, b], [c, d]]``. ``M2C`` stores ``(Re a, Im a, Re b, Im b, Re c, Im c,
Re d, Im d)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, NamedTuple

import numpy as np

__all__ = [
    "AlgebraError",
    "DimensionError",
    "NoIdentityError",
    "Kind",
    "AlgebraId",
    "Entry",
    "StructureTable",
    "ALL_ALGEBRAS",
    "ASSOCIATIVE_ALGEBRAS",
    "structure_table",
    "mul_generic",
    "mul_fast",
    "add",
    "scale",
    "tuple_norm",
    "identity",
    "left_mul_matrix",
    "spectrum_2x2",
    "Spectrum2x2",
]


class AlgebraError(ValueError):
    """Base class for algebra related errors."""


class DimensionError(AlgebraError):
    """Tuple length does not match the algebra dimension."""


class NoIdentityError(AlgebraError):
    """Raised for non-unital algebras (the cross product)."""


class Kind(str, enum.Enum):
    REAL = "R"
    COMPLEX = "C"
    QUATERNION = "H"
    M2R = "M2R"
    M3R = "M3R"
    M4R = "M4R"
    M2C = "M2C"
    DUAL = "Dual"
    CROSS3 = "Cross3"
    DIAGONAL = "Diag"


_FIXED_DIMS = {
    Kind.REAL: 1,
    Kind.COMPLEX: 2,
    Kind.QUATERNION: 4,
    Kind.M2R: 4,
    Kind.M3R: 9,
    Kind.M4R: 16,
    Kind.M2C: 8,
    Kind.DUAL: 2,
    Kind.CROSS3: 3,
}

_ALIASES = {
    "r": Kind.REAL, "real": Kind.REAL,
    "c": Kind.COMPLEX, "complex": Kind.COMPLEX,
    "h": Kind.QUATERNION, "quaternion": Kind.QUATERNION,
    "m2r": Kind.M2R, "m3r": Kind.M3R, "m4r": Kind.M4R, "m2c": Kind.M2C,
    "dual": Kind.DUAL,
    "cross3": Kind.CROSS3, "cross": Kind.CROSS3,
    "diag": Kind.DIAGONAL, "diagonal": Kind.DIAGONAL,
}


@dataclass(frozen=True)
class AlgebraId:
    """Identifies one supported algebra. ``n`` is only used by ``Diag``."""

    kind: Kind
    n: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.DIAGONAL:
            if int(self.n) < 1:
                raise AlgebraError(f"Diagonal algebra needs n >= 1, got {self.n}")
            object.__setattr__(self, "n", int(self.n))
        elif self.n:
            raise AlgebraError(f"{self.kind.value} takes no parameter")

    @classmethod
    def parse(cls, text: str | "AlgebraId") -> "AlgebraId":
        """Parse tags like ``"M2R"``, ``"H"``, ``"diag"``, ``"Diag4"`` or ``"diag:8"``."""
        if isinstance(text, AlgebraId):
            return text
        key = str(text).strip().lower().replace("(", ":").rstrip(")")
        for prefix in ("diagonal", "diag"):
            if key.startswith(prefix):
                rest = key[len(prefix):].lstrip(":")
                return cls(Kind.DIAGONAL, int(rest) if rest else 4)
        if key not in _ALIASES:
            raise AlgebraError(f"unknown algebra {text!r}")
        return cls(_ALIASES[key])

    @property
    def dim(self) -> int:
        if self.kind is Kind.DIAGONAL:
            return self.n
        return _FIXED_DIMS[self.kind]

    @property
    def tag(self) -> str:
        if self.kind is Kind.DIAGONAL:
            return f"Diag{self.n}"
        return self.kind.value

    @property
    def is_associative(self) -> bool:
        return self.kind is not Kind.CROSS3

    @property
    def is_unital(self) -> bool:
        return self.kind is not Kind.CROSS3

    def __str__(self) -> str:
        return self.tag


REAL = AlgebraId(Kind.REAL)
COMPLEX = AlgebraId(Kind.COMPLEX)
QUATERNION = AlgebraId(Kind.QUATERNION)
M2R = AlgebraId(Kind.M2R)
M3R = AlgebraId(Kind.M3R)
M4R = AlgebraId(Kind.M4R)
M2C = AlgebraId(Kind.M2C)
DUAL = AlgebraId(Kind.DUAL)
CROSS3 = AlgebraId(Kind.CROSS3)
DIAG4 = AlgebraId(Kind.DIAGONAL, 4)

ALL_ALGEBRAS = (REAL, COMPLEX, M2R, M3R, M4R, M2C, QUATERNION, DIAG4, DUAL, CROSS3)
ASSOCIATIVE_ALGEBRAS = tuple(a for a in ALL_ALGEBRAS if a.is_associative)


class Entry(NamedTuple):
    i: int
    j: int
    k: int
    sign: int


@dataclass(frozen=True)
class StructureTable:
    """Sparse signed structure constants of a bilinear product."""

    dim: int
    entries: tuple[Entry, ...]

    def __post_init__(self):
        if self.dim < 1:
            raise AlgebraError("dim must be positive")
        entries = tuple(Entry(*map(int, e)) for e in self.entries)
        seen = set()
        for e in entries:
            if not all(0 <= v < self.dim for v in (e.i, e.j, e.k)):
                raise AlgebraError(f"entry {e} out of range for dim {self.dim}")
            if e.sign not in (1, -1):
                raise AlgebraError(f"entry {e} has sign other than +-1")
            if (e.i, e.j, e.k) in seen:
                raise AlgebraError(f"duplicate entry {e[:3]}")
            seen.add((e.i, e.j, e.k))
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def dense(self) -> np.ndarray:
        """Return the ``(dim, dim, dim)`` coefficient array ``c[i, j, k]``."""
        c = np.zeros((self.dim,) * 3)
        for e in self.entries:
            c[e.i, e.j, e.k] = e.sign
        return c

    def by_output(self) -> list[list[Entry]]:
        """Entries grouped per output component, preserving table order."""
        groups: list[list[Entry]] = [[] for _ in range(self.dim)]
        for e in self.entries:
            groups[e.k].append(e)
        return groups

    def dump(self) -> str:
        """Plain-text dump: a ``dim`` header line then one ``i j k sign`` line per entry."""
        lines = [f"dim {self.dim}"]
        lines += [f"{e.i} {e.j} {e.k} {'+' if e.sign > 0 else '-'}1" for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "StructureTable":
        dim = None
        entries = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "dim":
                dim = int(parts[1])
                continue
            i, j, k, s = parts
            entries.append((int(i), int(j), int(k), int(s)))
        if dim is None:
            dim = 1 + max(max(e[:3]) for e in entries)
        return cls(dim, tuple(entries))


def _parse_grid(rows: Iterable[str], names: str) -> tuple[Entry, ...]:
    """Read an interaction grid: row = left index, column = right index,
    cell = signed output component name, ``0`` for no interaction."""
    entries = []
    for i, row in enumerate(rows):
        for j, cell in enumerate(row.split()):
            if cell == "0":
                continue
            sign = -1 if cell.startswith("-") else 1
            entries.append(Entry(i, j, names.index(cell.lstrip("-")), sign))
    return tuple(entries)


_GRIDS = {
    Kind.REAL: ("a", ["a"]),
    Kind.COMPLEX: ("ab", ["a b",
                          "b -a"]),
    Kind.M2R: ("abcd", ["a b 0 0",
                        "0 0 a b",
                        "c d 0 0",
                        "0 0 c d"]),
    Kind.QUATERNION: ("abcd", ["a b c d",
                               "b -a d -c",
                               "c -d -a b",
                               "d c -b -a"]),
    Kind.M2C: ("abcdefgh", ["a b c d 0 0 0 0",
                            "b -a d -c 0 0 0 0",
                            "0 0 0 0 a b c d",
                            "0 0 0 0 b -a d -c",
                            "e f g h 0 0 0 0",
                            "f -e h -g 0 0 0 0",
                            "0 0 0 0 e f g h",
                            "0 0 0 0 f -e h -g"]),
    Kind.DUAL: ("ab", ["a b",
                       "b 0"]),
    Kind.CROSS3: ("abc", ["0 c -b",
                          "-c 0 a",
                          "b -a 0"]),
}


def _matrix_entries(n: int) -> tuple[Entry, ...]:
    # (r, m) of the left matrix times (m, c) of the right matrix -> (r, c)
    entries = []
    for r in range(n):
        for m in range(n):
            for c in range(n):
                entries.append(Entry(r * n + m, m * n + c, r * n + c, 1))
    return tuple(entries)


@lru_cache(maxsize=None)
def structure_table(algebra: AlgebraId | str) -> StructureTable:
    algebra = AlgebraId.parse(algebra)
    kind = algebra.kind
    if kind in _GRIDS:
        names, rows = _GRIDS[kind]
        return StructureTable(len(names), _parse_grid(rows, names))
    if kind is Kind.M3R:
        return StructureTable(9, _matrix_entries(3))
    if kind is Kind.M4R:
        return StructureTable(16, _matrix_entries(4))
    if kind is Kind.DIAGONAL:
        return StructureTable(algebra.n, tuple(Entry(i, i, i, 1) for i in range(algebra.n)))
    raise AlgebraError(f"no table for {algebra}")  # pragma: no cover


def _check_dim(dim: int, *arrays: np.ndarray) -> None:
    for a in arrays:
        if a.shape[-1:] != (dim,):
            raise DimensionError(f"expected trailing tuple axis of length {dim}, got shape {a.shape}")


def mul_generic(table: StructureTable, x, y) -> np.ndarray:
    """Reference product ``out_k = sum(sign * x_i * y_j)`` over table entries.

    Works on single tuples or on broadcastable stacks of tuples.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_dim(table.dim, x, y)
    shape = np.broadcast_shapes(x.shape, y.shape)
    out = np.zeros(shape)
    for e in table.entries:
        out[..., e.k] += e.sign * x[..., e.i] * y[..., e.j]
    return out


def add(x, y) -> np.ndarray:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape[-1:] != y.shape[-1:]:
        raise DimensionError(f"cannot add tuples of shapes {x.shape} and {y.shape}")
    return x + y


def scale(x, s: float) -> np.ndarray:
    return float(s) * np.asarray(x, dtype=np.float64)


def tuple_norm(x) -> np.ndarray | float:
    """L2 norm over the trailing tuple axis."""
    x = np.asarray(x, dtype=np.float64)
    n = np.sqrt(np.sum(x * x, axis=-1))
    return float(n) if n.ndim == 0 else n


def identity(algebra: AlgebraId | str) -> np.ndarray:
    algebra = AlgebraId.parse(algebra)
    kind = algebra.kind
    if kind is Kind.CROSS3:
        raise NoIdentityError("the cross product algebra has no multiplicative identity")
    e = np.zeros(algebra.dim)
    if kind in (Kind.M2R, Kind.M3R, Kind.M4R):
        n = math.isqrt(algebra.dim)
        e[:: n + 1] = 1.0
    elif kind is Kind.M2C:
        e[0] = e[6] = 1.0
    elif kind is Kind.DIAGONAL:
        e[:] = 1.0
    else:
        e[0] = 1.0
    return e


def left_mul_matrix(table: StructureTable, x) -> np.ndarray:
    """Regular representation: ``L(x) @ y == mul_generic(table, x, y)``."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(table.dim, x)
    out = np.zeros(x.shape + (table.dim,))
    for e in table.entries:
        out[..., e.k, e.j] += e.sign * x[..., e.i]
    return out


class Spectrum2x2(NamedTuple):
    eig_moduli: tuple[float, float]
    singular_values: tuple[float, float]
    det: float


def spectrum_2x2(x) -> Spectrum2x2:
    """Eigenvalue moduli, singular values (both descending) and determinant
    of the M2R tuple ``(a, b, c, d) = [[a, b], [c, d]]``.

    A complex-conjugate eigenvalue pair is reported by its common modulus
    ``sqrt(det)``.
    """
    a, b, c, d = (float(v) for v in np.asarray(x, dtype=np.float64).reshape(4))
    det = a * d - b * c
    tr = a + d
    disc = tr * tr - 4.0 * det
    if disc >= 0.0:
        r = math.sqrt(disc)
        l1, l2 = abs(0.5 * (tr + r)), abs(0.5 * (tr - r))
        eig = (max(l1, l2), min(l1, l2))
    else:
        m = math.sqrt(det)
        eig = (m, m)
    fro2 = a * a + b * b + c * c + d * d
    gap = math.sqrt(max(fro2 * fro2 - 4.0 * det * det, 0.0))
    s1 = math.sqrt(0.5 * (fro2 + gap))
    # sigma_1 * sigma_2 = |det| keeps sigma_2 accurate when it is tiny
    s2 = abs(det) / s1 if s1 > 0.0 else 0.0
    return Spectrum2x2(eig, (s1, s2), det)


# Specialised kernels. Each output component accumulates its terms left to
# right in table order, so results match mul_generic; no sign multiplies.

def _k_real(x, y):
    return x * y


def _k_complex(x, y):
    a, b = x[..., 0], x[..., 1]
    c, d = y[..., 0], y[..., 1]
    return np.stack([a * c - b * d, a * d + b * c], axis=-1)


def _k_dual(x, y):
    a, b = x[..., 0], x[..., 1]
    c, d = y[..., 0], y[..., 1]
    return np.stack([a * c, a * d + b * c], axis=-1)


def _k_cross3(x, y):
    x0, x1, x2 = x[..., 0], x[..., 1], x[..., 2]
    y0, y1, y2 = y[..., 0], y[..., 1], y[..., 2]
    return np.stack([x1 * y2 - x2 * y1, x2 * y0 - x0 * y2, x0 * y1 - x1 * y0], axis=-1)


def _k_quaternion(x, y):
    a, b, c, d = (x[..., i] for i in range(4))
    e, f, g, h = (y[..., i] for i in range(4))
    return np.stack([
        a * e - b * f - c * g - d * h,
        a * f + b * e + c * h - d * g,
        a * g - b * h + c * e + d * f,
        a * h + b * g - c * f + d * e,
    ], axis=-1)


def _k_m2r(x, y):
    a, b, c, d = (x[..., i] for i in range(4))
    e, f, g, h = (y[..., i] for i in range(4))
    return np.stack([a * e + b * g, a * f + b * h, c * e + d * g, c * f + d * h], axis=-1)


def _matmul_kernel(n: int):
    def kernel(x, y):
        xs = [x[..., i] for i in range(n * n)]
        ys = [y[..., i] for i in range(n * n)]
        out = []
        for r in range(n):
            for c in range(n):
                acc = xs[r * n] * ys[c]
                for m in range(1, n):
                    acc = acc + xs[r * n + m] * ys[m * n + c]
                out.append(acc)
        return np.stack(out, axis=-1)
    return kernel


def _k_m2c(x, y):
    xa, xb, xc, xd, xe, xf, xg, xh = (x[..., i] for i in range(8))
    ya, yb, yc, yd, ye, yf, yg, yh = (y[..., i] for i in range(8))
    return np.stack([
        xa * ya - xb * yb + xc * ye - xd * yf,
        xa * yb + xb * ya + xc * yf + xd * ye,
        xa * yc - xb * yd + xc * yg - xd * yh,
        xa * yd + xb * yc + xc * yh + xd * yg,
        xe * ya - xf * yb + xg * ye - xh * yf,
        xe * yb + xf * ya + xg * yf + xh * ye,
        xe * yc - xf * yd + xg * yg - xh * yh,
        xe * yd + xf * yc + xg * yh + xh * yg,
    ], axis=-1)


_FAST = {
    Kind.REAL: _k_real,
    Kind.COMPLEX: _k_complex,
    Kind.QUATERNION: _k_quaternion,
    Kind.M2R: _k_m2r,
    Kind.M3R: _matmul_kernel(3),
    Kind.M4R: _matmul_kernel(4),
    Kind.M2C: _k_m2c,
    Kind.DUAL: _k_dual,
    Kind.CROSS3: _k_cross3,
    Kind.DIAGONAL: _k_real,
}


def mul_fast(algebra: AlgebraId | str, x, y) -> np.ndarray:
    """Hand-specialised product. Keeps the input float dtype (32 or 64 bit).

    Uses exactly the per-product multiply count of the algebra's table.
    """
    algebra = AlgebraId.parse(algebra)
    if not isinstance(x, np.ndarray):
        x = np.asarray(x, dtype=np.float64)
    if not isinstance(y, np.ndarray):
        y = np.asarray(y, dtype=np.float64)
    _check_dim(algebra.dim, x, y)
    return _FAST[algebra.kind](x, y)
