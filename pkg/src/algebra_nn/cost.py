"""Static parameter / multiply / load accounting for algebra layers.

"Multiplies" counts real multiplications (one multiply-add each). Adds are
reported separately. Activation and normalisation costs are excluded unless
``include_pointwise`` is set, in which case they count one op per component.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, asdict
from typing import Iterable, Mapping, Sequence

import numpy as np

from .algebra import AlgebraId, Kind, StructureTable, structure_table

__all__ = [
    "ProductCost",
    "LayerSpec",
    "CostRow",
    "CostReport",
    "product_cost",
    "table_cost",
    "compute_density",
    "layer_cost",
    "model_cost",
    "COST_CSV_VERSION",
    "COST_COLUMNS",
]

COST_CSV_VERSION = 1
COST_COLUMNS = ("layer", "algebra", "tuples_in", "tuples_out", "real_params",
                "multiplies", "adds", "values_loaded")


@dataclass(frozen=True)
class ProductCost:
    multiplies: int
    values_loaded: int
    weight_size: int
    weight_reuse: int | None

    @property
    def density(self) -> float:
        return self.multiplies / self.values_loaded


# (multiplies, values loaded, weight size, weight reuse) per product
_PRODUCT_COSTS = {
    Kind.REAL: (1, 2, 1, 1),
    Kind.COMPLEX: (4, 4, 2, 2),
    Kind.M2R: (8, 8, 4, 2),
    Kind.M3R: (27, 18, 9, 3),
    Kind.M4R: (64, 32, 16, 4),
    Kind.M2C: (32, 16, 8, 4),
    Kind.QUATERNION: (16, 8, 4, 4),
    Kind.DUAL: (3, 4, 2, None),
    Kind.CROSS3: (6, 6, 3, 2),
}


def product_cost(algebra: AlgebraId | str) -> ProductCost:
    algebra = AlgebraId.parse(algebra)
    if algebra.kind is Kind.DIAGONAL:
        n = algebra.n
        return ProductCost(n, 2 * n, n, 1)
    return ProductCost(*_PRODUCT_COSTS[algebra.kind])


def table_cost(table: StructureTable) -> ProductCost:
    """Cost of a product given only its structure table (for custom algebras)."""
    touched = {}
    for e in table.entries:
        touched.setdefault(e.i, set()).add(e.k)
    reuse = max((len(v) for v in touched.values()), default=0) or None
    return ProductCost(len(table.entries), 2 * table.dim, table.dim, reuse)


def compute_density(algebra: AlgebraId | str) -> float:
    return product_cost(algebra).density


@dataclass(frozen=True)
class LayerSpec:
    """Shape description of one layer, with widths counted in tuples.

    ``kind`` is one of ``linear``, ``conv2d``, ``gru``, ``lift``,
    ``embedding`` or ``pointwise``. ``positions`` is how many times the
    weights are applied per sample (output pixels for a conv, time steps
    for a GRU). For ``lift`` layers widths are real channels.
    """

    name: str
    kind: str
    algebra: AlgebraId
    tuples_in: int
    tuples_out: int
    kernel: tuple[int, int] = (1, 1)
    positions: int = 1
    bias: bool = True
    hidden: int = 0  # lift MLP hidden width, 0 for a single affine map

    @property
    def weight_tuples(self) -> int:
        kh, kw = self.kernel
        if self.kind == "gru":
            return 3 * (self.tuples_in * self.tuples_out + self.tuples_out * self.tuples_out)
        if self.kind in ("linear", "conv2d"):
            return self.tuples_out * self.tuples_in * kh * kw
        return 0


@dataclass
class CostRow:
    layer: str
    algebra: str
    tuples_in: int
    tuples_out: int
    real_params: int
    multiplies: int
    adds: int
    values_loaded: int

    def as_tuple(self):
        return tuple(getattr(self, c) for c in COST_COLUMNS)


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)

    @property
    def real_params(self) -> int:
        return sum(r.real_params for r in self.rows)

    @property
    def multiplies(self) -> int:
        return sum(r.multiplies for r in self.rows)

    @property
    def adds(self) -> int:
        return sum(r.adds for r in self.rows)

    @property
    def values_loaded(self) -> int:
        return sum(r.values_loaded for r in self.rows)

    def totals(self) -> CostRow:
        return CostRow("TOTAL", "", sum(r.tuples_in for r in self.rows),
                       sum(r.tuples_out for r in self.rows), self.real_params,
                       self.multiplies, self.adds, self.values_loaded)

    def to_csv(self, extra: Mapping[str, Sequence] | None = None, totals: bool = True) -> str:
        """CSV text: a version comment line, the fixed header, one row per layer.

        ``extra`` appends named columns (one value per row, plus one for the
        totals row when ``totals`` is set).
        """
        buf = io.StringIO()
        buf.write(f"# cost-csv v{COST_CSV_VERSION}\n")
        w = csv.writer(buf, lineterminator="\n")
        extra = dict(extra or {})
        w.writerow(list(COST_COLUMNS) + list(extra))
        rows = list(self.rows) + ([self.totals()] if totals else [])
        for n, row in enumerate(rows):
            w.writerow(list(row.as_tuple()) + [_fmt(col[n]) for col in extra.values()])
        return buf.getvalue()


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else v


def _adds_per_product(algebra: AlgebraId) -> int:
    table = structure_table(algebra)
    outputs = {e.k for e in table.entries}
    return len(table.entries) - len(outputs)


def layer_cost(spec: LayerSpec, include_pointwise: bool = False) -> CostRow:
    algebra = AlgebraId.parse(spec.algebra)
    dim = algebra.dim
    pc = product_cost(algebra)
    kh, kw = spec.kernel
    if spec.tuples_in < 0 or spec.tuples_out < 0 or spec.positions < 0:
        raise ValueError(f"layer {spec.name!r} has an unspecified shape")
    if spec.kind in ("linear", "conv2d", "gru"):
        products = spec.weight_tuples * spec.positions
        n_bias = spec.tuples_out * (6 if spec.kind == "gru" else 1) if spec.bias else 0
        params = (spec.weight_tuples + n_bias) * dim
        mults = products * pc.multiplies
        # adds inside each product, then across the fan-in, then the bias
        fan = spec.tuples_in * kh * kw
        n_out = spec.tuples_out * spec.positions
        if spec.kind == "gru":
            accum = 3 * n_out * dim * (spec.tuples_in + spec.tuples_out - 1)
        else:
            accum = n_out * dim * (fan - 1)
        adds = products * _adds_per_product(algebra) + accum + (n_bias * spec.positions * dim if spec.bias else 0)
        loaded = products * pc.values_loaded
    elif spec.kind == "lift":
        c, extra = spec.tuples_in, dim - 1
        if spec.hidden:
            h = spec.hidden
            weights = h * c + extra * c * h
            biases = h + extra * c
        else:
            weights = extra * c * c
            biases = extra * c
        params = weights + biases
        mults = weights * spec.positions
        # every affine output sums its fan-in products plus one bias
        adds = weights * spec.positions
        loaded = 2 * mults
    elif spec.kind == "embedding":
        params = spec.tuples_in * spec.tuples_out
        mults = adds = loaded = 0
    elif spec.kind == "pointwise":
        params = 0
        n = spec.tuples_out * spec.positions * dim
        mults = n if include_pointwise else 0
        adds = 0
        loaded = n if include_pointwise else 0
    else:
        raise ValueError(f"unknown layer kind {spec.kind!r}")
    return CostRow(spec.name, algebra.tag, spec.tuples_in, spec.tuples_out, int(params),
                   int(mults), int(max(adds, 0)), int(loaded))


def model_cost(specs: Iterable[LayerSpec], mask: Mapping[str, np.ndarray] | None = None,
               mode: str = "tuple", include_pointwise: bool = False) -> CostReport:
    """Aggregate :func:`layer_cost`. With a tuple ``mask`` (True = kept) each
    masked weight tuple removes its products at every position; component
    masks only remove parameters."""
    specs = list(specs)
    report = CostReport()
    names = {s.name for s in specs}
    if mask is not None:
        unknown = set(mask) - names
        if unknown:
            raise ValueError(f"mask has layers not in the model: {sorted(unknown)}")
    for spec in specs:
        row = layer_cost(spec, include_pointwise)
        if mask is not None and spec.name in mask:
            m = np.asarray(mask[spec.name], dtype=bool)
            dim = AlgebraId.parse(spec.algebra).dim
            if mode == "tuple":
                if m.size != spec.weight_tuples:
                    raise ValueError(f"mask for {spec.name!r} has {m.size} tuples, layer has {spec.weight_tuples}")
                masked = int(m.size - m.sum())
                pc = product_cost(spec.algebra)
                row.real_params -= masked * dim
                row.multiplies -= masked * spec.positions * pc.multiplies
                row.values_loaded -= masked * spec.positions * pc.values_loaded
                row.adds -= masked * spec.positions * (_adds_per_product(AlgebraId.parse(spec.algebra)) + dim)
                row.adds = max(row.adds, 0)
            else:
                if m.size != spec.weight_tuples * dim:
                    raise ValueError(f"component mask for {spec.name!r} has wrong size {m.size}")
                row.real_params -= int(m.size - m.sum())
        report.rows.append(row)
    return report


def report_to_dict(report: CostReport) -> dict:
    return {"rows": [asdict(r) for r in report.rows], "totals": asdict(report.totals())}
