"""Tuple-granular magnitude pruning on a cubic sparsity ramp.

Masks store ``True`` for kept weights. In ``tuple`` mode a mask has the
weight shape without the tuple axis and a masked tuple removes its whole
product; in ``component`` mode it has the full weight shape and only
removes parameters.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .algebra import AlgebraId, Kind
from .cost import LayerSpec, model_cost

__all__ = [
    "PruneSchedule",
    "Criterion",
    "UnsupportedCriterionError",
    "PruneMask",
    "target_sparsity",
    "criterion_score",
    "prune_step",
    "apply_mask",
    "sparsity_report",
    "SparsityRow",
    "save_mask",
    "load_mask",
]


@dataclass(frozen=True)
class PruneSchedule:
    total_steps: int
    final_sparsity: float
    start_fraction: float = 0.2
    end_fraction: float = 0.8
    interval: int = 100

    def __post_init__(self):
        if not 0.0 <= self.final_sparsity < 1.0:
            raise ValueError("final_sparsity must lie in [0, 1)")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if not self.start < self.end <= self.total_steps:
            raise ValueError(f"need start < end <= total_steps, got {self.start}, {self.end}, {self.total_steps}")

    @property
    def start(self) -> int:
        return int(round(self.start_fraction * self.total_steps))

    @property
    def end(self) -> int:
        return int(round(self.end_fraction * self.total_steps))

    def boundaries(self) -> list[int]:
        """Pruning steps: every ``interval`` from ``start``, plus ``end``."""
        steps = list(range(self.start, self.end + 1, self.interval))
        if steps[-1] != self.end:
            steps.append(self.end)
        return steps

    def is_boundary(self, step: int) -> bool:
        return self.start <= step <= self.end and ((step - self.start) % self.interval == 0 or step == self.end)


def target_sparsity(schedule: PruneSchedule, step: int) -> float:
    """``s_f * (1 - (1 - progress)^3)``, held constant between pruning steps."""
    s = schedule
    if step < s.start:
        return 0.0
    if step >= s.end:
        return s.final_sparsity
    held = s.start + ((step - s.start) // s.interval) * s.interval
    progress = (held - s.start) / (s.end - s.start)
    return s.final_sparsity * (1.0 - (1.0 - progress) ** 3)


class Criterion(str, enum.Enum):
    FROBENIUS = "frobenius"
    DETERMINANT = "determinant"
    MIN_EIGENVALUE = "min_eigenvalue"
    MAX_EIGENVALUE = "max_eigenvalue"
    COMPONENT = "component"


class UnsupportedCriterionError(ValueError):
    pass


def _eig_moduli(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b, c, d = (t[..., i] for i in range(4))
    det = a * d - b * c
    tr = a + d
    disc = tr * tr - 4.0 * det
    r = np.sqrt(np.maximum(disc, 0.0))
    l1, l2 = np.abs(0.5 * (tr + r)), np.abs(0.5 * (tr - r))
    cplx = np.sqrt(np.maximum(det, 0.0))
    hi = np.where(disc >= 0.0, np.maximum(l1, l2), cplx)
    lo = np.where(disc >= 0.0, np.minimum(l1, l2), cplx)
    return lo, hi


def criterion_score(tuples, criterion: Criterion | str, algebra="M2R") -> np.ndarray:
    """Score tuples (trailing axis) for pruning; lower scores are pruned first.

    ``component`` scores every component by its absolute value and keeps
    the tuple axis.
    """
    criterion = Criterion(criterion)
    algebra = AlgebraId.parse(algebra)
    t = np.asarray(tuples, dtype=np.float64)
    if criterion is Criterion.FROBENIUS:
        return np.sqrt(np.sum(t * t, axis=-1))
    if criterion is Criterion.COMPONENT:
        return np.abs(t)
    if algebra.kind is not Kind.M2R:
        raise UnsupportedCriterionError(f"{criterion.value} is only defined for M2R, not {algebra}")
    if criterion is Criterion.DETERMINANT:
        return np.abs(t[..., 0] * t[..., 3] - t[..., 1] * t[..., 2])
    lo, hi = _eig_moduli(t)
    return lo if criterion is Criterion.MIN_EIGENVALUE else hi


@dataclass
class PruneMask:
    keep: dict[str, np.ndarray]
    mode: str = "tuple"
    frozen: frozenset[str] = field(default_factory=frozenset)

    @classmethod
    def dense(cls, params: Mapping[str, np.ndarray], prunable: Iterable[str],
              frozen: Iterable[str] = (), mode: str = "tuple") -> "PruneMask":
        if mode not in ("tuple", "component"):
            raise ValueError(f"unknown mask mode {mode!r}")
        keep = {}
        prunable = list(prunable)
        frozen = [f for f in frozen if f not in prunable]
        # frozen algebra weights get all-true masks so reports can list them
        for name in prunable + frozen:
            shape = params[name].shape if mode == "component" else params[name].shape[:-1]
            keep[name] = np.ones(shape, dtype=bool)
        return cls(keep, mode, frozenset(frozen))

    def copy(self) -> "PruneMask":
        return PruneMask({k: v.copy() for k, v in self.keep.items()}, self.mode, self.frozen)

    @property
    def prunable(self) -> list[str]:
        return [k for k in self.keep if k not in self.frozen]

    def counts(self) -> tuple[int, int]:
        """``(masked, total)`` over prunable layers."""
        total = sum(self.keep[k].size for k in self.prunable)
        kept = sum(int(self.keep[k].sum()) for k in self.prunable)
        return total - kept, total

    def sparsity(self) -> float:
        masked, total = self.counts()
        return masked / total if total else 0.0

    def weight_mask(self, name: str, weight_shape) -> np.ndarray:
        """Float mask broadcastable against the weight (with tuple axis)."""
        m = self.keep[name]
        if self.mode == "tuple":
            m = m[..., None]
        return np.broadcast_to(m, weight_shape).astype(np.float64)


def apply_mask(params: dict[str, np.ndarray], mask: PruneMask) -> None:
    """Zero masked weights in place."""
    for name in mask.keep:
        params[name] *= mask.weight_mask(name, params[name].shape)


def prune_step(params: dict[str, np.ndarray], mask: PruneMask, schedule: PruneSchedule, step: int,
               criterion: Criterion | str = Criterion.FROBENIUS, algebra="R",
               per_layer: bool = False) -> PruneMask:
    """Mask the lowest-scoring kept weights until the scheduled sparsity is met.

    Ranking is global over prunable layers unless ``per_layer``; ties break
    by (layer order, flat index). Masks never shrink. Masked weights in
    ``params`` are zeroed in place. Returns the new mask.
    """
    if not schedule.is_boundary(step):
        raise ValueError(f"step {step} is not a pruning boundary")
    criterion = Criterion(criterion)
    if (criterion is Criterion.COMPONENT) != (mask.mode == "component"):
        raise ValueError("component criterion requires a component-mode mask and vice versa")
    new = mask.copy()
    target = target_sparsity(schedule, step)
    layers = new.prunable
    groups = [layers] if not per_layer else [[name] for name in layers]
    for group in groups:
        scores, layer_idx, flat_idx = [], [], []
        total = masked = 0
        for li, name in enumerate(group):
            keep = new.keep[name].ravel()
            total += keep.size
            masked += int(keep.size - keep.sum())
            s = criterion_score(params[name], criterion, algebra).ravel()
            live = np.flatnonzero(keep)
            scores.append(s[live])
            flat_idx.append(live)
            layer_idx.append(np.full(live.size, li))
        goal = math.ceil(target * total - 1e-9)
        need = goal - masked
        if need <= 0:
            continue
        scores = np.concatenate(scores)
        layer_idx = np.concatenate(layer_idx)
        flat_idx = np.concatenate(flat_idx)
        order = np.lexsort((flat_idx, layer_idx, scores))[:need]
        for li, name in enumerate(group):
            chosen = flat_idx[order[layer_idx[order] == li]]
            flat = new.keep[name].reshape(-1)
            flat[chosen] = False
    apply_mask(params, new)
    return new


@dataclass
class SparsityRow:
    layer: str
    tuples_total: int
    tuples_masked: int
    params_remaining: int
    multiplies_remaining: int

    @property
    def sparsity(self) -> float:
        return self.tuples_masked / self.tuples_total if self.tuples_total else 0.0


def _layer_masks(mask: PruneMask, layer_of: Callable[[str], str]) -> dict[str, np.ndarray]:
    out: dict[str, list[np.ndarray]] = {}
    for name, keep in mask.keep.items():
        out.setdefault(layer_of(name), []).append(keep.ravel())
    return {k: np.concatenate(v) for k, v in out.items()}


def sparsity_report(mask: PruneMask | None, specs: list[LayerSpec],
                    layer_of: Callable[[str], str] = lambda n: n.rsplit(".", 1)[0]) -> list[SparsityRow]:
    """Per-layer masked counts and remaining parameters / multiplies.

    ``tuples_*`` count weight tuples (components in component mode).
    """
    lm = _layer_masks(mask, layer_of) if mask is not None else {}
    mode = mask.mode if mask is not None else "tuple"
    dense = model_cost(specs)
    sparse = model_cost(specs, lm, mode=mode) if lm else dense
    rows = []
    for spec, row in zip(specs, sparse.rows):
        if spec.kind not in ("linear", "conv2d", "gru"):
            continue
        dim = AlgebraId.parse(spec.algebra).dim
        units = spec.weight_tuples * (dim if mode == "component" else 1)
        m = lm.get(spec.name)
        masked = int(m.size - m.sum()) if m is not None else 0
        rows.append(SparsityRow(spec.name, units, masked, row.real_params, row.multiplies))
    return rows


def sparsity_csv(rows: list[SparsityRow], prunable_layers: Iterable[str]) -> str:
    """CSV with one row per layer plus totals over prunable and over all layers."""
    prunable_layers = set(prunable_layers)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "tuples_total", "tuples_masked", "params_remaining", "multiplies_remaining", "sparsity"])
    for r in rows:
        w.writerow([r.layer, r.tuples_total, r.tuples_masked, r.params_remaining,
                    r.multiplies_remaining, f"{r.sparsity:.6f}"])
    for label, subset in (("TOTAL_prunable", [r for r in rows if r.layer in prunable_layers]),
                          ("TOTAL_all", rows)):
        tot = SparsityRow(label, sum(r.tuples_total for r in subset), sum(r.tuples_masked for r in subset),
                          sum(r.params_remaining for r in subset), sum(r.multiplies_remaining for r in subset))
        w.writerow([tot.layer, tot.tuples_total, tot.tuples_masked, tot.params_remaining,
                    tot.multiplies_remaining, f"{tot.sparsity:.6f}"])
    return buf.getvalue()


MASK_MAGIC = b"ALGNMASK"
MASK_VERSION = 1
_MASK_HEAD = struct.Struct("<8sIQ")


def dumps_mask(mask: PruneMask, meta: dict | None = None) -> bytes:
    """Header (magic, version, JSON manifest) then each layer bit-packed, LSB first."""
    manifest = {
        "mode": mask.mode,
        "frozen": sorted(mask.frozen),
        "meta": meta or {},
        "layers": [{"name": k, "shape": list(v.shape)} for k, v in mask.keep.items()],
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    body = b"".join(np.packbits(v.ravel(), bitorder="little").tobytes() for v in mask.keep.values())
    return _MASK_HEAD.pack(MASK_MAGIC, MASK_VERSION, len(head)) + head + body


def loads_mask(blob: bytes) -> tuple[PruneMask, dict]:
    from .nn.serialize import CheckpointError

    if len(blob) < _MASK_HEAD.size:
        raise CheckpointError("mask file truncated")
    magic, version, n = _MASK_HEAD.unpack_from(blob)
    if magic != MASK_MAGIC:
        raise CheckpointError(f"bad mask magic {magic!r}")
    if version != MASK_VERSION:
        raise CheckpointError(f"unsupported mask version {version}")
    manifest = json.loads(blob[_MASK_HEAD.size:_MASK_HEAD.size + n].decode())
    offset = _MASK_HEAD.size + n
    keep = {}
    for item in manifest["layers"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = (count + 7) // 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"mask v{version}: truncated at {item['name']!r}")
        bits = np.unpackbits(np.frombuffer(blob[offset:offset + nbytes], dtype=np.uint8),
                             count=count, bitorder="little")
        keep[item["name"]] = bits.astype(bool).reshape(shape)
        offset += nbytes
    return PruneMask(keep, manifest["mode"], frozenset(manifest["frozen"])), manifest.get("meta", {})


def save_mask(path, mask: PruneMask, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps_mask(mask, meta))


def load_mask(path) -> tuple[PruneMask, dict]:
    return loads_mask(Path(path).read_bytes())
