"""Validated container for tensors of algebra tuples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..algebra import AlgebraId, DimensionError


@dataclass(frozen=True)
class AlgebraTensor:
    """Dense tensor of tuples; ``data`` has a trailing tuple axis of length ``dim``.

    ``shape`` excludes the tuple axis. Converts to a plain array via
    ``np.asarray`` so it can be passed straight to the layer kernels.
    """

    algebra: AlgebraId
    data: np.ndarray

    def __post_init__(self):
        algebra = AlgebraId.parse(self.algebra)
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 0 or data.shape[-1] != algebra.dim:
            raise DimensionError(f"{algebra} tensors need a trailing axis of {algebra.dim}, got {data.shape}")
        object.__setattr__(self, "algebra", algebra)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_flat(cls, algebra, shape, flat) -> "AlgebraTensor":
        algebra = AlgebraId.parse(algebra)
        flat = np.asarray(flat, dtype=np.float64)
        expected = int(np.prod(shape)) * algebra.dim
        if flat.size != expected:
            raise DimensionError(f"need {expected} values for shape {tuple(shape)}, got {flat.size}")
        return cls(algebra, flat.reshape(*shape, algebra.dim))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape[:-1]

    @property
    def dim(self) -> int:
        return self.algebra.dim

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)
