"""Neural-network layers whose weights and activations live in small
associative algebras (complex numbers, quaternions, matrix algebras, ...)."""

from .algebra import (
    ALL_ALGEBRAS,
    ASSOCIATIVE_ALGEBRAS,
    AlgebraId,
    StructureTable,
    identity,
    left_mul_matrix,
    mul_fast,
    mul_generic,
    spectrum_2x2,
    structure_table,
    tuple_norm,
)
from .autodiff import Tape, Var, grad_check
from .cost import compute_density, layer_cost, model_cost, product_cost

__version__ = "0.1.0"

__all__ = [
    "ALL_ALGEBRAS",
    "ASSOCIATIVE_ALGEBRAS",
    "AlgebraId",
    "StructureTable",
    "Tape",
    "Var",
    "compute_density",
    "grad_check",
    "identity",
    "layer_cost",
    "left_mul_matrix",
    "model_cost",
    "mul_fast",
    "mul_generic",
    "product_cost",
    "spectrum_2x2",
    "structure_table",
    "tuple_norm",
]
