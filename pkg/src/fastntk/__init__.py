"""Empirical neural tangent kernels computed three ways, with FLOP accounting.

The dispatcher lives at ``fastntk.ntk.ntk``.
"""

from .autodiff import jacobian, jvp, linearize, vjp
from .cost import CostEstimate, predict_generic, predict_table, select_method, validate_against_counter
from .mjjmp import Order, best_order, mjjmp_cost, mjjmp_execute
from .ntk import Method, NtkMatrix, NtkOperator, ntk_vector_product_operator, power_iteration
from .program import ModelSpec, Program, ProgramBuilder, SpecError, build, evaluate
from .structure import StructureKind, reconstruct, structured_jacobian
from .tensor import DimensionError, FlopCounter, counting

__all__ = [
    "CostEstimate",
    "DimensionError",
    "FlopCounter",
    "Method",
    "ModelSpec",
    "NtkMatrix",
    "NtkOperator",
    "Order",
    "Program",
    "ProgramBuilder",
    "SpecError",
    "StructureKind",
    "best_order",
    "build",
    "counting",
    "evaluate",
    "jacobian",
    "jvp",
    "linearize",
    "mjjmp_cost",
    "mjjmp_execute",
    "ntk_vector_product_operator",
    "power_iteration",
    "predict_generic",
    "predict_table",
    "reconstruct",
    "select_method",
    "structured_jacobian",
    "validate_against_counter",
    "vjp",
]
