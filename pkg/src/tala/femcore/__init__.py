"""Function spaces, quadrature and matrix-free finite element operators."""
from tala.femcore.evaluation import (
    Location, domain_area, evaluate_at, evaluate_located, integrate, integrate_function,
    locate, mass_norm, quadrature_gradients, quadrature_values,
)
from tala.femcore.operators import (
    CouplingOperator, Operator, assemble_load, OperatorTag, ScalarOperator, TransposedOperator, VectorMass,
    ViscousOperator, apply, density_gradient_operator, diagonal, divergence_operator,
    energy_operator, gradient_operator, mass_operator, stiffness_operator, viscous_operator,
)
from tala.femcore.parallel import get_num_threads, set_num_threads
from tala.femcore.reference import QuadratureRule, triangle_rule
from tala.femcore.spaces import (
    ContractViolation, Discretisation, FieldFunction, FunctionSpace, QuadGeometry,
)
from tala.femcore.transfer import inject, prolongate, prolongation_matrix, restrict, restriction_matrix
from tala.femcore.viscosity import ExpSurrogate, ViscosityField

__all__ = [
    "ContractViolation", "CouplingOperator", "Discretisation", "ExpSurrogate", "FieldFunction",
    "FunctionSpace", "Location", "Operator", "OperatorTag", "QuadGeometry", "QuadratureRule",
    "ScalarOperator", "TransposedOperator", "VectorMass", "ViscosityField", "ViscousOperator",
    "apply", "assemble_load", "density_gradient_operator", "diagonal", "divergence_operator", "domain_area",
    "energy_operator", "evaluate_at", "evaluate_located", "get_num_threads", "gradient_operator",
    "inject", "integrate", "integrate_function", "locate", "mass_norm", "mass_operator",
    "prolongate", "prolongation_matrix", "quadrature_gradients", "quadrature_values", "restrict",
    "restriction_matrix", "set_num_threads", "stiffness_operator", "triangle_rule",
    "viscous_operator",
]
