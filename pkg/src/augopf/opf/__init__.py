"""AC-OPF problem assembly and the interior-point Newton solver."""

from augopf.opf.certificate import CertificateReport, check_certificate
from augopf.opf.problem import OpfProblem, VariableLayout, assemble_problem, build_layout, objective
from augopf.opf.solver import (
    DEFAULT_OPTIONS,
    KktEvaluation,
    NewtonState,
    OpfOutcome,
    SolverOptions,
    StepFailure,
    eval_kkt,
    initial_state,
    lagrangian_hessian,
    newton_direction,
    newton_step,
    solve_opf,
)

__all__ = [
    "CertificateReport", "check_certificate", "OpfProblem", "VariableLayout", "assemble_problem",
    "build_layout", "objective", "DEFAULT_OPTIONS", "KktEvaluation", "NewtonState", "OpfOutcome",
    "SolverOptions", "StepFailure", "eval_kkt", "initial_state", "lagrangian_hessian", "newton_direction",
    "newton_step", "solve_opf",
]
