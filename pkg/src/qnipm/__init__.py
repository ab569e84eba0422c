"""Interior point QP/LP solver with quasi-Newton (Broyden) steps on the unreduced KKT system."""

from qnipm.ipm import Mode, SolverOptions, SolverReport, Status, solve
from qnipm.kernel import IterateState, Regularization
from qnipm.problem import (QuadraticProgram, RawProblem, parse_qps, read_qps,
                           recover_solution, to_standard_form)
from qnipm.quasinewton import QnOperator, UpdateKind

__version__ = "0.1.0"

__all__ = [
    "IterateState", "Mode", "QnOperator", "QuadraticProgram", "RawProblem",
    "Regularization", "SolverOptions", "SolverReport", "Status", "UpdateKind",
    "parse_qps", "read_qps", "recover_solution", "solve", "to_standard_form",
]
