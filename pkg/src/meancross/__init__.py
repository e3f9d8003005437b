"""Stochastic optimal control with a mean-crossing terminal time.

The horizon of the control problem is not fixed: it is the first time
the mean of a state functional reaches a threshold (capped at a final
time T).  This package simulates the controlled state equation,
estimates that terminal time, solves the first- and second-order
backward adjoint systems along a candidate optimal pair, measures the
sensitivity of the terminal time to spike perturbations of the control,
and scans the resulting first-order optimality inequality, with an
exhaustive discrete-control search as the independent oracle.
"""

from .adjoint import (AdjointBundle, AdjointSolution, HamiltonianEval,
                      SecondOrderAdjoint, hamiltonian, k_tau, r_tau,
                      solve_all_adjoints, solve_first_adjoint,
                      solve_second_adjoint)
from .model import (Coefficient, ControlDomain, ProblemSpec,
                    ProblemValidationError, load_problem, parse_coefficient)
from .simulate import (ControlProcess, PathEnsemble, TimeGrid,
                       estimate_expectation, simulate_ensemble, with_spike)
from .smp import (BruteForceResult, SMPReport, brute_force_search, check_smp,
                  cost_functional)
from .terminal import (ConstraintRate, MeanCurve, TerminalTimeEstimate,
                       classify_case, constraint_rate, hitting_time,
                       mean_constraint_curve)
from .variation import (RateEstimate, VariationalPair, moment_check,
                        solve_variational, tau_rate_empirical,
                        tau_rate_theoretical)

__version__ = "0.1.0"

__all__ = [
    "AdjointBundle", "AdjointSolution", "BruteForceResult", "Coefficient",
    "ConstraintRate", "ControlDomain", "ControlProcess", "HamiltonianEval",
    "MeanCurve", "PathEnsemble", "ProblemSpec", "ProblemValidationError",
    "RateEstimate", "SMPReport", "SecondOrderAdjoint", "TerminalTimeEstimate",
    "TimeGrid", "VariationalPair", "brute_force_search", "check_smp",
    "classify_case", "constraint_rate", "cost_functional",
    "estimate_expectation", "hamiltonian", "hitting_time", "k_tau",
    "load_problem", "mean_constraint_curve", "moment_check",
    "parse_coefficient", "r_tau", "simulate_ensemble", "solve_all_adjoints",
    "solve_first_adjoint", "solve_second_adjoint", "solve_variational",
    "tau_rate_empirical", "tau_rate_theoretical", "with_spike",
]
