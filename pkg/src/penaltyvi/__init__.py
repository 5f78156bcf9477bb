"""Penalty approximation of the obstacle problem and its generalized derivatives."""
from .grid import (DiscreteField, DualVector, EllipticOperators, Grid, build_grid, norm,
                   solve_poisson)
from .penalty import (AssumptionReport, PenaltyFamily, Regularization, complementarity_weight,
                      growth_constant, make_family, make_regularization, verify_assumptions)
from .penalty_solver import PenalizedSolution, PenaltySolverError, lipschitz_probe, solve_penalized
from .sensitivity import (DerivativeOperator, NotGateaux, WeightMeasure, extract_measure,
                          solve_derivative, solve_weighted)
from .vi_ref import VISolution, VISolverError, classify_sets, solve_bruteforce, solve_pdas

__version__ = "0.1.0"
