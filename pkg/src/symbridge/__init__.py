"""Symmetrised Brownian bridge ensembles: sampling, rate functions, exact counts."""

from .errors import (
    ConfigError,
    ConvergenceError,
    DomainError,
    GuardError,
    PreconditionError,
    SymBridgeError,
)
from .grid import DensityOnGrid, Grid, GridFunction, Partition
from .combinatorics import PairMeasure, count_sym_fixed_R, count_sym_total, round_pair_measure
from .kernels import fk_bridge_matrix, gaussian_kernel, girsanov_mass, principal_eigen
from .ensemble import sample_bridge, sample_mixture, sample_sym
from .rates import BridgeMode, donsker_varadhan, jident_construct, objective_J, solve_J_q, solve_J_sym
from .bosegas import analytic_spectrum, ldp_check, partition_recursion, spectrum

__all__ = [
    "BridgeMode", "ConfigError", "ConvergenceError", "DensityOnGrid", "DomainError", "Grid",
    "GridFunction", "GuardError", "PairMeasure", "Partition", "PreconditionError", "SymBridgeError",
    "analytic_spectrum", "count_sym_fixed_R", "count_sym_total", "donsker_varadhan",
    "fk_bridge_matrix", "gaussian_kernel", "girsanov_mass", "jident_construct", "ldp_check",
    "objective_J", "partition_recursion", "principal_eigen", "round_pair_measure", "sample_bridge",
    "sample_mixture", "sample_sym", "solve_J_q", "solve_J_sym", "spectrum",
]
