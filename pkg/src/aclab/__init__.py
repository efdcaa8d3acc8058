"""Numerical laboratory for the stochastic Allen-Cahn equation near a single interface."""

from .core import (CUBIC, AclabError, ConfigurationError, Field, GateFailure, GridSpec, NumericError, Profile,
                   ReactionTerm, build_grid, solve_profile)
from .correctors import Cutoff, CorrectorSpec, alpha1, alpha2, corrector1, limit_coefficients, psi1, psibar1
from .flow import dist_to_manifold, flow, linear_center, zeta
from .kernels import dzeta, extract_lambda, first_kernel, second_kernel
from .limit import SdeConfig, compare_distributions, empirical_qv_drift, ensemble_terminal
from .linop import assemble, spectrum
from .partitions import SetPartition, check_partition_identities, enumerate_partitions, refinements
from .spde import NoiseSpec, SimConfig, run_ensemble, simulate_linear, simulate_path

__all__ = [n for n in dir() if not n.startswith("_")]
