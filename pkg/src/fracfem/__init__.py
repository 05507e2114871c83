"""Adaptive finite element solver for the spectral fractional Laplacian.

The fractional problem is decomposed by a certified rational approximation
into independent reaction-diffusion solves; a fractional Bank-Weiser field
assembled from cell-local error problems provides L2 error indicators that
drive Doerfler-marked bisection refinement.
"""

from .driver import (
    PROBLEMS,
    RunRecord,
    adaptive_loop,
    efficiency_index,
    fit_rate,
    fractional_solve,
    uniform_study,
)
from .estimator import BwConfig, BwWorkspace, ErrorField, accumulate_fractional
from .fem import FeSpace, SparseSystem, assemble_parametric, fe_space, interpolate, l2_error, l2_norm, solve_cg
from .mesh import Mesh, dorfler_mark, refine, uniform_refine, unit_square_mesh, validate
from .rational import RationalScheme, build_scheme, choose_kappa, epsilon_bound, evaluate_q, truncated_scheme

__version__ = "0.1.0"
