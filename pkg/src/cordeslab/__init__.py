"""Numerical laboratory for nondivergent parabolic operators with
discontinuous leading coefficients: solvability condition checks,
backward Dirichlet solves (direct and fixed-point), and Monte Carlo
cross-validation through path functionals."""

from .conditions import (ConditionReport, Verdict, check_classical,
                         check_split_condition, ellipticity_delta, full_report,
                         nu_hat, optimize_gamma, select_index_set,
                         symmetric_eigenvalues)
from .expr import ExprEvalError, ExprSyntaxError, parse_expression
from .fields import (Box, CoefficientField, Decomposition, MollifiedField,
                     SampleSet, builtin_problem, decompose, eval_field,
                     make_field, mollify, sample_set)
from .grid import (Grid, GridFunction, NormBundle, NormWeights, apply_stencil,
                   build_grid, discrete_norms, pair)
from .solver import (BackwardProblem, DiscreteSolution, FixedPointTrace,
                     apriori_ratio, assemble_operator, assemble_step,
                     estimate_R_norm, fixed_point_solve, solve_backward,
                     solve_forward_adjoint)
from .stochastic import (SDE, Estimate, HatSampler, PathEnsemble, PointSampler,
                         TruncatedGaussianSampler, UniformBoxSampler,
                         characteristic_functional, density_compare,
                         feynman_kac, max_principle_check, simulate_paths,
                         verify_pairing)

__version__ = "0.1.0"
