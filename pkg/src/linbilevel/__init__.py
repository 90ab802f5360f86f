"""Bilevel optimization with linearly constrained lower-level problems.

First-order hypergradient oracles (finite-difference for equality
constraints, penalty-Lagrangian for inequality constraints), outer solvers
driven by inexact oracles, exact KKT baselines and Goldstein certificates.
"""

from .errors import (ConfigError, ConvergenceError, DegeneracyError, EvaluationError,
                     FactorizationError, InputError)
from .problem import (BilevelInstance, ConstraintKind, LinearConstraint, OracleCounter,
                      QuadraticData, QuadraticInstanceSpec, RegularityEstimates, Tag, gen_quadratic,
                      load_instance, make_rng, probe_regularity, save_instance)
from .inner import (InnerTolerance, PrimalDualPair, agd_affine, minimize_penalty, solve_ll_equality,
                    solve_ll_inequality)
from .eq_oracle import EqualityOracle, HypergradientEstimate, inexact_grad_eq
from .ineq_oracle import (ActiveSet, InequalityOracle, PenaltyLagrangian, PenaltyParams, active_set,
                          inexact_grad_ineq, zeroth_order_value)
from .outer import (FeasibleSet, RunTrace, SolverConfig, clip, inexact_ogd_regret, inexact_pgd, izo,
                    oigrm, pigd)
from .diagnostics import (exact_hypergrad_kkt, exact_sensitivity, exact_solution, fd_gradient_check,
                          goldstein_certify, min_norm_point)

__version__ = "0.1.0"
