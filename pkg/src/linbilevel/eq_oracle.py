"""Finite-difference hypergradient oracle for linear equality constraints.

Two lower-level solves (the plain problem and the one perturbed by
delta * f) and a difference of Lagrangian x-gradients:

    v_x = (grad_x g(x, y_d) - grad_x g(x, y) + A^T (lam_d - lam)) / delta
    grad F  ~  v_x + grad_x f(x, y)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .inner import AffineProjector, InnerTolerance, PrimalDualPair, solve_ll_equality
from .problem import BilevelInstance, ConstraintKind, OracleCounter


@dataclass
class HypergradientEstimate:
    grad: np.ndarray
    accuracy_target: float
    fd_delta: float
    counters: OracleCounter
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.grad)):
            from .errors import EvaluationError
            raise EvaluationError("hypergradient estimate is not finite")


def default_fd_delta(eps: float) -> float:
    return eps**2


def default_inner_target(inst: BilevelInstance, delta: float) -> float:
    reg = inst.regularity
    return 2.0 * (reg.C_g + inst.constraint.norm_A) * delta**2


def inexact_grad_eq(inst: BilevelInstance, x: np.ndarray, eps: float, fd_delta: float | None = None,
                    inner_tol: InnerTolerance | None = None, counter: OracleCounter | None = None,
                    warm: np.ndarray | None = None, C_F: float | None = None, R_X: float | None = None,
                    projector: AffineProjector | None = None) -> HypergradientEstimate:
    """Inexact hypergradient at x for an equality-constrained instance."""
    if inst.kind is not ConstraintKind.EQUALITY:
        raise InputError("inexact_grad_eq needs an equality-constrained instance")
    if not eps > 0:
        raise InputError(f"eps must be positive, got {eps}")
    x = np.asarray(x, dtype=float)
    if x.shape != (inst.dim_x,):
        raise InputError(f"x must have shape ({inst.dim_x},), got {x.shape}")
    delta = default_fd_delta(eps) if fd_delta is None else float(fd_delta)
    if not delta > 0:
        raise InputError("fd_delta must be positive")
    reg = inst.regularity
    if reg.C_f > 0 and delta > reg.mu_g / (2.0 * reg.C_f):
        warnings.warn(f"fd_delta={delta:g} exceeds mu_g/(2 C_f)={reg.mu_g / (2 * reg.C_f):g}; "
                      "the perturbed lower level may lose its strong-convexity margin", RuntimeWarning,
                      stacklevel=2)
    tol = InnerTolerance(default_inner_target(inst, delta)) if inner_tol is None else inner_tol
    counter = OracleCounter() if counter is None else counter
    start = counter.snapshot()
    proj = projector if projector is not None else AffineProjector(inst.constraint.B)

    base = solve_ll_equality(inst, x, tol, y0=warm, counter=counter, projector=proj)
    pert = solve_ll_equality(inst, x, tol, y0=base.y, counter=counter, perturb=delta, projector=proj)

    A = inst.constraint.A
    gx_d = inst.grad_g_x(x, pert.y, counter)
    gx = inst.grad_g_x(x, base.y, counter)
    v = (gx_d - gx + A.T @ (pert.lam - base.lam)) / delta
    grad = v + inst.grad_f_x(x, base.y, counter)

    target = eps**2 / (4.0 * C_F * R_X) if (C_F and R_X) else tol.target
    return HypergradientEstimate(
        grad=grad, accuracy_target=target, fd_delta=delta, counters=counter - start,
        extras={"base": base, "perturbed": pert, "inner_target": tol.target},
    )


class EqualityOracle:
    """Callable x -> inexact hypergradient, warm-starting each solve from the last one."""

    def __init__(self, inst: BilevelInstance, eps: float, fd_delta: float | None = None,
                 inner_tol: InnerTolerance | None = None, counter: OracleCounter | None = None,
                 warm_start: bool = True):
        self.inst = inst
        self.eps = eps
        self.fd_delta = fd_delta
        self.inner_tol = inner_tol
        self.counter = OracleCounter() if counter is None else counter
        self.warm_start = warm_start
        self._proj = AffineProjector(inst.constraint.B)
        self._last: PrimalDualPair | None = None
        self.last_estimate: HypergradientEstimate | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        warm = self._last.y if (self.warm_start and self._last is not None) else None
        est = inexact_grad_eq(self.inst, x, self.eps, self.fd_delta, self.inner_tol, self.counter,
                              warm=warm, projector=self._proj)
        self._last = est.extras["base"]
        self.last_estimate = est
        return est.grad
