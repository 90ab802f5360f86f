"""Penalty-based hypergradient oracle and zeroth-order value oracle for
linear inequality constraints.

With (y*, lam*) the lower-level primal-dual solution and I the set of
active constraints with positive multipliers, the penalty Lagrangian is

    L(x, y) = f + a1 (g + lam*^T h - g*(x)) + (a2 / 2) ||h_I||^2

where g*(x) = g(x, y*) + lam*^T h(x, y*).  Its x-gradient at the
minimizer over y approximates grad F(x).  lam* is treated as a constant
and grad g* comes from the envelope theorem, so only first-order
information of f and g is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .eq_oracle import HypergradientEstimate
from .errors import InputError
from .inner import (
    InnerTolerance,
    LowRankMetric,
    PrimalDualPair,
    minimize_penalty,
    solve_ll_equality,
    solve_ll_inequality,
)
from .problem import BilevelInstance, ConstraintKind, OracleCounter

ACT_TOL = 1e-7
DUAL_TOL = 1e-7


@dataclass(frozen=True)
class PenaltyParams:
    alpha: float
    alpha1: float | None = None
    alpha2: float | None = None

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise InputError(f"alpha must be positive, got {self.alpha}")
        a1 = self.alpha**-2 if self.alpha1 is None else float(self.alpha1)
        a2 = self.alpha**-4 if self.alpha2 is None else float(self.alpha2)
        if not (a2 >= a1 >= 1.0):
            raise InputError(f"penalty parameters need alpha2 >= alpha1 >= 1 (got {a1}, {a2})")
        object.__setattr__(self, "alpha1", a1)
        object.__setattr__(self, "alpha2", a2)


@dataclass(frozen=True)
class ActiveSet:
    """0-based indices of active constraints with positive multipliers."""

    indices: tuple[int, ...]
    act_tol: float
    dual_tol: float
    degenerate: tuple[int, ...] = ()

    def __len__(self):
        return len(self.indices)

    @property
    def idx(self) -> np.ndarray:
        return np.array(self.indices, dtype=int)


def active_set(h_vals: np.ndarray, lam: np.ndarray, act_tol: float = ACT_TOL,
               dual_tol: float | None = None) -> ActiveSet:
    """i is active iff |h_i| <= act_tol and lam_i > dual_tol.

    Weakly active constraints (|h_i| <= act_tol, lam_i <= dual_tol) are left
    out and reported in ``degenerate``.
    """
    h = np.asarray(h_vals, dtype=float).reshape(-1)
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if h.shape != lam.shape:
        raise InputError(f"h and lambda differ in length ({h.size} vs {lam.size})")
    if dual_tol is None:
        dual_tol = DUAL_TOL * (1.0 + float(np.abs(lam).max(initial=0.0)))
    near = np.abs(h) <= act_tol
    on = near & (lam > dual_tol)
    weak = near & ~on
    return ActiveSet(tuple(int(i) for i in np.flatnonzero(on)), float(act_tol), float(dual_tol),
                     tuple(int(i) for i in np.flatnonzero(weak)))


def default_active_set(inst: BilevelInstance, x: np.ndarray, pd: PrimalDualPair) -> ActiveSet:
    con = inst.constraint
    act_tol = ACT_TOL * (1.0 + float(np.abs(con.b).max(initial=0.0)))
    dual_tol = DUAL_TOL * (1.0 + float(np.abs(pd.lam).max(initial=0.0)))
    return active_set(con.eval(x, pd.y), pd.lam, act_tol, dual_tol)


class PenaltyLagrangian:
    """The penalty Lagrangian at a fixed x, with everything y-independent cached."""

    def __init__(self, inst: BilevelInstance, x: np.ndarray, pd: PrimalDualPair, I: ActiveSet,
                 p: PenaltyParams, counter: OracleCounter | None = None):
        self.inst, self.p, self.counter = inst, p, counter
        self.x = np.asarray(x, dtype=float)
        self.pd = pd
        self.I = I.idx
        con = inst.constraint
        self.A, self.B, self.b = con.A, con.B, con.b
        self.BI, self.AI = con.B[self.I], con.A[self.I]
        self.shift = con.A @ self.x - con.b                 # h(y) = shift - B y
        self.lam = pd.lam
        self.Btlam = con.B.T @ pd.lam
        h_star = self.shift - con.B @ pd.y
        # h_I is evaluated around y*: shift_I - B_I y cancels terms of size
        # ||B_I y||, and alpha2 amplifies that rounding past the certificate
        self.y_star = pd.y
        self.hI_star = h_star[self.I]
        self.g_star = inst.g(self.x, pd.y, counter) + float(pd.lam @ h_star)
        self.gx_at_star = inst.grad_g_x(self.x, pd.y, counter)

    def h_I(self, y: np.ndarray) -> np.ndarray:
        return self.hI_star - self.BI @ (y - self.y_star)

    def _grad_y_shift(self, d: np.ndarray) -> np.ndarray:
        # gradient at y* + d; the stiff alpha2 term never sees y itself
        x, p = self.x, self.p
        y = self.y_star + d
        return (self.inst.grad_f_y(x, y, self.counter)
                + p.alpha1 * (self.inst.grad_g_y(x, y, self.counter) - self.Btlam)
                - p.alpha2 * (self.BI.T @ (self.hI_star - self.BI @ d)))

    def value(self, y: np.ndarray) -> float:
        x, p = self.x, self.p
        h = self.shift - self.B @ y
        hI = self.h_I(y)
        return (self.inst.f(x, y, self.counter)
                + p.alpha1 * (self.inst.g(x, y, self.counter) + float(self.lam @ h) - self.g_star)
                + 0.5 * p.alpha2 * float(hI @ hI))

    def grad_y(self, y: np.ndarray) -> np.ndarray:
        x, p = self.x, self.p
        return (self.inst.grad_f_y(x, y, self.counter)
                + p.alpha1 * (self.inst.grad_g_y(x, y, self.counter) - self.Btlam)
                - p.alpha2 * (self.BI.T @ self.h_I(y)))

    def grad_x(self, y: np.ndarray) -> np.ndarray:
        # A^T lam* appears in both grad_x(g + lam*^T h) and grad g*, and cancels
        x, p = self.x, self.p
        return (self.inst.grad_f_x(x, y, self.counter)
                + p.alpha1 * (self.inst.grad_g_x(x, y, self.counter) - self.gx_at_star)
                + p.alpha2 * (self.AI.T @ self.h_I(y)))

    # constants for the y-subproblem ---------------------------------------

    def moduli(self) -> tuple[float, float]:
        reg, p = self.inst.regularity, self.p
        mu = p.alpha1 * reg.mu_g - reg.C_f
        if mu <= 0:
            raise InputError(f"penalty subproblem is not strongly convex (alpha1*mu_g={p.alpha1 * reg.mu_g:g} "
                             f"<= C_f={reg.C_f:g}); use a smaller alpha")
        nBI = float(np.linalg.norm(self.BI, 2)) if self.I.size else 0.0
        C = reg.C_f + p.alpha1 * reg.C_g_yy + p.alpha2 * nBI**2
        return mu, C

    def metric(self) -> tuple[LowRankMetric, tuple[float, float]]:
        """M = a1 mu_g I + a2 B_I^T B_I and (m, L) with m M <= Hessian <= L M."""
        reg, p = self.inst.regularity, self.p
        a = p.alpha1 * reg.mu_g
        M = LowRankMetric(a, p.alpha2, self.BI)
        m = (a - reg.C_f) / a
        L = (reg.C_f + p.alpha1 * reg.C_g_yy) / a
        return M, (m, max(L, m))

    def default_target(self) -> float:
        """Distance target on y making the grad_x error at most alpha/10."""
        reg, p = self.inst.regularity, self.p
        nAI = float(np.linalg.norm(self.AI, 2)) if self.I.size else 0.0
        nBI = float(np.linalg.norm(self.BI, 2)) if self.I.size else 0.0
        return p.alpha / (10.0 * (p.alpha1 * reg.C_g + p.alpha2 * nAI * nBI + reg.C_f))

    def minimize(self, y0: np.ndarray, tol: InnerTolerance | None = None, precondition: bool = True):
        """Penalty minimizer, iterating on d = y - y*.

        With ||y|| large, rounding y itself perturbs the alpha2 term by
        alpha2 ||B_I||^2 eps ||y||, which can exceed the certificate; the
        displacement form keeps that term exact in d.
        """
        mu, C = self.moduli()
        tol = InnerTolerance(self.default_target()) if tol is None else tol
        d0 = np.asarray(y0, dtype=float) - self.y_star
        if precondition:
            M, bounds = self.metric()
            d, info = minimize_penalty(self._grad_y_shift, d0, mu, C, tol, metric=M, metric_bounds=bounds,
                                       return_info=True)
        else:
            d, info = minimize_penalty(self._grad_y_shift, d0, mu, C, tol, return_info=True)
        self.d_pen = d
        return self.y_star + d, info

    def grad_x_shift(self, d: np.ndarray) -> np.ndarray:
        """grad_x at y* + d, with h_I taken from d exactly."""
        x, p = self.x, self.p
        y = self.y_star + d
        return (self.inst.grad_f_x(x, y, self.counter)
                + p.alpha1 * (self.inst.grad_g_x(x, y, self.counter) - self.gx_at_star)
                + p.alpha2 * (self.AI.T @ (self.hI_star - self.BI @ d)))


def penalty_value_and_grads(inst: BilevelInstance, x: np.ndarray, y: np.ndarray, pd: PrimalDualPair,
                            I: ActiveSet, p: PenaltyParams, counter: OracleCounter | None = None) -> dict:
    pl = PenaltyLagrangian(inst, x, pd, I, p, counter)
    y = np.asarray(y, dtype=float)
    return {"value": pl.value(y), "grad_x": pl.grad_x(y), "grad_y": pl.grad_y(y)}


def ll_target_for(inst: BilevelInstance, pen_target: float) -> float:
    """Lower-level distance target so the y* and lam* errors both stay below ``pen_target``.

    The multiplier error is about the stationarity residual / sigma_min(B)
    and enters the penalty minimizer scaled by ||B|| / mu_g.
    """
    con = inst.constraint
    return pen_target * min(1.0, con.sigma_min_B / max(con.norm_B, 1e-300))


def inexact_grad_ineq(inst: BilevelInstance, x: np.ndarray, p: PenaltyParams,
                      ll_tol: InnerTolerance | None = None, pen_tol: InnerTolerance | None = None,
                      counter: OracleCounter | None = None, warm: PrimalDualPair | None = None,
                      warm_pen: np.ndarray | None = None, precondition: bool = True,
                      pd: PrimalDualPair | None = None) -> HypergradientEstimate:
    """Penalty hypergradient at x.

    ``pd`` may supply an externally computed lower-level solution (for
    instance an exact one in tests); otherwise it is computed by the
    primal-dual solver to ``ll_tol``.
    """
    if inst.kind is not ConstraintKind.INEQUALITY:
        raise InputError("inexact_grad_ineq needs an inequality-constrained instance")
    x = np.asarray(x, dtype=float)
    if x.shape != (inst.dim_x,):
        raise InputError(f"x must have shape ({inst.dim_x},), got {x.shape}")
    counter = OracleCounter() if counter is None else counter
    start = counter.snapshot()

    if pd is None:
        if ll_tol is None:
            # the active set is unknown yet, so bound with the full A and B
            reg = inst.regularity
            full = p.alpha / (10.0 * (p.alpha1 * reg.C_g + p.alpha2 * inst.constraint.norm_A * inst.constraint.norm_B
                                      + reg.C_f))
            ll_tol = InnerTolerance(ll_target_for(inst, full))
        pd = solve_ll_inequality(inst, x, ll_tol, y0=None if warm is None else warm.y,
                                 lam0=None if warm is None else warm.lam, counter=counter)
    I = default_active_set(inst, x, pd)
    pl = PenaltyLagrangian(inst, x, pd, I, p, counter)
    y0 = pd.y if warm_pen is None else warm_pen
    y_pen, info = pl.minimize(y0, pen_tol, precondition)
    grad = pl.grad_x_shift(pl.d_pen)
    return HypergradientEstimate(
        grad=grad, accuracy_target=p.alpha, fd_delta=p.alpha, counters=counter - start,
        extras={"pd": pd, "active": I, "degenerate": I.degenerate, "y_pen": y_pen,
                "penalty_iterations": info.iterations},
    )


class InequalityOracle:
    """Callable x -> penalty hypergradient with warm starts across calls."""

    def __init__(self, inst: BilevelInstance, p: PenaltyParams, counter: OracleCounter | None = None,
                 warm_start: bool = True, precondition: bool = True,
                 ll_tol: InnerTolerance | None = None, pen_tol: InnerTolerance | None = None):
        self.inst, self.p = inst, p
        self.counter = OracleCounter() if counter is None else counter
        self.warm_start, self.precondition = warm_start, precondition
        self.ll_tol, self.pen_tol = ll_tol, pen_tol
        self._pd: PrimalDualPair | None = None
        self._ypen: np.ndarray | None = None
        self.last_estimate: HypergradientEstimate | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        warm = self._pd if self.warm_start else None
        est = inexact_grad_ineq(self.inst, x, self.p, self.ll_tol, self.pen_tol, self.counter, warm=warm,
                                precondition=self.precondition)
        self._pd = est.extras["pd"]
        self.last_estimate = est
        return est.grad


@dataclass
class ZeroOrderValue:
    value: float
    counters: OracleCounter
    y: np.ndarray
    pd: PrimalDualPair = field(repr=False, default=None)


def zeroth_order_value(inst: BilevelInstance, x: np.ndarray, alpha: float,
                       counter: OracleCounter | None = None, warm: PrimalDualPair | None = None,
                       L_f: float | None = None) -> ZeroOrderValue:
    """F~(x) = f(x, y~) with ||y~ - y*|| <= alpha / L_f, so |F~ - F| <= alpha."""
    if not alpha > 0:
        raise InputError("alpha must be positive")
    x = np.asarray(x, dtype=float)
    counter = OracleCounter() if counter is None else counter
    start = counter.snapshot()
    Lf = inst.regularity.L_f if L_f is None else L_f
    tol = InnerTolerance(alpha / max(Lf, 1e-300))
    if inst.kind is ConstraintKind.INEQUALITY:
        pd = solve_ll_inequality(inst, x, tol, y0=None if warm is None else warm.y,
                                 lam0=None if warm is None else warm.lam, counter=counter)
    else:
        pd = solve_ll_equality(inst, x, tol, y0=None if warm is None else warm.y, counter=counter)
    return ZeroOrderValue(inst.f(x, pd.y, counter), counter - start, pd.y, pd)
