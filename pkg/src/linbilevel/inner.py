"""Lower-level and penalty subproblem solvers.

Canonical Lagrangian: L(y, lam) = g(x, y) + lam^T (A x - B y - b), so
stationarity reads grad_y g - B^T lam = 0.

All solvers certify their output with a computable residual (gradient
norm, projected onto the feasible tangent space where relevant) divided by
the strong-convexity modulus, rather than the unknowable distance to the
optimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConvergenceError, EvaluationError, FactorizationError, InputError
from .problem import RANK_TOL, BilevelInstance, ConstraintKind, OracleCounter

FEAS_TOL = 1e-8
COMP_TOL = 1e-8

GradFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class InnerTolerance:
    target: float
    max_iters: int | None = None

    def __post_init__(self):
        if not (self.target > 0 and math.isfinite(self.target)):
            raise InputError(f"tolerance target must be positive and finite, got {self.target}")
        if self.max_iters is not None and self.max_iters < 1:
            raise InputError("max_iters must be positive")

    def scaled(self, factor: float) -> "InnerTolerance":
        return InnerTolerance(self.target * factor, self.max_iters)


@dataclass
class PrimalDualPair:
    y: np.ndarray
    lam: np.ndarray
    kkt_residual: float
    iterations: int


@dataclass
class AGDInfo:
    iterations: int
    residual: float
    bound: int


# --------------------------------------------------------------------------
# affine projection


class AffineProjector:
    """Projection onto {y : B y = c} with a cached Cholesky factor of B B^T."""

    def __init__(self, B: np.ndarray, rank_tol: float = RANK_TOL):
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if B.shape[0] > B.shape[1]:
            raise FactorizationError(f"B is {B.shape}: cannot have full row rank")
        BBt = B @ B.T
        sv = np.linalg.svd(B, compute_uv=False)
        if sv.size and sv[-1] <= rank_tol * max(sv[0], 1.0):
            raise FactorizationError(f"B is numerically rank deficient (sigma_min={sv[-1]:.3e})")
        self.B = B
        self._fac = cho_factor(BBt)

    def multipliers(self, v: np.ndarray) -> np.ndarray:
        """argmin_mu ||v - B^T mu||."""
        return cho_solve(self._fac, self.B @ v)

    def tangent(self, v: np.ndarray) -> np.ndarray:
        """Component of v in the null space of B."""
        return v - self.B.T @ self.multipliers(v)

    def project(self, c: np.ndarray, u: np.ndarray) -> np.ndarray:
        return u - self.B.T @ cho_solve(self._fac, self.B @ u - c)


def project_affine(B: np.ndarray, c: np.ndarray, u: np.ndarray) -> np.ndarray:
    """argmin_{B y = c} ||y - u||^2."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    c = np.asarray(c, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float)
    if B.shape[0] != c.shape[0] or B.shape[1] != u.shape[0]:
        raise InputError(f"shapes disagree: B{B.shape}, c{c.shape}, u{u.shape}")
    return AffineProjector(B).project(c, u)


# relative rounding floor for gradient residuals, in units of C (1 + ||y||)
ROUNDING_FLOOR = 1e3 * np.finfo(float).eps


# --------------------------------------------------------------------------
# accelerated gradient core


def agd_iteration_bound(mu: float, C: float, dist0: float, target: float, guard: int = 100) -> int:
    """ceil(4 sqrt(C/mu) log(C dist0 / (mu target))) + guard."""
    ratio = C * max(dist0, target) / (mu * target)
    return int(math.ceil(4.0 * math.sqrt(C / mu) * math.log(max(ratio, math.e)))) + guard


def _agd(grad: GradFn, y0: np.ndarray, mu: float, C: float, target: float,
         max_iters: int | None, residual_map: GradFn | None = None,
         step_map: GradFn | None = None, reproject: GradFn | None = None,
         precond: GradFn | None = None, res_mu: float | None = None) -> tuple[np.ndarray, AGDInfo]:
    """Constant-momentum Nesterov method.

    ``mu``/``C`` are the strong convexity / smoothness of the objective in the
    metric defined by ``precond`` (Euclidean when it is None).  The
    certificate is ||residual_map(grad(w))|| <= res_mu * target, checked at the
    extrapolated point w, where ``res_mu`` is the Euclidean modulus.
    """
    if not (mu > 0 and math.isfinite(mu)):
        raise InputError(f"strong convexity modulus must be positive, got {mu}")
    if not C >= mu:
        raise InputError(f"smoothness C={C} must be >= mu={mu}")
    res_mu = mu if res_mu is None else res_mu
    rmap = residual_map if residual_map is not None else (lambda v: v)
    smap = step_map if step_map is not None else rmap
    pmap = precond if precond is not None else (lambda v: v)

    kappa = C / mu
    beta = (math.sqrt(kappa) - 1.0) / (math.sqrt(kappa) + 1.0)
    cert = res_mu * target

    y = np.array(y0, dtype=float)
    w = y.copy()
    gw = grad(w)
    r = float(np.linalg.norm(rmap(gw)))
    if not math.isfinite(r):
        raise EvaluationError("gradient at the starting point is not finite")
    bound = agd_iteration_bound(mu, C, r / res_mu, target)
    cap = bound if max_iters is None else max_iters
    window = max(300, int(10 * math.sqrt(kappa)))

    best_y, best_r = w.copy(), r
    mark_r, mark_k = r, 0
    k = 0
    while True:
        if not np.isfinite(r):
            raise ConvergenceError("non-finite gradient in accelerated gradient descent",
                                   best=best_y, residual=best_r, iterations=k)
        if r < best_r:
            best_y, best_r = w.copy(), r
        if r <= cert:
            return w, AGDInfo(k, r, bound)
        if k >= cap:
            raise ConvergenceError(f"accelerated gradient descent hit max_iters={cap} "
                                   f"(residual {best_r:.3e} > {cert:.3e})",
                                   best=best_y, residual=best_r, iterations=k)
        if k - mark_k >= window:
            if best_r > 0.5 * mark_r:
                raise ConvergenceError(f"accelerated gradient descent stalled at residual {best_r:.3e} "
                                       f"(target {cert:.3e}); floating-point floor reached",
                                       best=best_y, residual=best_r, iterations=k)
            mark_r, mark_k = best_r, k
        y_next = w - pmap(smap(gw)) / C
        if reproject is not None:
            y_next = reproject(y_next)
        w = y_next + beta * (y_next - y)
        y = y_next
        gw = grad(w)
        r = float(np.linalg.norm(rmap(gw)))
        k += 1


def agd_affine(grad: GradFn, B: np.ndarray, c: np.ndarray, tol: InnerTolerance, y0: np.ndarray,
               mu: float, C: float, projector: AffineProjector | None = None,
               return_info: bool = False):
    """Minimize a strongly convex smooth function over {B y = c}.

    ``grad`` is the gradient oracle of the objective; ``mu`` and ``C`` its
    strong convexity and smoothness.  Iterates are reprojected every step so
    they stay feasible to rounding.
    """
    proj = projector if projector is not None else AffineProjector(B)
    c = np.asarray(c, dtype=float).reshape(-1)
    y0 = proj.project(c, np.asarray(y0, dtype=float))
    y, info = _agd(grad, y0, mu, C, tol.target, tol.max_iters,
                   residual_map=proj.tangent, reproject=lambda v: proj.project(c, v))
    return (y, info) if return_info else y


def recover_dual(grad_at_y: np.ndarray, B: np.ndarray,
                 projector: AffineProjector | None = None) -> tuple[np.ndarray, float]:
    """Least-squares multiplier lam = argmin ||grad - B^T lam|| and its residual."""
    proj = projector if projector is not None else AffineProjector(B)
    lam = proj.multipliers(np.asarray(grad_at_y, dtype=float))
    return lam, float(np.linalg.norm(grad_at_y - proj.B.T @ lam))


# --------------------------------------------------------------------------
# lower-level solvers


def _check_x(inst: BilevelInstance, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (inst.dim_x,):
        raise InputError(f"x must have shape ({inst.dim_x},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("x has non-finite entries")
    return x


def solve_ll_equality(inst: BilevelInstance, x: np.ndarray, tol: InnerTolerance,
                      y0: np.ndarray | None = None, counter: OracleCounter | None = None,
                      perturb: float = 0.0, projector: AffineProjector | None = None) -> PrimalDualPair:
    """Solve min_y g(x, y) + perturb * f(x, y) s.t. B y = A x - b, then recover lam."""
    if inst.kind is not ConstraintKind.EQUALITY:
        raise InputError("solve_ll_equality needs an equality-constrained instance")
    x = _check_x(inst, x)
    con, reg = inst.constraint, inst.regularity
    proj = projector if projector is not None else AffineProjector(con.B)
    c = con.A @ x - con.b

    if perturb:
        def grad(y):
            return inst.grad_g_y(x, y, counter) + perturb * inst.grad_f_y(x, y, counter)
        mu = reg.mu_g - perturb * reg.C_f
        if mu <= 0:
            raise InputError("perturbation destroys strong convexity of the lower level")
        C = reg.C_g_yy + perturb * reg.C_f
    else:
        def grad(y):
            return inst.grad_g_y(x, y, counter)
        mu, C = reg.mu_g, reg.C_g_yy

    start = np.zeros(inst.dim_y) if y0 is None else y0
    try:
        y, info = agd_affine(grad, con.B, c, tol, start, mu, max(C, mu), projector=proj, return_info=True)
    except ConvergenceError as exc:
        # targets below the rounding floor of the gradient are unreachable; a
        # stall within that floor is as good as converged
        floor = ROUNDING_FLOOR * max(C, mu) * (1.0 + np.linalg.norm(exc.best)) if exc.best is not None else 0.0
        if "stalled" not in str(exc) or not exc.residual <= floor:
            raise
        y, info = proj.project(c, exc.best), AGDInfo(exc.iterations, exc.residual, exc.iterations)
    gy = grad(y)
    lam, res = recover_dual(gy, con.B, proj)
    return PrimalDualPair(y, lam, res, info.iterations)


def solve_ll_inequality(inst: BilevelInstance, x: np.ndarray, tol: InnerTolerance,
                        y0: np.ndarray | None = None, lam0: np.ndarray | None = None,
                        counter: OracleCounter | None = None, rho: float | None = None,
                        feas_tol: float = FEAS_TOL, comp_tol: float = COMP_TOL,
                        max_outer: int = 500) -> PrimalDualPair:
    """Primal-dual solve of min_y g(x, y) s.t. A x - B y - b <= 0.

    Method of multipliers: each round minimizes the augmented Lagrangian
    g + (1/2 rho) ||[lam + rho h]_+||^2 by AGD, then sets lam <- [lam + rho h]_+.
    After the update the stationarity residual ||grad g - B^T lam|| equals
    the inner gradient residual, so the loop stops once feasibility and
    complementarity are met.
    """
    if inst.kind is not ConstraintKind.INEQUALITY:
        raise InputError("solve_ll_inequality needs an inequality-constrained instance")
    x = _check_x(inst, x)
    con, reg = inst.constraint, inst.regularity
    B = con.B
    nb = con.norm_B
    rho = reg.C_g_yy / nb**2 if rho is None else float(rho)
    if rho <= 0:
        raise InputError("rho must be positive")
    shift = con.A @ x - con.b                       # h(y) = shift - B y
    mu, C = reg.mu_g, reg.C_g_yy + rho * nb**2
    stat_target = reg.mu_g * tol.target
    nb1 = max(nb, 1.0)

    y = np.zeros(inst.dim_y) if y0 is None else np.array(y0, dtype=float)
    lam = np.zeros(con.d_h) if lam0 is None else np.maximum(np.array(lam0, dtype=float), 0.0)
    # feasibility / complementarity are measured relative to the size of the
    # terms of h, the only scale-free choice when ||y*|| varies by decades
    hscale = 1.0 + float(np.abs(shift).max(initial=0.0)) + float(np.abs(B @ y).max(initial=0.0))
    # inexact method of multipliers: subproblem accuracy follows the KKT residual
    inner = max(tol.target, 1e-4 * hscale / nb1)
    total = 0
    stalls = 0
    best = None
    prev_support, tried = None, set()
    for _ in range(max_outer):
        lam_fixed = lam

        def grad(v, lam_fixed=lam_fixed):
            return inst.grad_g_y(x, v, counter) - B.T @ np.maximum(lam_fixed + rho * (shift - B @ v), 0.0)

        remaining = None if tol.max_iters is None else max(tol.max_iters - total, 1)
        try:
            y, info = _agd(grad, y, mu, C, inner, remaining)
            total += info.iterations
        except ConvergenceError as exc:
            # a stall means the subproblem is solved to rounding; let the KKT checks decide
            if "stalled" not in str(exc):
                exc.iterations += total
                raise
            y = exc.best
            total += exc.iterations
            stalls += 1
            if stalls > 3:
                break
        By = B @ y
        h = shift - By
        lam = np.maximum(lam + rho * h, 0.0)
        stat = float(np.linalg.norm(inst.grad_g_y(x, y, counter) - B.T @ lam))
        hscale = 1.0 + float(np.abs(shift).max(initial=0.0)) + float(np.abs(By).max(initial=0.0))
        viol = float(max(h.max(initial=0.0), 0.0)) / hscale
        comp = float(np.abs(lam * h).max(initial=0.0)) / (hscale * (1.0 + float(lam.max(initial=0.0))))
        best = PrimalDualPair(y.copy(), lam.copy(), max(stat / reg.mu_g, viol, comp), total)
        if stat <= stat_target and viol <= feas_tol and comp <= comp_tol:
            return best
        support = tuple(np.flatnonzero(lam > 0))
        if support and support == prev_support and support not in tried:
            # multiplier updates crawl along weak directions of B; once the
            # support settles, solve on it directly and keep the result if it is KKT
            tried.add(support)
            done = _active_set_finish(inst, x, y, support, tol.target, stat_target, feas_tol, comp_tol,
                                      counter, total)
            if done is not None:
                return done
        prev_support = support
        if tol.max_iters is not None and total >= tol.max_iters:
            break
        final = min(tol.target, 0.1 * min(feas_tol, comp_tol) * hscale / nb1)
        inner = max(final, min(inner, 0.1 * max(viol, comp) * hscale / nb1))
    raise ConvergenceError("primal-dual lower-level solve did not meet its KKT tolerances",
                           best=best, residual=best.kkt_residual if best else math.inf, iterations=total)


def _active_set_finish(inst, x, y0, support, target, stat_target, feas_tol, comp_tol, counter, total):
    """min g(x, .) s.t. B_S y = (A x - b)_S, multipliers by least squares; None unless KKT holds."""
    con, reg = inst.constraint, inst.regularity
    S = np.array(support)
    shift = con.A @ x - con.b
    proj = AffineProjector(con.B[S])
    try:
        y, info = agd_affine(lambda v: inst.grad_g_y(x, v, counter), con.B[S], shift[S],
                             InnerTolerance(target), y0, reg.mu_g, reg.C_g_yy, projector=proj, return_info=True)
    except ConvergenceError:
        return None
    lam_S, _ = recover_dual(inst.grad_g_y(x, y, counter), con.B[S], proj)
    lam = np.zeros(con.d_h)
    lam[S] = lam_S
    if lam.min() < -comp_tol * (1.0 + float(np.abs(lam).max())):
        return None
    lam = np.maximum(lam, 0.0)
    By = con.B @ y
    h = shift - By
    hscale = 1.0 + float(np.abs(shift).max(initial=0.0)) + float(np.abs(By).max(initial=0.0))
    stat = float(np.linalg.norm(inst.grad_g_y(x, y, counter) - con.B.T @ lam))
    viol = float(max(h.max(initial=0.0), 0.0)) / hscale
    comp = float(np.abs(lam * h).max(initial=0.0)) / (hscale * (1.0 + float(lam.max(initial=0.0))))
    if stat <= stat_target and viol <= feas_tol and comp <= comp_tol:
        return PrimalDualPair(y, lam, max(stat / reg.mu_g, viol, comp), total + info.iterations)
    return None


# --------------------------------------------------------------------------
# penalty minimization


class LowRankMetric:
    """M = a I + s U^T U with inverse applied through the Woodbury identity."""

    def __init__(self, a: float, s: float, U: np.ndarray):
        if a <= 0 or s < 0:
            raise InputError("metric needs a > 0 and s >= 0")
        self.a, self.s = float(a), float(s)
        self.U = np.atleast_2d(np.asarray(U, dtype=float))
        if self.U.shape[0] and s > 0:
            self._fac = cho_factor(self.a / self.s * np.eye(self.U.shape[0]) + self.U @ self.U.T)
        else:
            self._fac = None

    def solve(self, v: np.ndarray) -> np.ndarray:
        if self._fac is None:
            return v / self.a
        return (v - self.U.T @ cho_solve(self._fac, self.U @ v)) / self.a


def minimize_penalty(grad: GradFn, y0: np.ndarray, mu: float, C: float, tol: InnerTolerance,
                     metric: LowRankMetric | None = None, metric_bounds: tuple[float, float] | None = None,
                     return_info: bool = False):
    """Unconstrained AGD with certificate ||grad(y)|| <= mu * tol.target.

    With a ``metric`` M and ``metric_bounds`` (m, L) such that m M <= Hessian <= L M,
    the iteration runs in the M-geometry; the certificate stays Euclidean.
    """
    if not (mu > 0):
        raise InputError(f"mu must be positive, got {mu}")
    if not C >= mu:
        raise InputError(f"C={C} must be >= mu={mu}")
    if metric is None:
        y, info = _agd(grad, y0, mu, C, tol.target, tol.max_iters)
    else:
        if metric_bounds is None:
            raise InputError("a metric requires its (m, L) bounds")
        m, L = metric_bounds
        y, info = _agd(grad, y0, m, L, tol.target, tol.max_iters, precond=metric.solve, res_mu=mu)
    return (y, info) if return_info else y
