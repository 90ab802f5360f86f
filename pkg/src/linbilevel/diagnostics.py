"""Reference oracles and certifiers used by tests and benchmarks.

Exact lower-level solutions and KKT hypergradients for quadratic-family
instances, a Goldstein-stationarity certifier (Wolfe's minimum-norm-point
algorithm) and finite-difference gradient checks.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve, solve_triangular
from scipy.linalg.lapack import dgecon
from scipy.optimize import nnls

from .errors import DegeneracyError, InputError
from .inner import PrimalDualPair
from .problem import BilevelInstance, ConstraintKind, make_rng

ACT_TOL = 1e-7
KKT_COND_MAX = 1e12


def _need_quad(inst: BilevelInstance):
    if inst.quad is None:
        raise InputError("exact oracles need a quadratic-family instance")
    return inst.quad


def _kkt_solve(Q, B, rhs_top, rhs_bot):
    """Solve [[Q, -B^T], [B, 0]] [y; lam] = [rhs_top; rhs_bot]."""
    m = B.shape[0]
    K = np.block([[Q, -B.T], [B, np.zeros((m, m))]])
    sol = np.linalg.solve(K, np.concatenate([rhs_top, rhs_bot], axis=0))
    return sol[: Q.shape[0]], sol[Q.shape[0]:]


def _finish_inequality(inst, x, y, lam) -> PrimalDualPair:
    q = inst.quad
    con = inst.constraint
    h = con.eval(x, y)
    stat = float(np.linalg.norm(q.Q @ y + q.P.T @ x - con.B.T @ lam))
    res = max(stat, float(max(h.max(initial=0.0), 0.0)), float(np.abs(lam * h).max(initial=0.0)))
    return PrimalDualPair(y, lam, res, 0)


def enumerate_active_sets(inst: BilevelInstance, x: np.ndarray, tol: float = 1e-9) -> PrimalDualPair:
    """Brute force: solve the KKT system of every active set, keep the valid one."""
    q = _need_quad(inst)
    con = inst.constraint
    if con.d_h > 16:
        raise InputError(f"active-set enumeration is limited to d_h <= 16 (got {con.d_h})")
    x = np.asarray(x, dtype=float)
    scale = 1.0 + float(np.abs(con.b).max(initial=0.0)) + float(np.abs(con.A @ x).max(initial=0.0))
    best = None
    for r in range(con.d_h + 1):
        for S in itertools.combinations(range(con.d_h), r):
            S = list(S)
            BS = con.B[S]
            try:
                y, lamS = _kkt_solve(q.Q, BS, -q.P.T @ x, con.A[S] @ x - con.b[S])
            except np.linalg.LinAlgError:
                continue
            lam = np.zeros(con.d_h)
            lam[S] = lamS
            h = con.eval(x, y)
            if lam.min(initial=0.0) >= -tol * (1 + np.abs(lam).max(initial=0.0)) and h.max(initial=-1.0) <= tol * scale:
                cand = _finish_inequality(inst, x, y, np.maximum(lam, 0.0))
                if best is None or cand.kkt_residual < best.kkt_residual:
                    best = cand
    if best is None:
        raise DegeneracyError("no active set satisfies the KKT conditions")
    return best


def exact_solution(inst: BilevelInstance, x: np.ndarray, method: str = "auto") -> PrimalDualPair:
    """Exact (y*, lam*) for a quadratic instance.

    Equality: one KKT solve.  Inequality: ``"enumerate"`` brute-forces active
    sets; ``"nnls"`` (the default) solves the dual as a nonnegative least
    squares problem and then re-solves the KKT system on the detected active
    set so y* and lam* are consistent to rounding.
    """
    q = _need_quad(inst)
    con = inst.constraint
    x = np.asarray(x, dtype=float)
    if x.shape != (inst.dim_x,):
        raise InputError(f"x must have shape ({inst.dim_x},)")
    if con.kind is ConstraintKind.EQUALITY:
        y, lam = _kkt_solve(q.Q, con.B, -q.P.T @ x, con.A @ x - con.b)
        res = float(np.linalg.norm(q.Q @ y + q.P.T @ x - con.B.T @ lam))
        return PrimalDualPair(y, lam, res, 0)
    if method == "enumerate":
        return enumerate_active_sets(inst, x)
    if method not in ("auto", "nnls"):
        raise InputError(f"unknown method {method!r}")

    # dual: min_{lam >= 0} 1/2 lam^T H lam - lam^T r,  H = B Q^-1 B^T
    Qf = cho_factor(q.Q)
    QiBt = cho_solve(Qf, con.B.T)
    H = con.B @ QiBt
    r = con.B @ cho_solve(Qf, q.P.T @ x) + con.A @ x - con.b
    L = np.linalg.cholesky(0.5 * (H + H.T))
    lam, _ = nnls(L.T, solve_triangular(L, r, lower=True), maxiter=50 * con.d_h + 100)
    S = np.flatnonzero(lam > 0)
    y, lamS = _kkt_solve(q.Q, con.B[S], -q.P.T @ x, con.A[S] @ x - con.b[S])
    lam = np.zeros(con.d_h)
    lam[S] = np.maximum(lamS, 0.0)
    return _finish_inequality(inst, x, y, lam)


def exact_value(inst: BilevelInstance, x: np.ndarray, pd: PrimalDualPair | None = None) -> float:
    """F(x) = f(x, y*(x))."""
    pd = exact_solution(inst, x) if pd is None else pd
    return inst.f(np.asarray(x, dtype=float), pd.y)


@dataclass
class ExactSensitivity:
    dy_dx: np.ndarray          # (d_y, d_x)
    dlam_dx: np.ndarray        # (|I|, d_x)
    active: np.ndarray         # indices of active constraints
    degenerate: np.ndarray     # weakly active indices (treated as inactive)
    condition: float
    pd: PrimalDualPair


def classify_constraints(h: np.ndarray, lam: np.ndarray, act_tol: float, dual_tol: float):
    near = np.abs(h) <= act_tol
    active = np.flatnonzero(near & (lam > dual_tol))
    degenerate = np.flatnonzero(near & (lam <= dual_tol))
    return active, degenerate


def exact_sensitivity(inst: BilevelInstance, x: np.ndarray, allow_degenerate: bool = False,
                      pd: PrimalDualPair | None = None, act_tol: float = ACT_TOL) -> ExactSensitivity:
    """dy*/dx (and dlam*/dx on the active set) by differentiating the KKT system."""
    q = _need_quad(inst)
    con = inst.constraint
    x = np.asarray(x, dtype=float)
    pd = exact_solution(inst, x) if pd is None else pd
    if con.kind is ConstraintKind.EQUALITY:
        I = np.arange(con.d_h)
        deg = np.array([], dtype=int)
    else:
        h = con.eval(x, pd.y)
        I, deg = classify_constraints(h, pd.lam, act_tol * (1 + np.abs(con.b).max()),
                                      act_tol * (1 + np.abs(pd.lam).max(initial=0.0)))
        if deg.size and not allow_degenerate:
            raise DegeneracyError(f"strict complementarity fails at constraints {deg.tolist()}",
                                  condition=None, indices=deg)
    m = I.size
    K = np.block([[q.Q, -con.B[I].T], [con.B[I], np.zeros((m, m))]])
    lu = lu_factor(K, check_finite=False)
    rcond, _ = dgecon(lu[0], np.linalg.norm(K, 1), norm="1")
    cond = 1.0 / rcond if rcond > 0 else math.inf
    if not math.isfinite(cond) or cond > KKT_COND_MAX:
        raise DegeneracyError(f"reduced KKT matrix is singular (condition {cond:.3e})", condition=cond, indices=I)
    sol = lu_solve(lu, np.vstack([-q.P.T, con.A[I]]))
    return ExactSensitivity(sol[: inst.dim_y], sol[inst.dim_y:], I, deg, cond, pd)


def exact_hypergrad_kkt(inst: BilevelInstance, x: np.ndarray, allow_degenerate: bool = False,
                        pd: PrimalDualPair | None = None) -> np.ndarray:
    """grad F(x) = grad_x f(x, y*) + (dy*/dx)^T grad_y f(x, y*)."""
    sens = exact_sensitivity(inst, x, allow_degenerate=allow_degenerate, pd=pd)
    x = np.asarray(x, dtype=float)
    gx, gy = inst.grad_f(x, sens.pd.y)
    return gx + sens.dy_dx.T @ gy


def unconstrained_hypergrad(inst: BilevelInstance, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """grad_x f - P Q^{-1} grad_y f: the implicit gradient when no constraint binds."""
    q = _need_quad(inst)
    gx, gy = inst.grad_f(np.asarray(x, dtype=float), y)
    return gx - q.P @ np.linalg.solve(q.Q, gy)


def kkt_inverse_bound(inst: BilevelInstance, x: np.ndarray) -> float:
    """1 / sigma_min of the reduced KKT matrix at x (reported, not used by solvers)."""
    q = _need_quad(inst)
    sens = exact_sensitivity(inst, x, allow_degenerate=True)
    B = inst.constraint.B[sens.active]
    m = B.shape[0]
    K = np.block([[q.Q, -B.T], [B, np.zeros((m, m))]])
    return 1.0 / float(np.linalg.svd(K, compute_uv=False)[-1])


# --------------------------------------------------------------------------
# Goldstein certification


@dataclass
class GoldsteinCertificate:
    delta: float
    distance_upper_bound: float
    n_samples: int
    witness_weights: np.ndarray
    gradients: np.ndarray
    min_norm_point: np.ndarray


def min_norm_point(P: np.ndarray, gap_tol: float = 1e-10, max_iters: int = 10_000) -> np.ndarray:
    """Wolfe's algorithm: convex weights w minimizing ||P^T w|| over the rows of P."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n = P.shape[0]
    if n == 0:
        raise InputError("need at least one point")
    scale = max(1.0, float(np.max(np.einsum("ij,ij->i", P, P))))
    j0 = int(np.argmin(np.einsum("ij,ij->i", P, P)))
    S = [j0]
    w = np.array([1.0])
    for _ in range(max_iters):
        z = w @ P[S]
        dots = P @ z
        j = int(np.argmin(dots))
        if z @ z - dots[j] <= gap_tol * scale or j in S:
            break
        S.append(j)
        w = np.append(w, 0.0)
        while True:
            # affine minimizer over the corral S
            PS = P[S]
            k = len(S)
            M = np.block([[PS @ PS.T, np.ones((k, 1))], [np.ones((1, k)), np.zeros((1, 1))]])
            rhs = np.zeros(k + 1)
            rhs[-1] = 1.0
            v = np.linalg.lstsq(M, rhs, rcond=None)[0][:k]
            if np.all(v > 1e-14):
                w = v
                break
            neg = v <= 1e-14
            ratios = w[neg] / np.maximum(w[neg] - v[neg], 1e-300)
            theta = min(1.0, float(ratios.min()))
            w = (1 - theta) * w + theta * v
            keep = w > 1e-14
            if not keep.any():
                keep[int(np.argmax(w))] = True
            S = [s for s, kp in zip(S, keep) if kp]
            w = w[keep]
            w = np.maximum(w, 0.0)
            w /= w.sum()
    full = np.zeros(n)
    full[S] = w
    return full


def goldstein_certify(grad_oracle: Callable[[np.ndarray], np.ndarray], x: np.ndarray, delta: float,
                      n_samples: int, seed: int = 0, points: np.ndarray | None = None) -> GoldsteinCertificate:
    """Upper bound on dist(0, conv{grad F(z) : z in B_delta(x)}) from sampled gradients.

    The sample consists of x itself plus ``n_samples`` uniform points of the
    ball (or the supplied ``points``).
    """
    if delta <= 0:
        raise InputError("delta must be positive")
    if n_samples < 1 and points is None:
        raise InputError("n_samples must be >= 1")
    x = np.asarray(x, dtype=float)
    d = x.size
    if points is None:
        rng = make_rng(seed)
        u = rng.standard_normal((n_samples, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        u *= delta * rng.random((n_samples, 1)) ** (1.0 / d)
        points = x + u
    pts = np.vstack([x[None, :], np.atleast_2d(points)])
    G = np.array([np.asarray(grad_oracle(p), dtype=float) for p in pts])
    w = min_norm_point(G)
    z = w @ G
    return GoldsteinCertificate(delta, float(np.linalg.norm(z)), pts.shape[0], w, G, z)


# --------------------------------------------------------------------------
# finite differences


def fd_gradient_check(fun: Callable[[np.ndarray], float], grad: np.ndarray, x: np.ndarray,
                      h_steps=(1e-5,), seed: int = 0, n_directions: int = 20) -> float:
    """Worst relative error of ``grad`` against central differences of ``fun``.

    Coordinates are used up to dimension 50, otherwise ``n_directions``
    random unit directions.  Errors are relative to the finite-difference
    reference.
    """
    x = np.asarray(x, dtype=float)
    grad = np.asarray(grad, dtype=float)
    d = x.size
    if d <= 50:
        dirs = np.eye(d)
    else:
        dirs = make_rng(seed).standard_normal((n_directions, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    target = dirs @ grad
    worst = 0.0
    for h in h_steps:
        fd = np.array([(fun(x + h * u) - fun(x - h * u)) / (2 * h) for u in dirs])
        err = float(np.linalg.norm(fd - target) / max(np.linalg.norm(fd), 1e-12))
        worst = max(worst, err)
    return worst
