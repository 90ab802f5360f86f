"""Outer-loop optimizers driven by inexact oracles.

* ``inexact_pgd``   projected gradient descent with step 1/C_F (smooth F)
* ``oigrm``         online-to-nonconvex conversion with clipped online
                    gradient descent (nonsmooth Lipschitz F, gradient oracle)
* ``izo``           the same skeleton with a two-point zeroth-order estimator
* ``pigd``          perturbed inexact gradient descent
* ``inexact_ogd_regret``  the clipped online gradient descent building block
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, EvaluationError, InputError
from .problem import OracleCounter, make_rng

GradOracle = Callable[[np.ndarray], np.ndarray]
ValueOracle = Callable[[np.ndarray], float]

TRACE_COLUMNS = ("t", "fval", "grad_norm", "stat_measure", "f_evals", "f_grads", "g_evals", "g_grads", "wall_ms")


def clip(z: np.ndarray, D: float) -> np.ndarray:
    """min(1, D/||z||) z."""
    if not D > 0:
        raise InputError(f"clip radius must be positive, got {D}")
    z = np.asarray(z, dtype=float)
    n = float(np.linalg.norm(z))
    if n <= D:
        return z.copy()
    return z * (D / n)


def sample_sphere(rng: np.random.Generator, d: int, n: int | None = None) -> np.ndarray:
    """Uniform direction(s) on the unit sphere via normalized Gaussians."""
    if n is None:
        w = rng.standard_normal(d)
        return w / np.linalg.norm(w)
    w = rng.standard_normal((n, d))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# feasible sets


@dataclass(frozen=True)
class FeasibleSet:
    """X = R^d, a box [lo, hi] or a Euclidean ball."""

    kind: str = "all"
    lo: np.ndarray | float | None = None
    hi: np.ndarray | float | None = None
    center: np.ndarray | None = None
    radius: float | None = None

    def __post_init__(self):
        if self.kind not in ("all", "box", "ball"):
            raise InputError(f"unsupported feasible set {self.kind!r}")
        if self.kind == "box":
            if self.lo is None or self.hi is None or np.any(np.asarray(self.lo) > np.asarray(self.hi)):
                raise InputError("box needs lo <= hi")
        if self.kind == "ball" and not (self.radius is not None and self.radius > 0):
            raise InputError("ball needs a positive radius")

    @classmethod
    def box(cls, lo, hi) -> "FeasibleSet":
        return cls("box", lo=lo, hi=hi)

    @classmethod
    def ball(cls, radius: float, center=None) -> "FeasibleSet":
        return cls("ball", center=center, radius=radius)

    def project(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "all":
            return x.copy()
        if self.kind == "box":
            return np.clip(x, self.lo, self.hi)
        c = np.zeros_like(x) if self.center is None else np.asarray(self.center, dtype=float)
        r = x - c
        n = float(np.linalg.norm(r))
        return x.copy() if n <= self.radius else c + r * (self.radius / n)

    def diameter(self, d: int) -> float:
        if self.kind == "all":
            return math.inf
        if self.kind == "ball":
            return 2.0 * float(self.radius)
        w = np.broadcast_to(np.asarray(self.hi, dtype=float) - np.asarray(self.lo, dtype=float), (d,))
        return float(np.linalg.norm(w))

    def describe(self) -> dict:
        if self.kind == "box":
            return {"kind": "box", "lo": np.asarray(self.lo).tolist(), "hi": np.asarray(self.hi).tolist()}
        if self.kind == "ball":
            return {"kind": "ball", "radius": self.radius,
                    "center": None if self.center is None else np.asarray(self.center).tolist()}
        return {"kind": "all"}


def gradient_mapping(x: np.ndarray, gradF: np.ndarray, C_F: float, X: FeasibleSet | None = None) -> np.ndarray:
    """G = C_F (x - proj_X(x - gradF / C_F))."""
    if not C_F > 0:
        raise InputError("C_F must be positive")
    X = FeasibleSet() if X is None else X
    if not isinstance(X, FeasibleSet):
        raise InputError(f"unsupported feasible set {X!r}")
    x = np.asarray(x, dtype=float)
    return C_F * (x - X.project(x - np.asarray(gradF, dtype=float) / C_F))


# --------------------------------------------------------------------------
# traces


@dataclass
class TraceRecord:
    t: int
    fval: float | None
    grad_norm: float
    stat_measure: float
    counters: tuple[int, int, int, int]
    wall_ms: float
    x_norm: float = float("nan")


@dataclass
class RunTrace:
    records: list[TraceRecord] = field(default_factory=list)
    x_out: np.ndarray | None = None
    termination: str = ""

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        if name in ("f_evals", "f_grads", "g_evals", "g_grads"):
            i = ("f_evals", "f_grads", "g_evals", "g_grads").index(name)
            return np.array([r.counters[i] for r in self.records])
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self, path: str | Path, timing: bool = False) -> None:
        """Write the trace; wall_ms is 0.0 unless ``timing`` so reruns are byte-identical."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([r.t, "" if r.fval is None else repr(float(r.fval)), repr(float(r.grad_norm)),
                            repr(float(r.stat_measure)), *r.counters,
                            repr(float(r.wall_ms)) if timing else "0.0"])

    @classmethod
    def from_csv(cls, path: str | Path) -> "RunTrace":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != TRACE_COLUMNS:
            raise InputError(f"{path}: not a trace file (bad header)")
        recs = []
        for row in rows[1:]:
            recs.append(TraceRecord(int(row[0]), None if row[1] == "" else float(row[1]), float(row[2]),
                                    float(row[3]), tuple(int(v) for v in row[4:8]), float(row[8])))
        return cls(recs)


class _Recorder:
    def __init__(self, counter: OracleCounter | None, value_fn: ValueOracle | None, record_every: int):
        if record_every < 1:
            raise InputError("record_every must be >= 1")
        self.counter = counter
        self.value_fn = value_fn
        self.every = record_every
        self.trace = RunTrace()
        self.t0 = time.perf_counter()

    def __call__(self, t: int, x: np.ndarray, grad_norm: float, stat: float, force: bool = False):
        if not force and t % self.every:
            return
        counts = self.counter.as_tuple() if self.counter is not None else (0, 0, 0, 0)
        fval = None if self.value_fn is None else float(self.value_fn(x))
        self.trace.records.append(TraceRecord(t, fval, float(grad_norm), float(stat), counts,
                                              1e3 * (time.perf_counter() - self.t0), float(np.linalg.norm(x))))


def _counter_of(oracle) -> OracleCounter | None:
    return getattr(oracle, "counter", None)


def _checked(g, d: int) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.shape != (d,):
        raise EvaluationError(f"oracle returned shape {g.shape}, expected ({d},)")
    if not np.all(np.isfinite(g)):
        raise EvaluationError("oracle returned a non-finite gradient")
    return g


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SolverConfig:
    eps: float
    goldstein_delta: float
    D: float
    eta: float
    T: int
    alpha: float = 0.0
    rho: float | None = None
    nu: float | None = None
    seed: int = 0
    lipschitz_L: float | None = None
    feasible_set: FeasibleSet | None = None

    def __post_init__(self):
        for name in ("eps", "goldstein_delta", "D", "eta"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise InputError(f"{name} must be positive and finite, got {v}")
        if self.alpha < 0:
            raise InputError("alpha must be nonnegative")
        if int(self.T) < 1:
            raise InputError("T must be >= 1")
        for name in ("rho", "nu"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise InputError(f"{name} must be positive")

    @property
    def M(self) -> int:
        radius = self.nu if self.nu is not None else self.goldstein_delta
        return int(math.floor(radius / self.D * (1 + 1e-12)))

    @property
    def K(self) -> int:
        M = self.M
        return self.T // M if M >= 1 else 0

    def with_(self, **kw) -> "SolverConfig":
        return replace(self, **kw)

    @classmethod
    def oigrm_defaults(cls, eps: float, delta: float, L: float, F_gap: float, alpha: float = 0.0,
                       seed: int = 0, T: int | None = None) -> "SolverConfig":
        """D = delta eps^2 / L^2, eta = delta eps^3 / L^4, T = ceil(F_gap L^2 / (delta eps^3))."""
        if not (L > 0 and F_gap > 0):
            raise InputError("L and F_gap must be positive")
        D = delta * eps**2 / L**2
        eta = delta * eps**3 / L**4
        T = int(math.ceil(F_gap * L**2 / (delta * eps**3))) if T is None else T
        return cls(eps, delta, D, eta, T, alpha=alpha, seed=seed, lipschitz_L=L)

    @classmethod
    def izo_defaults(cls, eps: float, delta: float, L: float, F_gap: float, d: int, alpha: float = 0.0,
                     seed: int = 0, T: int | None = None) -> "SolverConfig":
        """rho = min(delta/2, F_gap/L), nu = delta - rho and the matching D, eta."""
        if not (L > 0 and F_gap > 0):
            raise InputError("L and F_gap must be positive")
        rho = min(delta / 2.0, F_gap / L)
        nu = delta - rho
        denom = d * rho**2 * L**2 + alpha**2 * d**2
        D = nu * eps**2 * rho**2 / denom
        eta = nu * eps**3 * rho**4 / denom**2
        if T is None:
            T = int(math.ceil(F_gap * denom / (nu * eps**3 * rho**2)))
        return cls(eps, delta, D, eta, T, alpha=alpha, rho=rho, nu=nu, seed=seed, lipschitz_L=L)

    @classmethod
    def pigd_defaults(cls, eps: float, delta: float, L: float, F_gap: float, d: int, T: int,
                      alpha: float = 0.0, seed: int = 0) -> "SolverConfig":
        """eta = sqrt((F_gap + delta L) delta) / (sqrt(T L) d^{1/4} (alpha + L))."""
        if not (L > 0 and F_gap > 0):
            raise InputError("L and F_gap must be positive")
        eta = math.sqrt((F_gap + delta * L) * delta) / (math.sqrt(T * L) * d**0.25 * (alpha + L))
        return cls(eps, delta, delta, eta, T, alpha=alpha, seed=seed, lipschitz_L=L)


def presolve_gap(value_oracle: ValueOracle, x0: np.ndarray, grad_oracle: GradOracle | None = None,
                 steps: int = 20, step: float = 1e-2) -> float:
    """F(x0) - F_lb with F_lb the best value seen on a short gradient descent presolve."""
    x = np.asarray(x0, dtype=float).copy()
    f0 = best = float(value_oracle(x))
    if grad_oracle is None:
        return max(f0 - best, 1e-12)
    for _ in range(steps):
        x = x - step * np.asarray(grad_oracle(x), dtype=float)
        best = min(best, float(value_oracle(x)))
    return max(f0 - best, 1e-12)


# --------------------------------------------------------------------------
# inexact projected gradient descent


@dataclass
class PGDResult:
    x_best: np.ndarray
    trace: RunTrace
    G_norms: np.ndarray       # ||G~(x_t)||, t = 0..N
    iterates: np.ndarray | None = None


def inexact_pgd(oracle: GradOracle, x0: np.ndarray, C_F: float, X: FeasibleSet | None, N: int,
                delta_acc: float | None = None, value_fn: ValueOracle | None = None,
                record_every: int = 1, keep_iterates: bool = False,
                stop_tol: float | None = None) -> PGDResult:
    """N projected steps x_{t+1} = proj_X(x_t - g~_t / C_F).

    The gradient mapping G~ is recorded at x_0..x_N (one extra oracle call
    at x_N).  ``x_best`` minimizes ||G~|| over these points.  ``stop_tol``
    enables an optional early stop once ||G~|| <= stop_tol.
    """
    if int(N) < 1:
        raise InputError(f"N must be >= 1, got {N}")
    if not C_F > 0:
        raise InputError("C_F must be positive")
    X = FeasibleSet() if X is None else X
    x = X.project(np.asarray(x0, dtype=float))
    d = x.size
    rec = _Recorder(_counter_of(oracle), value_fn, record_every)
    norms = []
    its = [x.copy()] if keep_iterates else None
    best_x, best_n = x.copy(), math.inf
    for t in range(N + 1):
        g = _checked(oracle(x), d)
        x_next = X.project(x - g / C_F)
        G = C_F * (x - x_next)
        n = float(np.linalg.norm(G))
        norms.append(n)
        if n < best_n:
            best_x, best_n = x.copy(), n
        rec(t, x, float(np.linalg.norm(g)), n, force=(t == N))
        if t == N:
            rec.trace.termination = "N steps"
            break
        if stop_tol is not None and n <= stop_tol:
            if not rec.trace.records or rec.trace.records[-1].t != t:
                rec(t, x, float(np.linalg.norm(g)), n, force=True)
            rec.trace.termination = "stationarity tolerance"
            break
        x = x_next
        if keep_iterates:
            its.append(x.copy())
    rec.trace.x_out = best_x
    return PGDResult(best_x, rec.trace, np.array(norms), None if its is None else np.array(its))


# --------------------------------------------------------------------------
# online-to-nonconvex solvers


@dataclass
class O2NCResult:
    x_out: np.ndarray
    trace: RunTrace
    x_bars: np.ndarray             # (K, d) window averages
    out_index: int
    delta_norms: np.ndarray        # ||Delta_t||, t = 1..T
    z: np.ndarray | None = None    # (T, d) when keep_points
    x: np.ndarray | None = None


def _o2nc_loop(grad_est: Callable[[np.ndarray, np.random.Generator], np.ndarray], x0: np.ndarray,
               cfg: SolverConfig, counter: OracleCounter | None, value_fn: ValueOracle | None,
               record_every: int, keep_points: bool,
               early_stop: Callable[[int, np.ndarray], bool] | None) -> O2NCResult:
    M, K = cfg.M, cfg.K
    if M < 1 or K < 1:
        raise ConfigError(f"configuration gives M={M}, K={K}; need both >= 1 (T={cfg.T}, D={cfg.D})")
    rng = make_rng(cfg.seed)
    x = np.asarray(x0, dtype=float).copy()
    d = x.size
    Delta = np.zeros(d)
    T = int(cfg.T)
    sums = np.zeros((K, d))
    dnorms = np.empty(T)
    zs = np.empty((T, d)) if keep_points else None
    xs = np.empty((T, d)) if keep_points else None
    win_g = np.zeros(d)
    rec = _Recorder(counter, value_fn, record_every)
    rec(0, x, float("nan"), float("nan"), force=True)   # no oracle call yet
    termination = "T steps"
    last_t = T
    for t in range(1, T + 1):
        s = rng.random()
        x_prev = x
        x = x_prev + Delta
        z = x_prev + s * Delta
        g = _checked(grad_est(z, rng), d)
        Delta = clip(Delta - cfg.eta * g, cfg.D)
        dnorms[t - 1] = np.linalg.norm(Delta)
        k = (t - 1) // M
        if k < K:
            sums[k] += z
        pos = (t - 1) % M
        win_g = g if pos == 0 else win_g + g
        if keep_points:
            zs[t - 1], xs[t - 1] = z, x
        rec(t, x, float(np.linalg.norm(g)), float(np.linalg.norm(win_g)) / (pos + 1), force=(t == T))
        if early_stop is not None and early_stop(t, x):
            termination, last_t = "early stop", t
            break
    K_done = min(K, last_t // M)
    if K_done < 1:
        raise ConfigError("stopped before the first window was complete")
    x_bars = sums[:K_done] / M
    idx = int(rng.integers(K_done))
    rec.trace.x_out = x_bars[idx].copy()
    rec.trace.termination = termination
    if termination != "T steps" and rec.trace.records[-1].t != last_t:
        rec(last_t, x, float("nan"), float("nan"), force=True)
    return O2NCResult(x_bars[idx].copy(), rec.trace, x_bars, idx, dnorms[:last_t],
                      None if zs is None else zs[:last_t], None if xs is None else xs[:last_t])


def oigrm(oracle: GradOracle, x0: np.ndarray, cfg: SolverConfig, value_fn: ValueOracle | None = None,
          record_every: int = 1, keep_points: bool = False,
          early_stop: Callable[[int, np.ndarray], bool] | None = None) -> O2NCResult:
    """Online-to-nonconvex conversion with clipped OGD on inexact gradients."""
    return _o2nc_loop(lambda z, rng: oracle(z), x0, cfg, _counter_of(oracle), value_fn,
                      record_every, keep_points, early_stop)


def izo_gradient_estimate(value_oracle: ValueOracle, z: np.ndarray, rho: float, w: np.ndarray) -> np.ndarray:
    """(d / 2 rho) (F(z + rho w) - F(z - rho w)) w for one direction, or each row of ``w``."""
    z = np.asarray(z, dtype=float)
    d = z.size
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        diff = float(value_oracle(z + rho * w)) - float(value_oracle(z - rho * w))
        if not math.isfinite(diff):
            raise EvaluationError("value oracle returned a non-finite value")
        return (d / (2.0 * rho)) * diff * w
    diffs = np.array([float(value_oracle(z + rho * wi)) - float(value_oracle(z - rho * wi)) for wi in w])
    return (d / (2.0 * rho)) * diffs[:, None] * w


def izo(value_oracle: ValueOracle, x0: np.ndarray, cfg: SolverConfig, value_fn: ValueOracle | None = None,
        record_every: int = 1, keep_points: bool = False,
        early_stop: Callable[[int, np.ndarray], bool] | None = None) -> O2NCResult:
    """Online-to-nonconvex conversion with a two-point zeroth-order gradient estimator."""
    if cfg.rho is None or cfg.nu is None:
        raise ConfigError("izo needs rho and nu in the configuration")
    d = np.asarray(x0).size

    def est(z, rng):
        return izo_gradient_estimate(value_oracle, z, cfg.rho, sample_sphere(rng, d))

    return _o2nc_loop(est, x0, cfg, _counter_of(value_oracle), value_fn, record_every, keep_points, early_stop)


@dataclass
class PIGDResult:
    x_out: np.ndarray
    trace: RunTrace
    iterates: np.ndarray      # x_0..x_T
    out_index: int


def pigd(oracle: GradOracle, x0: np.ndarray, cfg: SolverConfig, value_fn: ValueOracle | None = None,
         record_every: int = 1) -> PIGDResult:
    """x_{t+1} = x_t - eta * oracle(x_t + delta w_t); x_out uniform over x_0..x_{T-1}."""
    rng = make_rng(cfg.seed)
    x = np.asarray(x0, dtype=float).copy()
    d = x.size
    T = int(cfg.T)
    its = np.empty((T + 1, d))
    its[0] = x
    rec = _Recorder(_counter_of(oracle), value_fn, record_every)
    for t in range(T):
        w = sample_sphere(rng, d)
        g = _checked(oracle(x + cfg.goldstein_delta * w), d)
        rec(t, x, float(np.linalg.norm(g)), float(np.linalg.norm(g)))
        x = x - cfg.eta * g
        its[t + 1] = x
    rec(T, x, float("nan"), float("nan"), force=True)
    idx = int(rng.integers(T))
    rec.trace.x_out = its[idx].copy()
    rec.trace.termination = "T steps"
    return PIGDResult(its[idx].copy(), rec.trace, its, idx)


# --------------------------------------------------------------------------
# online gradient descent


@dataclass
class OGDResult:
    deltas: np.ndarray        # (M, d): Delta_1..Delta_M
    losses: np.ndarray        # (M, d): true g_m

    def regret(self, u: np.ndarray) -> float:
        """sum_m <g_m, Delta_m - u>."""
        u = np.asarray(u, dtype=float)
        return float(np.sum(self.losses * (self.deltas - u)))

    def max_regret(self, D: float) -> float:
        """Regret against the worst comparator in the D-ball."""
        return float(np.sum(self.losses * self.deltas)) + D * float(np.linalg.norm(self.losses.sum(axis=0)))


def inexact_ogd_regret(losses: Sequence[np.ndarray], noisy: Sequence[np.ndarray], D: float, eta: float) -> OGDResult:
    """Delta_1 = 0, Delta_{m+1} = clip_D(Delta_m - eta g~_m)."""
    g = np.atleast_2d(np.asarray(losses, dtype=float))
    gt = np.atleast_2d(np.asarray(noisy, dtype=float))
    if g.shape != gt.shape:
        raise InputError("losses and noisy losses differ in shape")
    if not (D > 0 and eta > 0):
        raise InputError("D and eta must be positive")
    Mn, d = g.shape
    deltas = np.zeros((Mn, d))
    Delta = np.zeros(d)
    for m in range(Mn):
        deltas[m] = Delta
        Delta = clip(Delta - eta * gt[m], D)
    return OGDResult(deltas, g)


def ogd_regret_bound(D: float, eta: float, G_tilde: float, alpha: float, M: int) -> float:
    """D^2/eta + G~^2 eta M + alpha D M."""
    return D**2 / eta + G_tilde**2 * eta * M + alpha * D * M
