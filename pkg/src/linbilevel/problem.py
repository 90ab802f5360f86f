"""Bilevel instances, counted oracles and the random quadratic family.

Every solver consumes a :class:`BilevelInstance`.  Constraints are stored in
one canonical form for both kinds::

    h(x, y) = A x - B y - b        (Equality: h = 0, Inequality: h <= 0)

The random family is

    f(x, y) = c^T y + reg_x ||x||^2 + reg_y ||y||^2
    g(x, y) = 1/2 y^T Q y + x^T P y

with Q = G G^T / d_y + mu_floor I.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import EvaluationError, FactorizationError, InputError

MU_FLOOR = 0.01
RANK_TOL = 1e-8

Vector = np.ndarray


class ConstraintKind(str, enum.Enum):
    EQUALITY = "equality"
    INEQUALITY = "inequality"


class Tag(str, enum.Enum):
    USER_SUPPLIED = "user_supplied"
    PROBED = "probed"
    EXACT = "exact"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox 4x64) generator; all randomness goes through here."""
    if seed < 0 or seed >= 2**64:
        raise InputError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


# --------------------------------------------------------------------------
# counters


@dataclass
class OracleCounter:
    f_evals: int = 0
    f_grads: int = 0
    g_evals: int = 0
    g_grads: int = 0

    def snapshot(self) -> "OracleCounter":
        return OracleCounter(self.f_evals, self.f_grads, self.g_evals, self.g_grads)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.f_evals, self.f_grads, self.g_evals, self.g_grads)

    @property
    def total(self) -> int:
        return sum(self.as_tuple())

    def __sub__(self, other: "OracleCounter") -> "OracleCounter":
        return OracleCounter(*(a - b for a, b in zip(self.as_tuple(), other.as_tuple())))


# --------------------------------------------------------------------------
# constraint / regularity / function containers


@dataclass(frozen=True, eq=False)
class LinearConstraint:
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    kind: ConstraintKind = ConstraintKind.INEQUALITY
    rank_tol: float = RANK_TOL

    def __post_init__(self):
        A = np.array(self.A, dtype=float, ndmin=2)
        B = np.array(self.B, dtype=float, ndmin=2)
        b = np.array(self.b, dtype=float).reshape(-1)
        if A.shape[0] != B.shape[0] or B.shape[0] != b.shape[0]:
            raise InputError(f"constraint rows disagree: A{A.shape}, B{B.shape}, b{b.shape}")
        for name, arr in (("A", A), ("B", B), ("b", b)):
            if not np.all(np.isfinite(arr)):
                raise InputError(f"constraint {name} has non-finite entries")
            arr.setflags(write=False)
        if B.shape[0] > B.shape[1]:
            raise FactorizationError(f"B is {B.shape}: more rows than columns, cannot have full row rank")
        sv = np.linalg.svd(B, compute_uv=False)
        if sv.size and sv[-1] <= self.rank_tol * max(sv[0], 1.0):
            raise FactorizationError(
                f"B is numerically rank deficient (sigma_min={sv[-1]:.3e}, sigma_max={sv[0]:.3e})"
            )
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "kind", ConstraintKind(self.kind))
        object.__setattr__(self, "_sv", sv)

    @property
    def d_h(self) -> int:
        return self.B.shape[0]

    @property
    def sigma_min_B(self) -> float:
        return float(self._sv[-1]) if self._sv.size else 0.0

    @property
    def norm_B(self) -> float:
        return float(self._sv[0]) if self._sv.size else 0.0

    @property
    def norm_A(self) -> float:
        return float(np.linalg.norm(self.A, 2)) if self.A.size else 0.0

    def eval(self, x: Vector, y: Vector) -> Vector:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != (self.A.shape[1],) or y.shape != (self.B.shape[1],):
            raise InputError(
                f"h expects x of dim {self.A.shape[1]} and y of dim {self.B.shape[1]}, "
                f"got {x.shape} and {y.shape}"
            )
        return self.A @ x - self.B @ y - self.b


@dataclass(frozen=True)
class RegularityEstimates:
    """Lipschitz / smoothness / strong-convexity constants of an instance.

    ``C_g_yy`` is the smoothness of g in y alone (defaults to ``C_g``); inner
    solvers step with it since the joint constant is needlessly pessimistic.
    Tags: EXACT marks values derived analytically from instance data (either
    tight or a proven upper/lower bound), PROBED marks sampled values.
    """

    L_f: float
    C_f: float
    C_g: float
    mu_g: float
    L_y: float = 0.0
    R_dual: float = 0.0
    S_g: float = 0.0
    C_g_yy: float | None = None
    tags: dict = field(default_factory=dict)
    probed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.C_g_yy is None:
            object.__setattr__(self, "C_g_yy", self.C_g)
        for name in ("L_f", "C_f", "C_g", "mu_g", "L_y", "R_dual", "S_g", "C_g_yy"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise InputError(f"regularity constant {name}={val} must be finite and nonnegative")
        if self.mu_g <= 0:
            raise InputError(f"mu_g must be positive, got {self.mu_g}")
        tags = {k: Tag(v) for k, v in self.tags.items()}
        object.__setattr__(self, "tags", tags)

    @property
    def kappa(self) -> float:
        return self.C_g / self.mu_g

    def tag(self, name: str) -> Tag:
        return self.tags.get(name, Tag.USER_SUPPLIED)


@dataclass(frozen=True)
class SmoothFunction:
    """Value and partial gradients of a function of (x, y)."""

    value: Callable[[Vector, Vector], float]
    grad_x: Callable[[Vector, Vector], Vector]
    grad_y: Callable[[Vector, Vector], Vector]


@dataclass(frozen=True, eq=False)
class QuadraticData:
    """Raw data of a random-family instance (Hessians known in closed form)."""

    Q: np.ndarray
    P: np.ndarray
    c: np.ndarray
    reg_x: float
    reg_y: float

    def __post_init__(self):
        for name in ("Q", "P", "c"):
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class QuadraticInstanceSpec:
    dim_x: int
    dim_y: int
    n_const: int
    seed: int = 0
    reg_x: float = 0.01
    reg_y: float = 0.01
    x_coupled_constraint: bool = False
    kind: ConstraintKind = ConstraintKind.INEQUALITY
    mu_floor: float = MU_FLOOR

    def __post_init__(self):
        for name in ("dim_x", "dim_y", "n_const"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be a positive integer")
        if self.n_const > self.dim_y:
            raise InputError(f"n_const={self.n_const} exceeds dim_y={self.dim_y}")
        if self.reg_x < 0 or self.reg_y < 0:
            raise InputError("reg_x and reg_y must be nonnegative")
        if self.mu_floor <= 0:
            raise InputError("mu_floor must be positive")
        object.__setattr__(self, "kind", ConstraintKind(self.kind))


@dataclass(frozen=True, eq=False)
class BilevelInstance:
    dim_x: int
    dim_y: int
    upper: SmoothFunction
    lower: SmoothFunction
    constraint: LinearConstraint
    regularity: RegularityEstimates
    quad: QuadraticData | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.constraint.A.shape[1] != self.dim_x or self.constraint.B.shape[1] != self.dim_y:
            raise InputError("constraint matrices do not match (dim_x, dim_y)")

    @property
    def kind(self) -> ConstraintKind:
        return self.constraint.kind

    @property
    def d_h(self) -> int:
        return self.constraint.d_h

    # counted oracles -------------------------------------------------------

    def f(self, x: Vector, y: Vector, counter: OracleCounter | None = None) -> float:
        if counter is not None:
            counter.f_evals += 1
        return float(self.upper.value(x, y))

    def g(self, x: Vector, y: Vector, counter: OracleCounter | None = None) -> float:
        if counter is not None:
            counter.g_evals += 1
        return float(self.lower.value(x, y))

    def grad_f(self, x: Vector, y: Vector, counter: OracleCounter | None = None):
        if counter is not None:
            counter.f_grads += 1
        return self.upper.grad_x(x, y), self.upper.grad_y(x, y)

    def grad_g(self, x: Vector, y: Vector, counter: OracleCounter | None = None):
        if counter is not None:
            counter.g_grads += 1
        return self.lower.grad_x(x, y), self.lower.grad_y(x, y)

    def grad_f_y(self, x: Vector, y: Vector, counter: OracleCounter | None = None) -> Vector:
        if counter is not None:
            counter.f_grads += 1
        return self.upper.grad_y(x, y)

    def grad_g_y(self, x: Vector, y: Vector, counter: OracleCounter | None = None) -> Vector:
        if counter is not None:
            counter.g_grads += 1
        return self.lower.grad_y(x, y)

    def grad_f_x(self, x: Vector, y: Vector, counter: OracleCounter | None = None) -> Vector:
        if counter is not None:
            counter.f_grads += 1
        return self.upper.grad_x(x, y)

    def grad_g_x(self, x: Vector, y: Vector, counter: OracleCounter | None = None) -> Vector:
        if counter is not None:
            counter.g_grads += 1
        return self.lower.grad_x(x, y)

    def with_regularity(self, reg: RegularityEstimates) -> "BilevelInstance":
        return BilevelInstance(self.dim_x, self.dim_y, self.upper, self.lower,
                               self.constraint, reg, self.quad, self.seed)


def eval_h(inst: BilevelInstance | LinearConstraint, x: Vector, y: Vector) -> Vector:
    """Evaluate h(x, y) = A x - B y - b."""
    con = inst.constraint if isinstance(inst, BilevelInstance) else inst
    return con.eval(x, y)


# --------------------------------------------------------------------------
# quadratic family


def quadratic_functions(data: QuadraticData) -> tuple[SmoothFunction, SmoothFunction]:
    Q, P, c, rx, ry = data.Q, data.P, data.c, data.reg_x, data.reg_y

    upper = SmoothFunction(
        value=lambda x, y: float(c @ y + rx * (x @ x) + ry * (y @ y)),
        grad_x=lambda x, y: 2.0 * rx * x,
        grad_y=lambda x, y: c + 2.0 * ry * y,
    )
    lower = SmoothFunction(
        value=lambda x, y: float(0.5 * y @ (Q @ y) + x @ (P @ y)),
        grad_x=lambda x, y: P @ y,
        grad_y=lambda x, y: Q @ y + P.T @ x,
    )
    return upper, lower


def quadratic_regularity(data: QuadraticData, con: LinearConstraint, radius: float = 10.0) -> RegularityEstimates:
    """Analytic constants for a quadratic instance over the ball of the given radius.

    L_y uses S(x) = S(0) + B^+ A x (a translation when B has full row rank)
    together with nonexpansiveness of the Q-metric projection.
    """
    ev = np.linalg.eigvalsh(data.Q)
    mu, lam_max = float(ev[0]), float(ev[-1])
    if mu <= 0:
        raise InputError(f"Q is not positive definite (lambda_min={mu:.3e})")
    norm_P = float(np.linalg.norm(data.P, 2))
    norm_c = float(np.linalg.norm(data.c))
    reg = max(data.reg_x, data.reg_y)
    kappa_yy = lam_max / mu

    Bpinv = np.linalg.pinv(con.B)
    norm_BpA = float(np.linalg.norm(Bpinv @ con.A, 2)) if con.A.any() else 0.0
    if con.kind is ConstraintKind.EQUALITY:
        # y* is affine in x; its slope is exact
        K = np.block([[data.Q, -con.B.T], [con.B, np.zeros((con.d_h, con.d_h))]])
        sens = np.linalg.solve(K, np.vstack([-data.P.T, con.A]))
        L_y = float(np.linalg.norm(sens[: data.Q.shape[0]], 2))
        dlam = sens[data.Q.shape[0]:]
        y0, lam0 = np.split(np.linalg.solve(K, np.concatenate([np.zeros(data.Q.shape[0]), -con.b])), [data.Q.shape[0]])
        R_dual = float(np.linalg.norm(lam0) + np.linalg.norm(dlam, 2) * radius)
    else:
        L_y = norm_BpA + norm_P / mu + math.sqrt(kappa_yy) * norm_BpA
        y0_bound = math.sqrt(kappa_yy) * float(np.linalg.norm(Bpinv @ con.b))
        grad_bound = lam_max * (y0_bound + L_y * radius) + norm_P * radius
        R_dual = grad_bound / con.sigma_min_B
    exact = {k: Tag.EXACT for k in ("L_f", "C_f", "C_g", "mu_g", "L_y", "R_dual", "S_g", "C_g_yy")}
    return RegularityEstimates(
        L_f=norm_c + 2.0 * reg * radius,
        C_f=2.0 * reg,
        C_g=lam_max + norm_P,
        mu_g=mu,
        L_y=L_y,
        R_dual=R_dual,
        S_g=0.0,
        C_g_yy=lam_max,
        tags=exact,
    )


def build_quadratic_instance(data: QuadraticData, con: LinearConstraint, seed: int | None = None,
                             radius: float = 10.0) -> BilevelInstance:
    upper, lower = quadratic_functions(data)
    d_y, d_x = data.Q.shape[0], data.P.shape[0]
    if data.P.shape != (d_x, d_y) or data.c.shape != (d_y,):
        raise InputError("P must be (dim_x, dim_y) and c must be (dim_y,)")
    reg = quadratic_regularity(data, con, radius)
    return BilevelInstance(d_x, d_y, upper, lower, con, reg, data, seed)


def gen_quadratic(spec: QuadraticInstanceSpec) -> BilevelInstance:
    """Draw a random-family instance; a pure function of ``spec``.

    The constraint D y <= b (D standard normal) is stored canonically as
    B = -D, b > 0, so y = 0 is strictly feasible when x is not coupled
    into the constraint.
    """
    rng = make_rng(spec.seed)
    dx, dy, m = spec.dim_x, spec.dim_y, spec.n_const
    G = rng.standard_normal((dy, dy))
    Q = G @ G.T / dy + spec.mu_floor * np.eye(dy)
    Q = 0.5 * (Q + Q.T)
    P = rng.standard_normal((dx, dy))
    D = rng.standard_normal((m, dy))
    c = rng.standard_normal(dy)
    if spec.kind is ConstraintKind.INEQUALITY:
        b = np.abs(rng.standard_normal(m)) + 0.1
    else:
        b = rng.standard_normal(m)
    A_x = rng.standard_normal((m, dx)) if spec.x_coupled_constraint else np.zeros((m, dx))
    con = LinearConstraint(A_x, -D, b, spec.kind)
    data = QuadraticData(Q, P, c, spec.reg_x, spec.reg_y)
    return build_quadratic_instance(data, con, seed=spec.seed)


# --------------------------------------------------------------------------
# instance files


def _reject_constant(name: str):
    raise InputError(f"instance file contains non-finite value {name}")


def _matrix(obj, name: str, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.array(obj, dtype=float)
    if arr.size == 0:
        arr = arr.reshape(shape)
    if arr.shape != shape:
        raise InputError(f"field {name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"field {name} has non-finite entries")
    return arr


def instance_to_dict(inst: BilevelInstance) -> dict:
    if inst.quad is None:
        raise InputError("only quadratic-family instances can be serialized")
    q, con = inst.quad, inst.constraint
    return {
        "dim_x": inst.dim_x,
        "dim_y": inst.dim_y,
        "d_h": con.d_h,
        "kind": con.kind.value,
        "A": con.A.tolist(),
        "B": con.B.tolist(),
        "b": con.b.tolist(),
        "Q": q.Q.tolist(),
        "P": q.P.tolist(),
        "c": q.c.tolist(),
        "reg_x": q.reg_x,
        "reg_y": q.reg_y,
        "seed": inst.seed,
    }


def dumps_instance(inst: BilevelInstance) -> str:
    return json.dumps(instance_to_dict(inst), allow_nan=False)


def save_instance(inst: BilevelInstance, path: str | Path) -> None:
    Path(path).write_text(dumps_instance(inst), encoding="utf-8")


def loads_instance(text: str) -> BilevelInstance:
    try:
        d = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise InputError(f"instance file is not valid JSON: {exc}") from exc
    missing = {"dim_x", "dim_y", "d_h", "kind", "A", "B", "b", "Q", "P", "c", "reg_x", "reg_y"} - set(d)
    if missing:
        raise InputError(f"instance file missing fields: {sorted(missing)}")
    dx, dy, dh = int(d["dim_x"]), int(d["dim_y"]), int(d["d_h"])
    try:
        kind = ConstraintKind(d["kind"])
    except ValueError as exc:
        raise InputError(f"unknown constraint kind {d['kind']!r}") from exc
    con = LinearConstraint(_matrix(d["A"], "A", (dh, dx)), _matrix(d["B"], "B", (dh, dy)),
                           _matrix(d["b"], "b", (dh,)), kind)
    data = QuadraticData(_matrix(d["Q"], "Q", (dy, dy)), _matrix(d["P"], "P", (dx, dy)),
                         _matrix(d["c"], "c", (dy,)), float(d["reg_x"]), float(d["reg_y"]))
    if not (math.isfinite(data.reg_x) and math.isfinite(data.reg_y)):
        raise InputError("reg_x/reg_y must be finite")
    if not np.allclose(data.Q, data.Q.T, rtol=0, atol=1e-12):
        raise InputError("Q must be symmetric")
    seed = d.get("seed")
    return build_quadratic_instance(data, con, seed=None if seed is None else int(seed))


def load_instance(path: str | Path) -> BilevelInstance:
    return loads_instance(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# regularity probing


def probe_regularity(inst: BilevelInstance, n_samples: int, radius: float = 1.0, seed: int = 0,
                     prefer_exact: bool = True) -> RegularityEstimates:
    """Empirical constants from ``n_samples`` random pairs in a ball of ``radius``.

    Raw sampled numbers are always kept in ``.probed``.  For quadratic
    instances the analytic values are returned in the fields (tagged EXACT)
    unless ``prefer_exact`` is false.
    """
    if n_samples < 2:
        raise InputError(f"n_samples must be >= 2, got {n_samples}")
    if radius <= 0:
        raise InputError("radius must be positive")
    rng = make_rng(seed)
    dx, dy = inst.dim_x, inst.dim_y
    n = dx + dy

    def ball_point():
        v = rng.standard_normal(n)
        v *= radius * rng.random() ** (1.0 / n) / np.linalg.norm(v)
        return v[:dx], v[dx:]

    def finite(*arrs):
        for a in arrs:
            if not np.all(np.isfinite(a)):
                raise EvaluationError("oracle returned a non-finite value during probing")

    L_f = C_f = C_g = C_yy = 0.0
    mu_g = math.inf
    for _ in range(n_samples):
        xu, yu = ball_point()
        xv, yv = ball_point()
        fu, fv = inst.f(xu, yu), inst.f(xv, yv)
        gfu = np.concatenate(inst.grad_f(xu, yu))
        gfv = np.concatenate(inst.grad_f(xv, yv))
        ggu = np.concatenate(inst.grad_g(xu, yu))
        ggv = np.concatenate(inst.grad_g(xv, yv))
        # same x, different y: isolates the curvature of g(x, .)
        gyu = inst.grad_g_y(xu, yu)
        gyw = inst.grad_g_y(xu, yv)
        finite(fu, fv, gfu, gfv, ggu, ggv, gyu, gyw)
        dist = math.hypot(np.linalg.norm(xu - xv), np.linalg.norm(yu - yv))
        dy_ = yu - yv
        L_f = max(L_f, float(np.linalg.norm(gfu)), float(np.linalg.norm(gfv)))
        if dist > 0:
            L_f = max(L_f, abs(fu - fv) / dist)
            C_f = max(C_f, float(np.linalg.norm(gfu - gfv)) / dist)
            C_g = max(C_g, float(np.linalg.norm(ggu - ggv)) / dist)
        ny = float(dy_ @ dy_)
        if ny > 0:
            C_yy = max(C_yy, float(np.linalg.norm(gyu - gyw)) / math.sqrt(ny))
            mu_g = min(mu_g, float((gyu - gyw) @ dy_) / ny)

    probed = {"L_f": L_f, "C_f": C_f, "C_g": C_g, "mu_g": mu_g, "C_g_yy": C_yy}
    base = inst.regularity
    if inst.quad is not None and prefer_exact:
        exact = quadratic_regularity(inst.quad, inst.constraint, radius)
        return RegularityEstimates(
            L_f=exact.L_f, C_f=exact.C_f, C_g=exact.C_g, mu_g=exact.mu_g, L_y=exact.L_y,
            R_dual=exact.R_dual, S_g=exact.S_g, C_g_yy=exact.C_g_yy, tags=dict(exact.tags), probed=probed,
        )
    if not mu_g > 0:
        raise EvaluationError(f"probed strong convexity {mu_g} is not positive")
    tags = {k: Tag.PROBED for k in probed}
    for k in ("L_y", "R_dual", "S_g"):
        tags[k] = base.tag(k)
    return RegularityEstimates(
        L_f=L_f, C_f=C_f, C_g=C_g, mu_g=mu_g, L_y=base.L_y, R_dual=base.R_dual, S_g=base.S_g,
        C_g_yy=C_yy, tags=tags, probed=probed,
    )
