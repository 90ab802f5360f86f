"""Desk-scale experiments: convergence against the exact-KKT baseline,
alpha sweeps and per-hypergradient cost scaling.

Output layout of ``run_convergence``::

    <out>/traces/seed_<k>.csv            first-order run
    <out>/traces/seed_<k>_baseline.csv   same solver, exact KKT oracle
    <out>/traces/seed_<k>_graderr.csv    ||grad~F - grad F|| at the first-order iterates
    <out>/summary.csv                    per-iteration mean/std over seeds
    <out>/plotdata/*.tsv                 x, mean, std
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import exact_hypergrad_kkt, exact_sensitivity, exact_value
from .eq_oracle import EqualityOracle
from .errors import InputError
from .ineq_oracle import InequalityOracle, PenaltyParams, inexact_grad_ineq, zeroth_order_value
from .outer import (
    FeasibleSet,
    RunTrace,
    SolverConfig,
    TraceRecord,
    inexact_pgd,
    izo,
    oigrm,
    pigd,
    presolve_gap,
)
from .problem import ConstraintKind, OracleCounter, QuadraticInstanceSpec, gen_quadratic, make_rng

FAMILIES = ("eq_quadratic", "ineq_quadratic")
SOLVERS = ("inexact_pgd", "oigrm", "izo", "pigd")


@dataclass
class ExperimentSpec:
    family: str = "ineq_quadratic"
    dim_x: int = 100
    dim_y: int = 200
    n_const: int = 40
    seeds: list = field(default_factory=lambda: list(range(10)))
    solver: str = "inexact_pgd"
    eps: float = 0.1
    delta: float = 0.25
    alpha: float = 0.1
    max_iters: int = 50
    output_dir: str | Path = "bench_out"
    record_every: int = 1
    step_C: float | None = None          # PGD step 1/step_C; default: local smoothness of F at x0
    D: float | None = None               # overrides of the theoretical OIGRM/IZO/PIGD defaults
    eta: float | None = None
    value_accuracy: float = 1e-6         # accuracy of the recorded F values
    reg_x: float = 0.01
    reg_y: float = 0.01
    mu_floor: float = 0.01
    timing: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.solver not in SOLVERS:
            raise InputError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if not self.seeds:
            raise InputError("seeds must be nonempty")
        if self.max_iters < 0:
            raise InputError("max_iters must be >= 0")
        for name in ("eps", "delta", "alpha", "value_accuracy"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if self.n_const > self.dim_y:
            raise InputError("n_const exceeds dim_y")

    @property
    def kind(self) -> ConstraintKind:
        return ConstraintKind.EQUALITY if self.family == "eq_quadratic" else ConstraintKind.INEQUALITY

    def instance(self, seed: int, dim_y: int | None = None, n_const: int | None = None):
        return gen_quadratic(QuadraticInstanceSpec(
            self.dim_x, self.dim_y if dim_y is None else dim_y, self.n_const if n_const is None else n_const,
            seed=seed, reg_x=self.reg_x, reg_y=self.reg_y, kind=self.kind, mu_floor=self.mu_floor))


# --------------------------------------------------------------------------
# helpers


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_table(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read a numeric CSV/TSV written by this module."""
    path = Path(path)
    delim = "\t" if path.suffix == ".tsv" else ","
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delim))
    if not rows:
        raise InputError(f"{path} is empty")
    data = np.array([[float(v) if v != "" else np.nan for v in r] for r in rows[1:]], dtype=float)
    return rows[0], data.reshape(len(rows) - 1, len(rows[0]))


def _write_tsv(path: Path, x, mean, std) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["x", "mean", "std"])
        for a, b, c in zip(x, mean, std):
            w.writerow([int(a), repr(float(b)), repr(float(c))])


class _ErrorProbe:
    """Wraps an inexact gradient oracle and logs its error against the exact one."""

    def __init__(self, oracle, exact):
        self.oracle, self.exact = oracle, exact
        self.counter = getattr(oracle, "counter", None)
        self.errors: list[float] = []

    def __call__(self, x):
        g = self.oracle(x)
        self.errors.append(float(np.linalg.norm(g - self.exact(x))))
        return g


class _ExactGrad:
    def __init__(self, inst):
        self.inst = inst
        self.counter = OracleCounter()

    def __call__(self, x):
        self.counter.f_grads += 1
        self.counter.g_grads += 1
        return exact_hypergrad_kkt(self.inst, x, allow_degenerate=True)


def _value_recorder(inst, accuracy: float):
    """F(x) via the zeroth-order value oracle, warm-started along the run."""
    state = {"pd": None}

    def F(x):
        z = zeroth_order_value(inst, x, accuracy, warm=state["pd"])
        state["pd"] = z.pd
        return z.value

    return F


def _local_smoothness(inst, x0) -> float:
    q = inst.quad
    J = exact_sensitivity(inst, x0, allow_degenerate=True).dy_dx
    return 2.0 * q.reg_x + 2.0 * q.reg_y * float(np.linalg.norm(J, 2)) ** 2


def _first_order_oracle(spec: ExperimentSpec, inst):
    if spec.kind is ConstraintKind.EQUALITY:
        return EqualityOracle(inst, spec.eps)
    return InequalityOracle(inst, PenaltyParams(spec.alpha))


def _solver_config(spec: ExperimentSpec, inst, x0, d: int) -> SolverConfig:
    grad0 = exact_hypergrad_kkt(inst, x0, allow_degenerate=True)
    L = max(float(np.linalg.norm(grad0)), 1e-12)
    F_gap = presolve_gap(lambda x: exact_value(inst, x), x0,
                         lambda x: exact_hypergrad_kkt(inst, x, allow_degenerate=True),
                         step=1.0 / _local_smoothness(inst, x0))
    T = max(spec.max_iters, 1)
    if spec.solver == "oigrm":
        cfg = SolverConfig.oigrm_defaults(spec.eps, spec.delta, L, F_gap, alpha=spec.alpha, T=T)
    elif spec.solver == "izo":
        cfg = SolverConfig.izo_defaults(spec.eps, spec.delta, L, F_gap, d, alpha=spec.alpha, T=T)
    else:
        cfg = SolverConfig.pigd_defaults(spec.eps, spec.delta, L, F_gap, d, T, alpha=spec.alpha)
    if spec.solver in ("oigrm", "izo") and spec.D is None and cfg.M > T:
        # the iteration budget is shorter than one averaging window: widen the
        # clip radius so the budget spans exactly one window, keeping eta / D
        radius = cfg.nu if cfg.nu is not None else cfg.goldstein_delta
        D = radius / T
        cfg = cfg.with_(D=D, eta=cfg.eta * D / cfg.D)
    if spec.D is not None:
        cfg = cfg.with_(D=spec.D)
    if spec.eta is not None:
        cfg = cfg.with_(eta=spec.eta)
    return cfg


def _run_solver(spec: ExperimentSpec, inst, x0, grad_oracle, value_oracle, F, seed: int) -> RunTrace:
    d = x0.size
    if spec.max_iters == 0:
        tr = RunTrace([TraceRecord(0, F(x0), float("nan"), float("nan"), (0, 0, 0, 0), 0.0, float(np.linalg.norm(x0)))])
        tr.x_out = x0.copy()
        tr.termination = "0 iterations"
        return tr
    if spec.solver == "inexact_pgd":
        C = spec.step_C if spec.step_C is not None else _local_smoothness(inst, x0)
        res = inexact_pgd(grad_oracle, x0, C, FeasibleSet(), spec.max_iters, value_fn=F,
                          record_every=spec.record_every)
        return res.trace
    cfg = _solver_config(spec, inst, x0, d).with_(seed=seed)
    if spec.solver == "oigrm":
        return oigrm(grad_oracle, x0, cfg, value_fn=F, record_every=spec.record_every).trace
    if spec.solver == "izo":
        return izo(value_oracle, x0, cfg, value_fn=F, record_every=spec.record_every).trace
    return pigd(grad_oracle, x0, cfg, value_fn=F, record_every=spec.record_every).trace


class _ValueOracle:
    def __init__(self, fn):
        self.fn = fn
        self.counter = OracleCounter()

    def __call__(self, x):
        self.counter.f_evals += 1
        return self.fn(x)


# --------------------------------------------------------------------------
# experiments


@dataclass
class ConvergenceResult:
    final_first_order: np.ndarray     # final F per seed
    final_baseline: np.ndarray
    output_dir: Path

    @property
    def relative_gap(self) -> float:
        a, b = self.final_first_order.mean(), self.final_baseline.mean()
        return abs(a - b) / max(abs(b), 1e-300)


def run_convergence(spec: ExperimentSpec) -> ConvergenceResult:
    out = Path(spec.output_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    fo_F, base_F, errs_all, ts = [], [], [], None
    finals_fo, finals_base = [], []
    for seed in spec.seeds:
        inst = spec.instance(seed)
        x0 = np.zeros(inst.dim_x)
        exact = _ExactGrad(inst)
        F = _value_recorder(inst, spec.value_accuracy)
        if spec.kind is ConstraintKind.INEQUALITY:
            zv = _ValueOracle(lambda x, inst=inst: zeroth_order_value(inst, x, spec.alpha).value)
        else:
            zv = _ValueOracle(lambda x, inst=inst: zeroth_order_value(inst, x, spec.eps).value)
        probe = _ErrorProbe(_first_order_oracle(spec, inst), exact)
        tr = _run_solver(spec, inst, x0, probe, zv, F, seed)
        F_b = _value_recorder(inst, spec.value_accuracy)
        trb = _run_solver(spec, inst, x0, exact, _ValueOracle(lambda x, inst=inst: exact_value(inst, x)), F_b, seed)
        tr.to_csv(out / "traces" / f"seed_{seed}.csv", timing=spec.timing)
        trb.to_csv(out / "traces" / f"seed_{seed}_baseline.csv", timing=spec.timing)
        _write_rows(out / "traces" / f"seed_{seed}_graderr.csv", ["t", "grad_err"],
                    [(t, e) for t, e in enumerate(probe.errors)])
        t_fo, t_b = tr.column("t"), trb.column("t")
        if ts is None:
            ts = t_fo
        if not (np.array_equal(ts, t_fo) and np.array_equal(ts, t_b)):
            raise InputError("traces of different seeds are not aligned")
        fo_F.append(tr.column("fval"))
        base_F.append(trb.column("fval"))
        errs_all.append(np.array(probe.errors, dtype=float))
        finals_fo.append(fo_F[-1][-1])
        finals_base.append(base_F[-1][-1])

    fo_F, base_F = np.array(fo_F), np.array(base_F)
    n_err = min((e.size for e in errs_all), default=0)
    err = np.array([e[:n_err] for e in errs_all]) if n_err else np.zeros((len(spec.seeds), 0))
    err_at = np.full((len(spec.seeds), ts.size), np.nan)
    for j, t in enumerate(ts.astype(int)):
        if t < n_err:
            err_at[:, j] = err[:, t]
    rows = []
    for j, t in enumerate(ts.astype(int)):
        rows.append((t, fo_F[:, j].mean(), fo_F[:, j].std(), base_F[:, j].mean(), base_F[:, j].std(),
                     err_at[:, j].mean(), err_at[:, j].std()))
    _write_rows(out / "summary.csv",
                ["t", "F_first_order_mean", "F_first_order_std", "F_baseline_mean", "F_baseline_std",
                 "grad_err_mean", "grad_err_std"], rows)
    _write_tsv(out / "plotdata" / "F_first_order.tsv", ts, fo_F.mean(0), fo_F.std(0))
    _write_tsv(out / "plotdata" / "F_baseline.tsv", ts, base_F.mean(0), base_F.std(0))
    _write_tsv(out / "plotdata" / "grad_err.tsv", ts, err_at.mean(0), err_at.std(0))
    return ConvergenceResult(np.array(finals_fo), np.array(finals_base), out)


@dataclass
class AlphaSweepResult:
    alphas: np.ndarray
    mean_grad_err: np.ndarray
    std: np.ndarray
    final_gap: np.ndarray


def run_alpha_sweep(spec: ExperimentSpec, alphas) -> AlphaSweepResult:
    """Oracle error along the exact-baseline PGD trajectory, and the final objective gap, per alpha."""
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise InputError("alphas must be nonempty")
    if spec.kind is not ConstraintKind.INEQUALITY:
        raise InputError("the alpha sweep needs the inequality family")
    out = Path(spec.output_dir)
    per_seed = np.zeros((len(alphas), len(spec.seeds)))
    gaps = np.zeros((len(alphas), len(spec.seeds)))
    N = max(spec.max_iters, 1)
    for j, seed in enumerate(spec.seeds):
        inst = spec.instance(seed)
        x0 = np.zeros(inst.dim_x)
        C = spec.step_C if spec.step_C is not None else _local_smoothness(inst, x0)
        exact = _ExactGrad(inst)
        base = inexact_pgd(exact, x0, C, FeasibleSet(), N, keep_iterates=True)
        traj = base.iterates
        grads = [exact(x) for x in traj]
        F_base = exact_value(inst, traj[-1])
        for i, a in enumerate(alphas):
            orc = InequalityOracle(inst, PenaltyParams(a))
            per_seed[i, j] = np.mean([np.linalg.norm(orc(x) - g) for x, g in zip(traj, grads)])
            run = inexact_pgd(InequalityOracle(inst, PenaltyParams(a)), x0, C, FeasibleSet(), N, keep_iterates=True)
            gaps[i, j] = exact_value(inst, run.iterates[-1]) - F_base
    res = AlphaSweepResult(np.array(alphas), per_seed.mean(1), per_seed.std(1), gaps.mean(1))
    _write_rows(out / "alpha_sweep.csv", ["alpha", "mean_grad_err", "std", "final_gap"],
                zip(res.alphas, res.mean_grad_err, res.std, res.final_gap))
    return res


@dataclass
class ScalingResult:
    dy: np.ndarray
    t_first_order_ms: np.ndarray
    t_exact_ms: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return self.t_exact_ms / self.t_first_order_ms


def run_scaling(spec: ExperimentSpec, dy_list, n_calls: int = 20, warmups: int = 3,
                const_ratio: int = 5) -> ScalingResult:
    """Median wall time per hypergradient, first-order oracle vs exact KKT, with n_const = d_y / const_ratio."""
    dy_list = [int(v) for v in dy_list]
    if not dy_list:
        raise InputError("dy_list must be nonempty")
    if n_calls < 1 or warmups < 0:
        raise InputError("n_calls must be >= 1 and warmups >= 0")
    rows = []
    for dy in dy_list:
        m = dy // const_ratio
        if m < 1:
            raise InputError(f"d_y={dy} is smaller than the n_const rule (d_y / {const_ratio} >= 1)")
        inst = spec.instance(spec.seeds[0], dim_y=dy, n_const=m)
        rng = make_rng(spec.seeds[0] + 10_000)
        t_fo, t_ex = [], []
        for k in range(warmups + n_calls):
            x = rng.standard_normal(inst.dim_x)
            t0 = time.perf_counter()
            if spec.kind is ConstraintKind.INEQUALITY:
                inexact_grad_ineq(inst, x, PenaltyParams(spec.alpha))
            else:
                EqualityOracle(inst, spec.eps, warm_start=False)(x)
            t1 = time.perf_counter()
            exact_hypergrad_kkt(inst, x, allow_degenerate=True)
            t2 = time.perf_counter()
            if k >= warmups:
                t_fo.append(1e3 * (t1 - t0))
                t_ex.append(1e3 * (t2 - t1))
        rows.append((dy, float(np.median(t_fo)), float(np.median(t_ex))))
    res = ScalingResult(*(np.array(c, dtype=float) for c in zip(*rows)))
    _write_rows(Path(spec.output_dir) / "scaling.csv", ["dy", "t_first_order_ms", "t_exact_ms"], rows)
    return res


def solve_instance(inst, solver: str = "inexact_pgd", eps: float = 0.1, delta: float = 0.25,
                   alpha: float = 0.1, max_iters: int = 50, seed: int = 0, record_every: int = 1,
                   value_accuracy: float = 1e-6, x0: np.ndarray | None = None) -> RunTrace:
    """Run one outer solver with the first-order oracle on a quadratic-family instance.

    The returned trace carries ``x_out``; its F values come from the
    zeroth-order value oracle at accuracy ``value_accuracy``.
    """
    if inst.quad is None:
        raise InputError("solve_instance needs a quadratic-family instance")
    family = "eq_quadratic" if inst.constraint.kind is ConstraintKind.EQUALITY else "ineq_quadratic"
    spec = ExperimentSpec(family=family, dim_x=inst.dim_x, dim_y=inst.dim_y, n_const=inst.constraint.d_h,
                          seeds=[seed], solver=solver, eps=eps, delta=delta, alpha=alpha,
                          max_iters=max_iters, record_every=record_every, value_accuracy=value_accuracy)
    x0 = np.zeros(inst.dim_x) if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (inst.dim_x,):
        raise InputError(f"x0 must have shape ({inst.dim_x},), got {x0.shape}")
    acc = alpha if spec.kind is ConstraintKind.INEQUALITY else eps
    zv = _ValueOracle(lambda x: zeroth_order_value(inst, x, acc).value)
    return _run_solver(spec, inst, x0, _first_order_oracle(spec, inst), zv,
                       _value_recorder(inst, value_accuracy), seed)
