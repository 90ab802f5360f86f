"""Command-line entry point.

Exit codes: 0 ok, 1 input error, 2 convergence/numerical error, 3 I/O error.
Every failure prints exactly one line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench
from .diagnostics import exact_hypergrad_kkt, goldstein_certify
from .errors import (ConvergenceError, DegeneracyError, EvaluationError, FactorizationError,
                     InputError)
from .problem import (ConstraintKind, QuadraticInstanceSpec, gen_quadratic, load_instance,
                      save_instance)

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as InputError instead of exiting with 2."""

    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


def _positive_float(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}") from None
    if not (v > 0 and np.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be positive and finite, got {s}")
    return v


def _positive_int(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {s!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {s}")
    return v


def _nonneg_int(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {s!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {s}")
    return v


def _float_list(s: str) -> list[float]:
    return [_positive_float(v) for v in s.split(",") if v.strip()]


def _int_list(s: str) -> list[int]:
    return [_positive_int(v) for v in s.split(",") if v.strip()]


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--eps", type=_positive_float, default=0.1, help="target accuracy epsilon")
    p.add_argument("--delta", type=_positive_float, default=0.25, help="Goldstein radius delta")
    p.add_argument("--alpha", type=_positive_float, default=0.1, help="oracle inexactness alpha")
    p.add_argument("--solver", choices=bench.SOLVERS, default="inexact_pgd", help="outer solver")
    p.add_argument("--iters", type=_nonneg_int, default=50, help="outer iterations (caps T for oigrm/izo/pigd)")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="random seed")
    p.add_argument("--record-every", type=_positive_int, default=1, help="trace sampling period")


def _add_bench_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--family", choices=bench.FAMILIES, default="ineq_quadratic", help="instance family")
    p.add_argument("--dx", type=_positive_int, default=100, help="upper-level dimension")
    p.add_argument("--dy", type=_positive_int, default=200, help="lower-level dimension")
    p.add_argument("--nconst", type=_positive_int, default=40, help="number of constraints")
    p.add_argument("--seeds", type=_positive_int, default=10, help="number of seeds (0..n-1)")
    p.add_argument("--out", default="bench_out", help="output directory")
    p.add_argument("--timing", action="store_true", help="record wall-clock times in traces")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="linbilevel", description="Bilevel optimization with linearly constrained lower level.",
                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a quadratic instance", formatter_class=fmt)
    p.add_argument("--dx", type=_positive_int, default=100, help="upper-level dimension")
    p.add_argument("--dy", type=_positive_int, default=200, help="lower-level dimension")
    p.add_argument("--nconst", type=_positive_int, default=40, help="number of constraints")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="random seed")
    p.add_argument("--kind", choices=[k.value for k in ConstraintKind], default="inequality",
                   help="constraint kind")
    p.add_argument("--mu-floor", type=_positive_float, default=0.01, help="eigenvalue floor of Q")
    p.add_argument("--out", required=True, help="instance JSON path")

    for name, what in (("solve-eq", "equality"), ("solve-ineq", "inequality")):
        p = sub.add_parser(name, help=f"run an outer solver on an {what}-constrained instance",
                           formatter_class=fmt)
        p.add_argument("--inst", required=True, help="instance JSON path")
        _add_solver_flags(p)
        p.add_argument("--out", default="run", help="output directory (trace.csv, x_out.json)")
        p.add_argument("--timing", action="store_true", help="record wall-clock times in the trace")

    p = sub.add_parser("bench-convergence", help="first-order pipeline vs exact baseline",
                       formatter_class=fmt)
    _add_bench_flags(p)
    _add_solver_flags(p)

    p = sub.add_parser("bench-alpha", help="oracle error and final gap across alpha", formatter_class=fmt)
    _add_bench_flags(p)
    p.add_argument("--alphas", type=_float_list, default=[0.4, 0.2, 0.1, 0.05],
                   help="comma-separated alpha values")
    p.add_argument("--iters", type=_nonneg_int, default=50, help="PGD iterations")

    p = sub.add_parser("bench-scaling", help="time per hypergradient vs d_y", formatter_class=fmt)
    _add_bench_flags(p)
    p.add_argument("--dy-list", type=_int_list, default=[500, 1000, 1500, 2000], help="comma-separated d_y values")
    p.add_argument("--calls", type=_positive_int, default=20, help="timed calls per size")
    p.add_argument("--warmups", type=_nonneg_int, default=3, help="untimed warm-up calls")
    p.add_argument("--const-ratio", type=_positive_int, default=5, help="n_const = d_y / const-ratio")
    p.add_argument("--eps", type=_positive_float, default=0.1, help="equality-oracle accuracy")
    p.add_argument("--alpha", type=_positive_float, default=0.1, help="inequality-oracle accuracy")

    p = sub.add_parser("certify", help="Goldstein stationarity certificate at a point", formatter_class=fmt)
    p.add_argument("--inst", required=True, help="instance JSON path")
    p.add_argument("--x", required=True, help="point JSON (list or {\"x\": [...]})")
    p.add_argument("--delta", type=_positive_float, default=0.25, help="Goldstein radius delta")
    p.add_argument("--samples", type=_positive_int, default=128, help="sampled gradients")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="sampling seed")
    return parser


def _load_point(path: str, dim: int) -> np.ndarray:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from exc
    if isinstance(data, dict):
        if "x" not in data:
            raise InputError(f"{path}: expected a list or an object with key 'x'")
        data = data["x"]
    try:
        x = np.asarray(data, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{path}: x is not numeric") from exc
    if x.shape != (dim,) or not np.all(np.isfinite(x)):
        raise InputError(f"{path}: x must be a finite vector of length {dim}, got shape {x.shape}")
    return x


def _summary(trace) -> str:
    r = trace.records[-1]
    fe, fg, ge, gg = r.counters
    fval = "nan" if r.fval is None else f"{r.fval:.6g}"
    return (f"t={r.t} F={fval} grad_norm={r.grad_norm:.3e} stat={r.stat_measure:.3e} "
            f"f_evals={fe} f_grads={fg} g_evals={ge} g_grads={gg} ({trace.termination})")


def _cmd_gen(a) -> str:
    inst = gen_quadratic(QuadraticInstanceSpec(a.dx, a.dy, a.nconst, seed=a.seed, kind=ConstraintKind(a.kind),
                                               mu_floor=a.mu_floor))
    out = Path(a.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_instance(inst, out)
    return f"wrote {out} (d_x={inst.dim_x} d_y={inst.dim_y} d_h={inst.constraint.d_h} kind={a.kind})"


def _cmd_solve(a, kind: ConstraintKind) -> str:
    inst = load_instance(a.inst)
    if inst.constraint.kind is not kind:
        raise InputError(f"{a.command} needs an {kind.value} instance, {a.inst} is {inst.constraint.kind.value}")
    tr = bench.solve_instance(inst, a.solver, a.eps, a.delta, a.alpha, a.iters, a.seed, a.record_every)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    tr.to_csv(out / "trace.csv", timing=a.timing)
    (out / "x_out.json").write_text(json.dumps({"x": [float(v) for v in tr.x_out]}),
                                    encoding="utf-8")
    return _summary(tr)


def _bench_spec(a, **extra) -> bench.ExperimentSpec:
    return bench.ExperimentSpec(family=a.family, dim_x=a.dx, dim_y=a.dy, n_const=a.nconst,
                                seeds=list(range(a.seeds)), output_dir=a.out, timing=a.timing, **extra)


def _cmd_bench_convergence(a) -> str:
    spec = _bench_spec(a, solver=a.solver, eps=a.eps, delta=a.delta, alpha=a.alpha, max_iters=a.iters,
                       record_every=a.record_every)
    res = bench.run_convergence(spec)
    return (f"F_first_order={res.final_first_order.mean():.6g} F_baseline={res.final_baseline.mean():.6g} "
            f"relative_gap={res.relative_gap:.3e} out={res.output_dir}")


def _cmd_bench_alpha(a) -> str:
    res = bench.run_alpha_sweep(_bench_spec(a, max_iters=a.iters), a.alphas)
    pairs = " ".join(f"{al:g}:{e:.3e}" for al, e in zip(res.alphas, res.mean_grad_err))
    return f"mean_grad_err {pairs} out={a.out}"


def _cmd_bench_scaling(a) -> str:
    res = bench.run_scaling(_bench_spec(a, eps=a.eps, alpha=a.alpha), a.dy_list, n_calls=a.calls,
                            warmups=a.warmups, const_ratio=a.const_ratio)
    pairs = " ".join(f"{int(d)}:{r:.4f}" for d, r in zip(res.dy, res.ratio))
    return f"t_exact/t_first_order {pairs} out={a.out}"


def _cmd_certify(a) -> str:
    inst = load_instance(a.inst)
    x = _load_point(a.x, inst.dim_x)
    cert = goldstein_certify(lambda z: exact_hypergrad_kkt(inst, z, allow_degenerate=True), x, a.delta,
                             a.samples, seed=a.seed)
    return f"distance_upper_bound={cert.distance_upper_bound:.6e} delta={a.delta:g} samples={cert.n_samples}"


def dispatch(argv: list[str]) -> int:
    """Parse ``argv``, run the subcommand and map failures to the exit-code contract."""
    try:
        a = build_parser().parse_args(argv)
        if a.command == "gen":
            line = _cmd_gen(a)
        elif a.command == "solve-eq":
            line = _cmd_solve(a, ConstraintKind.EQUALITY)
        elif a.command == "solve-ineq":
            line = _cmd_solve(a, ConstraintKind.INEQUALITY)
        elif a.command == "bench-convergence":
            line = _cmd_bench_convergence(a)
        elif a.command == "bench-alpha":
            line = _cmd_bench_alpha(a)
        elif a.command == "bench-scaling":
            line = _cmd_bench_scaling(a)
        else:
            line = _cmd_certify(a)
    except SystemExit as exc:            # --help
        return int(exc.code or 0)
    except InputError as exc:
        print(f"error: {exc}".splitlines()[0], file=sys.stderr)
        return EXIT_INPUT
    except (ConvergenceError, EvaluationError, FactorizationError, DegeneracyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as exc:
        print(f"error: {exc}".splitlines()[0], file=sys.stderr)
        return EXIT_IO
    print(line)
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
