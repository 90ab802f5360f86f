import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from linbilevel.problem import (ConstraintKind, LinearConstraint, QuadraticData, QuadraticInstanceSpec,
                                build_quadratic_instance, gen_quadratic)

settings.register_profile(
    "invariants", max_examples=100, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("invariants")

EQ, INEQ = ConstraintKind.EQUALITY, ConstraintKind.INEQUALITY


def quad_instance(Q, P, c, A, B, b, kind=INEQ, reg_x=0.0, reg_y=0.0):
    """Hand-built member of the quadratic family."""
    data = QuadraticData(np.atleast_2d(np.asarray(Q, float)), np.atleast_2d(np.asarray(P, float)),
                         np.atleast_1d(np.asarray(c, float)), reg_x, reg_y)
    con = LinearConstraint(np.atleast_2d(np.asarray(A, float)), np.atleast_2d(np.asarray(B, float)),
                           np.atleast_1d(np.asarray(b, float)), kind)
    return build_quadratic_instance(data, con)


def one_dim_ineq():
    """g = 1/2 (y - x)^2 (up to x-only terms), f = y, constraint y <= 0."""
    return quad_instance([[1.0]], [[-1.0]], [1.0], [[0.0]], [[-1.0]], [0.0], INEQ)


def one_dim_eq(cross: bool = False):
    """g = 1/2 y^2 (+ x y), f = y, constraint x - y = 0."""
    return quad_instance([[1.0]], [[1.0 if cross else 0.0]], [1.0], [[1.0]], [[1.0]], [0.0], EQ)


def small(seed, kind=INEQ, dx=3, dy=6, m=3, mu_floor=0.1, coupled=False):
    return gen_quadratic(QuadraticInstanceSpec(dx, dy, m, seed=seed, kind=kind, mu_floor=mu_floor,
                                               x_coupled_constraint=coupled))


@pytest.fixture
def ineq1():
    return one_dim_ineq()


# --------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion, printed after the run

ACCEPTANCE_LINES: dict[str, str] = {}
_HYPOTHESIS_OUTCOMES: list[tuple[str, str]] = []


def report(criterion: str, passed: bool, detail: str) -> bool:
    """Record (and print) the acceptance line for ``criterion``; returns ``passed``."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)
    return passed


def pytest_runtest_logreport(report):
    # the hypothesis plugin marks every @given test with "hypothesis"
    if report.when == "call" and "hypothesis" in report.keywords:
        _HYPOTHESIS_OUTCOMES.append((report.nodeid, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    if _HYPOTHESIS_OUTCOMES and "9" in ACCEPTANCE_LINES:
        n_ok = sum(o == "passed" for _, o in _HYPOTHESIS_OUTCOMES)
        config_ok = ": PASS" in ACCEPTANCE_LINES["9"]
        ok = config_ok and n_ok == len(_HYPOTHESIS_OUTCOMES)
        ACCEPTANCE_LINES["9"] = (f"criterion 9: {'PASS' if ok else 'FAIL'}  {n_ok}/{len(_HYPOTHESIS_OUTCOMES)} "
                                 f"property-based tests passed, "
                                 f"{settings.default.max_examples} examples each (need >= 100)")
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k[0]), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
