import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import EQ, INEQ, quad_instance, small
from linbilevel.errors import EvaluationError, FactorizationError, InputError
from linbilevel.problem import (BilevelInstance, LinearConstraint, OracleCounter, QuadraticInstanceSpec,
                                RegularityEstimates, SmoothFunction, Tag, dumps_instance, eval_h,
                                gen_quadratic, load_instance, loads_instance, make_rng, probe_regularity,
                                save_instance)


class TestEvalH:
    def test_identity_feasible(self):
        con = LinearConstraint(np.eye(2), np.eye(2), np.zeros(2), EQ)
        np.testing.assert_array_equal(eval_h(con, np.array([1.0, 2.0]), np.array([1.0, 2.0])), [0.0, 0.0])

    def test_single_row(self):
        con = LinearConstraint([[1.0, 0.0]], [[0.0, 1.0]], [1.0])
        np.testing.assert_allclose(eval_h(con, np.array([3.0, 7.0]), np.array([5.0, 1.0])), [1.0])

    def test_matches_naive_loops(self):
        rng = make_rng(3)
        A, B, b = rng.standard_normal((3, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)
        x, y = rng.standard_normal(5), rng.standard_normal(5)
        naive = np.zeros(3)
        for i in range(3):
            s = -b[i]
            for j in range(5):
                s += A[i, j] * x[j] - B[i, j] * y[j]
            naive[i] = s
        np.testing.assert_allclose(eval_h(LinearConstraint(A, B, b), x, y), naive, atol=1e-12)

    def test_dimension_mismatch(self):
        con = LinearConstraint(np.eye(2), np.eye(2), np.zeros(2))
        with pytest.raises(InputError):
            eval_h(con, np.ones(3), np.ones(2))

    def test_rank_deficient_B_rejected(self):
        with pytest.raises(FactorizationError):
            LinearConstraint(np.zeros((2, 1)), [[1.0, 1.0], [2.0, 2.0]], np.zeros(2))
        with pytest.raises(FactorizationError):
            LinearConstraint(np.zeros((3, 1)), np.ones((3, 2)), np.zeros(3))

    def test_non_finite_rejected(self):
        with pytest.raises(InputError):
            LinearConstraint([[np.nan]], [[1.0]], [0.0])


class TestGenQuadratic:
    def test_deterministic(self):
        spec = QuadraticInstanceSpec(4, 8, 3, seed=11)
        a, b = gen_quadratic(spec), gen_quadratic(spec)
        assert dumps_instance(a) == dumps_instance(b)
        np.testing.assert_array_equal(a.quad.Q, b.quad.Q)

    def test_large_size_mu_floor(self):
        inst = gen_quadratic(QuadraticInstanceSpec(100, 200, 40, seed=0))
        assert np.linalg.eigvalsh(inst.quad.Q)[0] >= 0.01
        assert inst.regularity.mu_g >= 0.01
        assert inst.d_h == 40

    def test_small_mu_floor_independent_eigensolver(self):
        inst = gen_quadratic(QuadraticInstanceSpec(2, 5, 2, seed=4, mu_floor=0.3))
        ev = np.linalg.eigvals(inst.quad.Q).real      # general (non-symmetric) solver as the oracle
        assert ev.min() >= 0.3 - 1e-10
        assert abs(inst.regularity.mu_g - ev.min()) <= 1e-8

    def test_y_zero_strictly_feasible(self):
        inst = gen_quadratic(QuadraticInstanceSpec(3, 10, 4, seed=2))
        assert np.all(eval_h(inst, np.ones(3), np.zeros(10)) < 0)
        np.testing.assert_array_equal(inst.constraint.A, 0.0)

    def test_n_const_too_large(self):
        with pytest.raises(InputError):
            QuadraticInstanceSpec(2, 3, 4)

    def test_functions(self):
        inst = small(1)
        q = inst.quad
        rng = make_rng(0)
        x, y = rng.standard_normal(3), rng.standard_normal(6)
        assert inst.f(x, y) == pytest.approx(q.c @ y + q.reg_x * x @ x + q.reg_y * y @ y)
        assert inst.g(x, y) == pytest.approx(0.5 * y @ q.Q @ y + x @ q.P @ y)
        np.testing.assert_allclose(inst.grad_g_y(x, y), q.Q @ y + q.P.T @ x)
        np.testing.assert_allclose(inst.grad_g_x(x, y), q.P @ y)


class TestCounters:
    def test_exact_increments(self):
        inst = small(0)
        c = OracleCounter()
        x, y = np.zeros(3), np.zeros(6)
        inst.f(x, y, c)
        inst.grad_f(x, y, c)
        inst.grad_f_y(x, y, c)
        inst.g(x, y, c)
        inst.grad_g(x, y, c)
        inst.grad_g_x(x, y, c)
        inst.grad_g_y(x, y, c)
        assert c.as_tuple() == (1, 2, 1, 3)
        assert c.total == 7
        assert (c - OracleCounter(1, 1, 1, 1)).as_tuple() == (0, 1, 0, 2)


class TestProbeRegularity:
    def test_isotropic_quadratic(self):
        inst = quad_instance(2 * np.eye(3), np.zeros((2, 3)), np.zeros(3), np.zeros((1, 2)), [[1.0, 0, 0]], [0.0])
        reg = probe_regularity(inst, 50)
        assert reg.mu_g == pytest.approx(2.0)
        assert reg.C_g == pytest.approx(2.0)
        assert reg.tag("mu_g") is Tag.EXACT
        assert reg.probed["mu_g"] == pytest.approx(2.0)
        assert reg.probed["C_g_yy"] == pytest.approx(2.0)

    def test_linear_f_lipschitz(self):
        c = np.array([3.0, -4.0, 1.0])
        inst = quad_instance(np.eye(3), np.zeros((2, 3)), c, np.zeros((1, 2)), [[1.0, 0, 0]], [0.0])
        reg = probe_regularity(inst, 1000, prefer_exact=False)
        assert reg.L_f == pytest.approx(np.linalg.norm(c), rel=0.05)
        assert reg.tag("L_f") is Tag.PROBED

    def test_too_few_samples(self):
        with pytest.raises(InputError):
            probe_regularity(small(0), 0)

    def test_non_finite_oracle(self):
        base = small(0)
        bad = SmoothFunction(lambda x, y: np.nan, lambda x, y: np.full(3, np.nan), lambda x, y: np.full(6, np.nan))
        inst = BilevelInstance(3, 6, bad, base.lower, base.constraint, base.regularity)
        with pytest.raises(EvaluationError):
            probe_regularity(inst, 5)


class TestRegularity:
    def test_requires_positive_mu(self):
        with pytest.raises(InputError):
            RegularityEstimates(1.0, 1.0, 1.0, 0.0)
        with pytest.raises(InputError):
            RegularityEstimates(np.inf, 1.0, 1.0, 1.0)

    def test_kappa(self):
        assert RegularityEstimates(1.0, 1.0, 10.0, 2.0).kappa == 5.0


class TestInstanceFiles:
    def test_roundtrip(self, tmp_path):
        inst = small(5, kind=EQ)
        p = tmp_path / "i.json"
        save_instance(inst, p)
        back = load_instance(p)
        np.testing.assert_array_equal(back.quad.Q, inst.quad.Q)
        np.testing.assert_array_equal(back.constraint.B, inst.constraint.B)
        assert back.kind is EQ
        assert dumps_instance(back) == p.read_text()

    def test_rejects_nan(self):
        d = json.loads(dumps_instance(small(0)))
        d["b"][0] = float("nan")
        with pytest.raises(InputError):
            loads_instance(json.dumps(d))

    def test_rejects_missing_field(self):
        d = json.loads(dumps_instance(small(0)))
        del d["Q"]
        with pytest.raises(InputError):
            loads_instance(json.dumps(d))

    def test_rejects_garbage(self):
        with pytest.raises(InputError):
            loads_instance("{not json")


class TestInvariants:
    @given(st.integers(0, 2**32), st.integers(1, 4), st.integers(2, 9), st.data())
    def test_generated_instances(self, seed, dx, dy, data):
        m = data.draw(st.integers(1, dy))
        kind = data.draw(st.sampled_from([EQ, INEQ]))
        spec = QuadraticInstanceSpec(dx, dy, m, seed=seed, kind=kind)
        inst = gen_quadratic(spec)
        # pure function of the instance spec
        assert dumps_instance(inst) == dumps_instance(gen_quadratic(spec))
        # strong convexity recorded exactly
        assert abs(inst.regularity.mu_g - np.linalg.eigvalsh(inst.quad.Q)[0]) <= 1e-8
        assert inst.regularity.mu_g >= spec.mu_floor - 1e-12
        # full row rank
        sv = np.linalg.svd(inst.constraint.B, compute_uv=False)
        assert sv[-1] > 1e-8 * sv[0]
        # oracles are finite with matching shapes
        rng = make_rng(seed)
        x, y = rng.standard_normal(dx), rng.standard_normal(dy)
        gx, gy = inst.grad_g(x, y)
        fx, fy = inst.grad_f(x, y)
        assert gx.shape == fx.shape == (dx,) and gy.shape == fy.shape == (dy,)
        assert np.isfinite([inst.f(x, y), inst.g(x, y)]).all()
        assert np.all(np.isfinite(np.concatenate([gx, gy, fx, fy])))
        assert eval_h(inst, x, y).shape == (m,)
