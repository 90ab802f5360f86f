import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import EQ
from linbilevel.diagnostics import exact_hypergrad_kkt, exact_sensitivity, exact_value, goldstein_certify
from linbilevel.eq_oracle import EqualityOracle
from linbilevel.errors import ConfigError, EvaluationError, InputError
from linbilevel.outer import (TRACE_COLUMNS, FeasibleSet, RunTrace, SolverConfig, clip, gradient_mapping,
                              inexact_ogd_regret, inexact_pgd, izo, izo_gradient_estimate, oigrm,
                              ogd_regret_bound, pigd, sample_sphere)
from linbilevel.problem import OracleCounter, QuadraticInstanceSpec, gen_quadratic, make_rng


def sign_oracle(x):
    return np.sign(x)


class CountingGrad:
    """Gradient oracle of 1/2 x^T H x + b^T x with an oracle counter."""

    def __init__(self, H, b=None):
        self.H = np.asarray(H, dtype=float)
        self.b = np.zeros(len(self.H)) if b is None else np.asarray(b, dtype=float)
        self.counter = OracleCounter()

    def __call__(self, x):
        self.counter.f_grads += 1
        return self.H @ x + self.b


class TestClip:
    def test_examples(self):
        np.testing.assert_array_equal(clip(np.zeros(2), 1.0), np.zeros(2))
        np.testing.assert_allclose(clip(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
        np.testing.assert_array_equal(clip(np.array([3.0, 4.0]), 10.0), [3.0, 4.0])

    def test_bad_radius(self):
        with pytest.raises(InputError):
            clip(np.ones(2), 0.0)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6), st.floats(1e-6, 1e3))
    def test_norm_bound(self, z, D):
        out = clip(np.array(z), D)
        assert np.linalg.norm(out) <= D * (1 + 1e-12)
        if np.linalg.norm(z) <= D:
            np.testing.assert_array_equal(out, z)


class TestGradientMapping:
    def test_all_space_is_gradient(self):
        g = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(gradient_mapping(np.ones(3), g, 3.0), g)

    def test_boundary_outward_gradient(self):
        G = gradient_mapping(np.array([0.0]), np.array([1.0]), 1.0, FeasibleSet.box(0.0, 1.0))
        np.testing.assert_array_equal(G, [0.0])

    def test_unsupported_set(self):
        with pytest.raises(InputError):
            gradient_mapping(np.zeros(2), np.zeros(2), 1.0, X="simplex")
        with pytest.raises(InputError):
            FeasibleSet("simplex")

    @given(st.integers(0, 2**32))
    def test_box_matches_clamp(self, seed):
        rng = make_rng(seed)
        d = int(rng.integers(1, 8))
        lo = rng.uniform(-2, 0, d)
        hi = lo + rng.uniform(0, 3, d)
        x = rng.uniform(lo, hi)
        g = 3 * rng.standard_normal(d)
        C = float(rng.uniform(0.1, 10))
        step = x - g / C
        naive = np.array([C * (x[i] - min(max(step[i], lo[i]), hi[i])) for i in range(d)])
        np.testing.assert_allclose(gradient_mapping(x, g, C, FeasibleSet.box(lo, hi)), naive, atol=1e-12)

    def test_ball_projection(self):
        X = FeasibleSet.ball(1.0)
        np.testing.assert_allclose(X.project(np.array([3.0, 4.0])), [0.6, 0.8])
        assert X.diameter(2) == 2.0


class TestInexactPGD:
    def test_one_step_on_quadratic(self):
        res = inexact_pgd(lambda x: x, np.array([3.0, -1.0]), 1.0, None, N=3)
        np.testing.assert_allclose(res.G_norms[1:], 0.0)
        np.testing.assert_array_equal(res.x_best, [0.0, 0.0])
        assert len(res.trace) == 4

    def test_bad_inputs(self):
        with pytest.raises(InputError):
            inexact_pgd(lambda x: x, np.zeros(2), 1.0, None, N=0)
        with pytest.raises(EvaluationError):
            inexact_pgd(lambda x: np.full(2, np.nan), np.zeros(2), 1.0, None, N=2)

    @pytest.mark.parametrize("beta", [0.0, 1e-3, 1e-2])
    def test_bias_bound(self, beta):
        rng = make_rng(7)
        d = 6
        Q = rng.standard_normal((d, d))
        H = Q @ Q.T / d + 0.05 * np.eye(d)
        b = rng.standard_normal(d)
        C_F = float(np.linalg.eigvalsh(H).max())
        X = FeasibleSet.box(-np.ones(d), np.ones(d))
        R_X = X.diameter(d)
        bias = rng.standard_normal(d)
        bias *= beta / max(np.linalg.norm(bias), 1e-300)

        def F(x):
            return 0.5 * x @ H @ x + b @ x

        # F* over the box by running exact projected gradient descent to convergence
        xs = inexact_pgd(lambda x: H @ x + b, np.zeros(d), C_F, X, N=20_000).x_best
        x0 = X.project(2 * rng.standard_normal(d))
        for N in (5, 20, 100):
            res = inexact_pgd(lambda x: H @ x + b + bias, x0, C_F, X, N=N)
            bound = C_F * (F(x0) - F(xs)) / N + beta * C_F * R_X
            assert res.G_norms[:N].min() ** 2 <= bound + 1e-12

    def test_equality_bilevel_reaches_tolerance(self):
        # mu_floor = 1 keeps F well conditioned; on the default floor the run is
        # the same but needs ~kappa_F = O(10^3) times more steps
        inst = gen_quadratic(QuadraticInstanceSpec(20, 50, 10, seed=0, kind=EQ, mu_floor=1.0))
        x0 = np.zeros(20)
        # F is quadratic on this family (y* is affine in x), so its smoothness is exact
        J = exact_sensitivity(inst, x0).dy_dx
        C_F = 2 * inst.quad.reg_x + 2 * inst.quad.reg_y * np.linalg.norm(J, 2) ** 2
        res = inexact_pgd(EqualityOracle(inst, 1e-3), x0, C_F, None, N=3000, stop_tol=5e-4)
        assert res.trace.termination == "stationarity tolerance"
        assert np.linalg.norm(exact_hypergrad_kkt(inst, res.x_best)) <= 1e-3
        # the count stays within the descent-lemma budget C_F (F(x0) - F*) / tol^2
        F_star = exact_value(inst, res.x_best)
        assert len(res.G_norms) - 1 <= C_F * (exact_value(inst, x0) - F_star) / 1e-6


class TestSolverConfig:
    def test_window_arithmetic(self):
        cfg = SolverConfig(eps=0.1, goldstein_delta=0.5, D=0.1, eta=0.01, T=20)
        assert (cfg.M, cfg.K) == (5, 4)
        res = oigrm(lambda x: x, np.ones(2), cfg)
        assert res.x_bars.shape == (4, 2)

    def test_izo_window_uses_nu(self):
        cfg = SolverConfig(eps=0.1, goldstein_delta=0.5, D=0.1, eta=0.01, T=20, rho=0.2, nu=0.3)
        assert (cfg.M, cfg.K) == (3, 6)

    def test_no_window_is_config_error(self):
        cfg = SolverConfig(eps=0.1, goldstein_delta=0.5, D=0.1, eta=0.01, T=4)
        assert cfg.K == 0
        with pytest.raises(ConfigError):
            oigrm(lambda x: x, np.ones(2), cfg)

    def test_invalid_fields(self):
        with pytest.raises(InputError):
            SolverConfig(eps=0.0, goldstein_delta=0.5, D=0.1, eta=0.01, T=10)
        with pytest.raises(InputError):
            SolverConfig(eps=0.1, goldstein_delta=0.5, D=0.1, eta=0.01, T=0)

    def test_defaults(self):
        cfg = SolverConfig.oigrm_defaults(0.1, 0.25, 2.0, 5.0)
        assert cfg.D == pytest.approx(0.25 * 0.01 / 4)
        assert cfg.eta == pytest.approx(0.25 * 1e-3 / 16)
        assert cfg.T == int(np.ceil(5.0 * 4 / (0.25 * 1e-3)))
        z = SolverConfig.izo_defaults(0.1, 0.25, 1.0, 5.0, d=3)
        assert z.rho == pytest.approx(0.125) and z.nu == pytest.approx(0.125)
        p = SolverConfig.pigd_defaults(0.1, 0.25, 1.0, 5.0, d=16, T=100, alpha=0.1)
        assert p.eta == pytest.approx(np.sqrt((5.0 + 0.25) * 0.25) / (10 * 2 * 1.1))


class TestOIGRM:
    def test_abs_value_certified(self):
        ok = 0
        for s in range(20):
            cfg = SolverConfig.oigrm_defaults(0.1, 0.25, 1.0, 5.0, seed=s)
            res = oigrm(sign_oracle, np.array([5.0]), cfg, record_every=1000)
            cert = goldstein_certify(sign_oracle, res.x_out, 0.25, 64, seed=s)
            ok += cert.distance_upper_bound <= 0.1
        assert ok >= 16

    def test_trace_invariants(self):
        H = np.diag([1.0, 4.0, 0.5])
        orc = CountingGrad(H)
        cfg = SolverConfig(eps=0.1, goldstein_delta=0.2, D=0.01, eta=0.05, T=250, seed=3)
        res = oigrm(orc, np.array([1.0, -1.0, 2.0]), cfg, keep_points=True)
        assert np.all(res.delta_norms <= cfg.D * (1 + 1e-12))
        assert len(res.trace) <= cfg.T + 1
        grads = res.trace.column("f_grads")
        assert np.all(np.diff(grads) >= 0)
        assert grads[-1] == orc.counter.f_grads == cfg.T
        M = cfg.M
        for k in range(cfg.K):
            window = res.z[k * M:(k + 1) * M]
            np.testing.assert_allclose(window.mean(axis=0), res.x_bars[k], atol=1e-12)
            assert np.linalg.norm(window - res.x_bars[k], axis=1).max() <= M * cfg.D <= cfg.goldstein_delta + 1e-12
        assert np.isnan(res.trace.records[0].grad_norm)

    def test_deterministic(self):
        cfg = SolverConfig(eps=0.1, goldstein_delta=0.2, D=0.01, eta=0.05, T=100, seed=11)
        a = oigrm(lambda x: x, np.ones(3), cfg)
        b = oigrm(lambda x: x, np.ones(3), cfg)
        np.testing.assert_array_equal(a.x_out, b.x_out)
        np.testing.assert_array_equal(a.trace.column("grad_norm"), b.trace.column("grad_norm"))

    def test_early_stop(self):
        cfg = SolverConfig(eps=0.1, goldstein_delta=0.2, D=0.01, eta=0.05, T=1000)
        res = oigrm(lambda x: x, np.ones(2), cfg, early_stop=lambda t, x: t >= 60)
        assert res.trace.termination == "early stop"
        assert res.x_bars.shape[0] == 60 // cfg.M


class TestIZO:
    def test_linear_one_dim(self):
        F = lambda x: 3.0 * x[0]
        for w in (-1.0, 1.0):
            for rho in (1e-3, 0.7):
                np.testing.assert_allclose(izo_gradient_estimate(F, np.array([0.4]), rho, np.array([w])), [3.0])

    def test_unbiased_for_linear(self):
        a = np.array([1.0, -2.0, 0.5, 3.0, 0.0])
        F = lambda x: float(a @ x)
        W = sample_sphere(make_rng(0), 5, 100_000)
        # vectorized form of the estimator (the function is linear)
        g = 5 * (W @ a)[:, None] * W
        np.testing.assert_allclose(izo_gradient_estimate(F, np.zeros(5), 0.1, W[:50]), g[:50], atol=1e-12)
        se = g.std(axis=0, ddof=1) / np.sqrt(len(g))
        assert np.all(np.abs(g.mean(axis=0) - a) <= 3 * se + 1e-12)

    @pytest.mark.parametrize("alpha", [1e-3, 1e-2])
    def test_inexact_value_error(self, alpha):
        d, rho = 5, 0.1
        rng = make_rng(3)
        H = np.diag(np.arange(1.0, d + 1))
        F = lambda x: 0.5 * x @ H @ x
        noise = make_rng(4)
        Ft = lambda x: F(x) + alpha * noise.uniform(-1, 1)
        z = rng.standard_normal(d)
        W = sample_sphere(rng, d, 4000)
        err = [np.linalg.norm(izo_gradient_estimate(Ft, z, rho, w) - izo_gradient_estimate(F, z, rho, w))
               for w in W]
        assert np.mean(err) <= 1.05 * alpha * d / rho

    def test_second_moment(self):
        # E||g~||^2 <= 2 (alpha^2 d^2 / rho^2 + C d L^2) with C = 1 for these test functions
        d, rho, alpha = 4, 0.05, 1e-3
        rng = make_rng(5)
        a = rng.standard_normal(d)
        H = np.diag([0.5, 1.0, 1.5, 2.0])
        z = rng.standard_normal(d)
        for F, L in ((lambda x: a @ x, np.linalg.norm(a)),
                     (lambda x: 0.5 * x @ H @ x, np.linalg.norm(H @ z) + 2.0 * (np.linalg.norm(z) + rho))):
            noise = make_rng(6)
            Ft = lambda x, F=F: F(x) + alpha * noise.uniform(-1, 1)
            W = sample_sphere(rng, d, 5000)
            m2 = np.mean([np.sum(izo_gradient_estimate(Ft, z, rho, w) ** 2) for w in W])
            assert m2 <= 2 * (alpha**2 * d**2 / rho**2 + d * L**2)

    def test_run_window_locality(self):
        F = lambda x: float(np.sum(np.abs(x)))
        cfg = SolverConfig(eps=0.1, goldstein_delta=0.3, D=0.01, eta=0.01, T=200, rho=0.1, nu=0.2, seed=2)
        res = izo(F, np.ones(3), cfg, keep_points=True)
        assert np.all(res.delta_norms <= cfg.D * (1 + 1e-12))
        for k in range(cfg.K):
            window = res.z[k * cfg.M:(k + 1) * cfg.M]
            assert np.linalg.norm(window - res.x_bars[k], axis=1).max() <= cfg.nu + 1e-12

    def test_needs_rho(self):
        with pytest.raises(ConfigError):
            izo(lambda x: 0.0, np.ones(2), SolverConfig(eps=0.1, goldstein_delta=0.3, D=0.01, eta=0.01, T=100))


class TestPIGD:
    def test_contraction(self):
        x0 = np.array([4.0, -3.0])
        for eta in (0.01, 0.1):
            cfg = SolverConfig(eps=0.1, goldstein_delta=0.05, D=0.05, eta=eta, T=300, seed=1)
            res = pigd(lambda x: x, x0, cfg)
            assert np.linalg.norm(res.iterates[-1]) <= cfg.goldstein_delta + (1 - eta) ** cfg.T * np.linalg.norm(x0)

    def test_zero_oracle(self):
        x0 = np.array([1.0, 2.0, 3.0])
        cfg = SolverConfig(eps=0.1, goldstein_delta=0.5, D=0.5, eta=1.0, T=20)
        res = pigd(lambda x: np.zeros(3), x0, cfg)
        np.testing.assert_array_equal(res.iterates, np.tile(x0, (21, 1)))
        np.testing.assert_array_equal(res.x_out, x0)
        assert len(res.trace) == cfg.T + 1


class TestOGD:
    def test_single_round(self):
        g = np.array([[1.0, 2.0]])
        res = inexact_ogd_regret(g, g, D=1.0, eta=0.1)
        u = np.array([0.3, -0.4])
        assert res.regret(u) == pytest.approx(-(g[0] @ u))
        np.testing.assert_array_equal(res.deltas[0], 0.0)

    def test_constant_losses(self):
        g = np.array([3.0, 4.0])
        D, M = 0.5, 200
        for eta in (1e-3, 1e-2, 1e-1):
            res = inexact_ogd_regret(np.tile(g, (M, 1)), np.tile(g, (M, 1)), D, eta)
            u = -D * g / np.linalg.norm(g)
            assert res.regret(u) <= ogd_regret_bound(D, eta, 5.0, 0.0, M) + 1e-9
            assert res.max_regret(D) == pytest.approx(res.regret(u))

    def test_tuned_step_sqrt_m(self):
        rng = make_rng(9)
        D, M, d = 1.0, 400, 4
        worst = 0.0
        for _ in range(50):
            g = rng.standard_normal((M, d))
            G = np.linalg.norm(g, axis=1).max()
            res = inexact_ogd_regret(g, g, D, D / (G * np.sqrt(M)))
            worst = max(worst, res.max_regret(D) / (D * G * np.sqrt(M)))
        assert worst <= 2.0 + 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            inexact_ogd_regret(np.ones((3, 2)), np.ones((2, 2)), 1.0, 0.1)

    @given(st.integers(0, 2**32), st.sampled_from([0.0, 0.01, 0.1]))
    def test_regret_bound_random(self, seed, alpha):
        rng = make_rng(seed)
        d, M, D, eta = 3, 64, 0.5, 0.05
        g = rng.standard_normal((M, d))
        e = rng.standard_normal((M, d))
        e *= alpha * rng.random((M, 1)) / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-300)
        gt = g + e
        res = inexact_ogd_regret(g, gt, D, eta)
        G = np.linalg.norm(gt, axis=1).max()
        assert res.max_regret(D) <= ogd_regret_bound(D, eta, G, alpha, M) + 1e-9


class TestTraceCSV:
    def test_round_trip(self, tmp_path):
        cfg = SolverConfig(eps=0.1, goldstein_delta=0.2, D=0.01, eta=0.05, T=60)
        orc = CountingGrad(np.eye(2))
        res = oigrm(orc, np.ones(2), cfg, value_fn=lambda x: 0.5 * x @ x, record_every=7)
        p = tmp_path / "trace.csv"
        res.trace.to_csv(p)
        assert p.read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)
        back = RunTrace.from_csv(p)
        for col in ("t", "fval", "grad_norm", "stat_measure", "f_grads"):
            np.testing.assert_array_equal(back.column(col), res.trace.column(col))
        q = tmp_path / "again.csv"
        back.to_csv(q)
        assert q.read_bytes() == p.read_bytes()

    def test_bad_header(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(InputError):
            RunTrace.from_csv(p)
