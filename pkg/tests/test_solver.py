import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import LOSS_KINDS, oracle_fit, random_instance, random_loss
from mest.design import DesignGenSpec, generate_design, normalize
from mest.losses import ConvexLoss
from mest.probability import ErrorDistribution
from mest.solver import (
    BoxSpec,
    MinimizerOnBoundary,
    NotConverged,
    SolverOpts,
    brute_force_fit,
    dn_trace,
    fit,
    objective,
    smoothed_psi,
    smoothed_rho,
    verify_dn_lower_bound,
    vertex_search,
)

MEDIAN_Y = np.array([3.0, 1, 4, 1, 5, 9, 2])


class TestObjective:
    def test_zero_residuals(self):
        X = np.random.default_rng(0).standard_normal((10, 2))
        b = np.array([1.0, -1.0])
        for loss in (ConvexLoss.huber(), ConvexLoss.power(1.5), ConvexLoss.quantile(0.2)):
            assert objective(X, X @ b, loss, b) == 0.0

    def test_absolute_sum(self):
        assert objective(np.ones((3, 1)), [-1.0, 0.0, 1.0], ConvexLoss.power(1.0), [0.0]) == 2.0

    def test_huber_sum(self):
        assert objective(np.ones((2, 1)), [0.5, 2.0], ConvexLoss.huber(1.0), [0.0]) == pytest.approx(1.625)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            objective(np.ones((3, 2)), np.zeros(3), ConvexLoss.huber(), [0.0])
        with pytest.raises(ValueError):
            objective(np.ones((3, 2)), np.zeros(4), ConvexLoss.huber(), [0.0, 0.0])


class TestSmoothing:
    @pytest.mark.parametrize("loss", [ConvexLoss.power(1.0), ConvexLoss.quantile(0.3), ConvexLoss.power(1.4)])
    def test_smoothed_psi_is_derivative(self, loss):
        r = np.linspace(-2, 2, 41) + 1e-3
        s, h = 1e-2, 1e-6
        fd = (smoothed_rho(loss, r + h, s) - smoothed_rho(loss, r - h, s)) / (2 * h)
        np.testing.assert_allclose(smoothed_psi(loss, r, s), fd, atol=1e-6)

    @pytest.mark.parametrize("loss", [ConvexLoss.power(1.0), ConvexLoss.quantile(0.7)])
    def test_smoothing_gap_shrinks(self, loss):
        r = np.linspace(-1, 1, 201)
        gaps = [np.max(np.abs(smoothed_rho(loss, r, s) - loss.rho(r))) for s in (1e-2, 1e-4, 1e-6)]
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] <= 1e-6


class TestFit:
    def test_sample_median(self):
        for loss in (ConvexLoss.quantile(0.5), ConvexLoss.power(1.0)):
            res = fit(np.ones((7, 1)), MEDIAN_Y, loss)
            assert res.converged
            assert res.beta_hat[0] == pytest.approx(3.0, abs=1e-6)

    def test_least_squares_closed_form(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((60, 3))
        y = rng.standard_normal(60)
        res = fit(X, y, ConvexLoss.power(2.0))
        np.testing.assert_allclose(res.beta_hat, np.linalg.solve(X.T @ X, X.T @ y), rtol=1e-12, atol=1e-13)

    def test_huber_against_oracle(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((40, 2))
        y = X @ np.array([1.0, -2.0]) + rng.standard_t(2, 40)
        loss = ConvexLoss.huber(1.345)
        res = fit(X, y, loss)
        ref = oracle_fit(X, y, loss)
        assert abs(res.objective - ref.objective) <= 1e-6 * (1 + abs(ref.objective))

    @pytest.mark.parametrize("kind", LOSS_KINDS)
    def test_oracle_equivalence(self, kind):
        rng = np.random.default_rng({"huber": 1, "power": 2, "quantile": 3}[kind])
        for _ in range(15):
            X, y = random_instance(rng)
            loss = random_loss(kind, rng)
            res = fit(X, y, loss)
            ref = oracle_fit(X, y, loss)
            assert res.converged
            assert abs(res.objective - ref.objective) <= 1e-6 * (1 + abs(ref.objective))

    @pytest.mark.parametrize(
        "loss", [ConvexLoss.huber(1.0), ConvexLoss.power(1.3), ConvexLoss.power(1.0), ConvexLoss.quantile(0.25)]
    )
    def test_probes_do_not_beat_fit(self, loss):
        rng = np.random.default_rng(4)
        X, y = rng.standard_normal((80, 3)), rng.standard_cauchy(80)
        res = fit(X, y, loss)
        probes = res.beta_hat + rng.standard_normal((500, 3)) * rng.choice([1e-4, 1e-2, 1.0], (500, 1))
        vals = np.array([objective(X, y, loss, b) for b in probes])
        assert np.all(vals >= res.objective - 1e-7 * (1 + res.objective))

    @pytest.mark.parametrize("loss", [ConvexLoss.huber(1.0), ConvexLoss.power(1.0), ConvexLoss.quantile(0.4)])
    def test_objective_nondecreasing_along_segments(self, loss):
        rng = np.random.default_rng(5)
        X, y = rng.standard_normal((50, 2)), rng.standard_t(2, 50)
        res = fit(X, y, loss)
        for _ in range(20):
            d = rng.standard_normal(2)
            vals = [objective(X, y, loss, res.beta_hat + t * d) for t in np.linspace(0, 2, 21)]
            assert np.all(np.diff(vals) >= -1e-7 * (1 + abs(res.objective)))

    @pytest.mark.parametrize(
        "loss,tol",
        [(ConvexLoss.huber(1.345), 1e-8), (ConvexLoss.power(1.5), 1e-8), (ConvexLoss.power(1.0), 1e-6),
         (ConvexLoss.quantile(0.3), 1e-6)],
    )
    def test_translation_equivariance(self, loss, tol):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((70, 2))
        y = rng.standard_t(3, 70)
        b = np.array([2.5, -0.75])
        r0 = fit(X, y, loss)
        r1 = fit(X, y + X @ b, loss)
        np.testing.assert_allclose(r1.beta_hat, r0.beta_hat + b, atol=tol)

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        X, y = rng.standard_normal((100, 2)), rng.standard_cauchy(100)
        a = fit(X, y, ConvexLoss.quantile(0.3))
        b = fit(X, y, ConvexLoss.quantile(0.3))
        np.testing.assert_array_equal(a.beta_hat, b.beta_hat)
        assert a.iterations == b.iterations

    def test_not_converged_warning(self):
        rng = np.random.default_rng(8)
        X, y = rng.standard_normal((200, 3)), rng.standard_cauchy(200)
        with pytest.warns(NotConverged):
            res = fit(X, y, ConvexLoss.quantile(0.3), SolverOpts(max_iter=1, s_start=1e-8))
        assert not res.converged
        assert np.all(np.isfinite(res.beta_hat))

    def test_smoothing_reaches_final_level(self):
        res = fit(np.ones((7, 1)), MEDIAN_Y, ConvexLoss.power(1.0))
        assert res.smoothing_final == SolverOpts().s_final

    def test_opts_from_spec(self):
        assert SolverOpts.from_spec({"max_iter": 20}).max_iter == 20
        assert SolverOpts.from_spec(None) == SolverOpts()
        with pytest.raises(ValueError):
            SolverOpts.from_spec({"tolerance": 1})

    def test_schedule(self):
        sched = SolverOpts().schedule()
        assert sched[0] == 1e-2 and sched[-1] == 1e-8
        assert np.all(np.diff(sched) < 0)

    @given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(LOSS_KINDS))
    @settings(max_examples=25, deadline=None)
    def test_oracle_property(self, seed, kind):
        rng = np.random.default_rng(seed)
        X, y = random_instance(rng, n_max=30, p_max=2)
        loss = random_loss(kind, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConverged)
            res = fit(X, y, loss)
        ref = oracle_fit(X, y, loss)
        assert res.objective <= ref.objective + 1e-6 * (1 + abs(ref.objective))


class TestBruteForce:
    def test_median(self):
        res = brute_force_fit(np.ones((7, 1)), MEDIAN_Y, ConvexLoss.power(1.0), BoxSpec((0.0,), 10.0))
        assert res.beta_hat[0] == pytest.approx(3.0, abs=1e-6)

    def test_least_squares_grid_resolution(self):
        rng = np.random.default_rng(9)
        X, y = rng.standard_normal((30, 2)), rng.standard_normal(30)
        ls = np.linalg.solve(X.T @ X, X.T @ y)
        res = brute_force_fit(X, y, ConvexLoss.power(2.0), BoxSpec((0.0, 0.0), 4.0))
        resolution = 4.0 * (2 / 40) ** 5
        assert np.max(np.abs(res.beta_hat - ls)) <= resolution

    def test_quantile_order_statistic(self):
        y = np.arange(1.0, 101.0)
        res = brute_force_fit(np.ones((100, 1)), y, ConvexLoss.quantile(0.25), BoxSpec((50.0,), 60.0))
        # any point of [25, 26] minimizes the check loss
        assert 25.0 - 1e-6 <= res.beta_hat[0] <= 26.0 + 1e-6

    def test_boundary_detection(self):
        with pytest.raises(MinimizerOnBoundary):
            brute_force_fit(np.ones((7, 1)), MEDIAN_Y, ConvexLoss.power(1.0), BoxSpec((100.0,), 1.0))

    def test_dimension_limit(self):
        with pytest.raises(ValueError):
            brute_force_fit(np.ones((10, 4)), np.zeros(10), ConvexLoss.huber(), BoxSpec((0,) * 4, 1.0))

    def test_vertex_search_exact_for_lad(self):
        rng = np.random.default_rng(10)
        X, y = rng.standard_normal((25, 2)), rng.standard_cauchy(25)
        loss = ConvexLoss.power(1.0)
        beta, val = vertex_search(X, y, loss)
        assert val == pytest.approx(objective(X, y, loss, beta))
        assert np.sum(np.abs(y - X @ beta) < 1e-9) >= 2


class TestDnTrace:
    def setup_method(self):
        X = generate_design(DesignGenSpec("gaussian_iid", 3), 400, 1)
        self.Z = normalize(X)
        self.e = ErrorDistribution("cauchy").sample(400, 2)

    def test_zero_scale(self):
        t = dn_trace(self.Z, self.e, ConvexLoss.huber(), 0.0, [1.0, 0.0, 0.0])
        assert t.total == 0.0 and t.i1 == 0.0 and t.i2 == 0.0

    def test_quadratic_closed_form(self):
        g = np.array([1.0, 2.0, -2.0]) / 3.0
        eps = 0.5
        t = dn_trace(self.Z, self.e, ConvexLoss.power(2.0), eps, g)
        w = -eps * np.sqrt(400) * (self.Z.rows @ g)
        assert t.i1 == pytest.approx(np.sum(w**2), rel=1e-10)
        assert t.i1_quadrature == pytest.approx(np.sum(w**2), rel=1e-12)

    @pytest.mark.parametrize(
        "loss", [ConvexLoss.huber(1.0), ConvexLoss.power(1.0), ConvexLoss.power(1.5), ConvexLoss.quantile(0.3)]
    )
    def test_identity_and_quadrature(self, loss):
        rng = np.random.default_rng(12)
        for _ in range(25):
            g = rng.standard_normal(3)
            g /= np.linalg.norm(g)
            t = dn_trace(self.Z, self.e, loss, rng.uniform(0.01, 1.0), g)
            assert abs(t.total - (t.i1 + t.i2)) <= 1e-8
            assert t.identity_error <= 1e-8
            assert t.i1_quadrature == pytest.approx(t.i1, rel=1e-6, abs=1e-10)
            assert t.i1 >= -1e-10  # integral of a nondecreasing increment

    def test_non_unit_direction(self):
        with pytest.raises(ValueError):
            dn_trace(self.Z, self.e, ConvexLoss.huber(), 0.5, [1.0, 1.0, 0.0])


class TestLowerBound:
    def test_least_squares_gaussian(self):
        n = 10_000
        Z = normalize(generate_design(DesignGenSpec("orthogonal_blocks", 2), n))
        e = ErrorDistribution("gaussian").sample(n, 0)
        rep = verify_dn_lower_bound(Z, e, ConvexLoss.power(2.0), 0.5, 200, 1, c1=2.0)
        # I_1n = eps^2 n exactly for every direction
        assert rep.min_i1 == pytest.approx(0.25 * n, rel=1e-10)
        assert rep.i1_ok and rep.total_positive
        assert rep.identity_error <= 1e-8

    def test_zero_scale_boundary(self):
        Z = normalize(generate_design(DesignGenSpec("orthogonal_blocks", 2), 100))
        rep = verify_dn_lower_bound(Z, np.zeros(100), ConvexLoss.huber(), 0.0, 10, 0, c1=0.8)
        assert rep.min_total == 0.0
        assert not rep.total_positive

    @pytest.mark.slow
    def test_huber_cauchy_positive_in_most_runs(self):
        n = 10_000
        Z = normalize(generate_design(DesignGenSpec("orthogonal_blocks", 2), n))
        dist, loss = ErrorDistribution("cauchy"), ConvexLoss.huber(1.345)
        wins = sum(
            verify_dn_lower_bound(Z, dist.sample(n, s), loss, 0.5, 200, s, c1=0.58, quadrature_checks=0).total_positive
            for s in range(50)
        )
        assert wins >= 49.5 * 0.99
