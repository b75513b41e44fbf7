import numpy as np
import pytest
from scipy import integrate, stats

from factorflow.baselines import (
    GarchParams,
    LinearFactorModel,
    classical_factor_fit,
    garch_cdf,
    garch_filter,
    garch_fit,
    garch_logpdf,
    garch_nll,
    garch_simulate,
    noise_cdf,
    noise_logpdf,
    noise_sample,
)
from factorflow.exceptions import DataError, ParameterError
from factorflow.factors import EMAState


class TestNoiseFamilies:
    @pytest.mark.parametrize("noise,params", [
        ("normal", {}),
        ("ged", {"shape": 1.3}),
        ("ged", {"shape": 3.0}),
        ("skewt", {"df": 5.0, "skew": -0.4}),
        ("skewt", {"df": 12.0, "skew": 0.7}),
    ])
    def test_density_normalized_and_standardized(self, noise, params):
        pdf = lambda e: np.exp(noise_logpdf(e, noise, params))
        total, _ = integrate.quad(pdf, -np.inf, np.inf, limit=400)
        assert total == pytest.approx(1.0, abs=1e-8)
        mean, _ = integrate.quad(lambda e: e * pdf(e), -np.inf, np.inf,
                                 limit=400)
        var, _ = integrate.quad(lambda e: e**2 * pdf(e), -np.inf, np.inf,
                                limit=400)
        assert mean == pytest.approx(0.0, abs=1e-7)
        assert var == pytest.approx(1.0, abs=1e-6)

    def test_ged_shape_two_is_exactly_normal(self):
        e = np.linspace(-5, 5, 101)
        diff = noise_logpdf(e, "ged", {"shape": 2.0}) - noise_logpdf(e, "normal", {})
        assert np.abs(diff).max() < 1e-10
        cdf_diff = noise_cdf(e, "ged", {"shape": 2.0}) - stats.norm.cdf(e)
        assert np.abs(cdf_diff).max() < 1e-12

    @pytest.mark.parametrize("noise,params", [
        ("ged", {"shape": 1.5}),
        ("skewt", {"df": 6.0, "skew": 0.5}),
        ("skewt", {"df": 4.5, "skew": -0.6}),
    ])
    def test_cdf_matches_density_quadrature(self, noise, params):
        pdf = lambda e: np.exp(noise_logpdf(e, noise, params))
        for x in (-2.0, -0.3, 0.0, 0.8, 2.5):
            oracle, _ = integrate.quad(pdf, -np.inf, x, limit=400)
            assert noise_cdf(x, noise, params) == pytest.approx(oracle,
                                                                abs=1e-8)

    def test_skewt_median_consistency(self):
        params = {"df": 5.0, "skew": 0.3}
        from scipy.optimize import brentq

        median = brentq(lambda x: noise_cdf(x, "skewt", params) - 0.5, -10, 10,
                        xtol=1e-12)
        assert noise_cdf(median, "skewt", params) == pytest.approx(0.5,
                                                                   abs=1e-8)
        # numeric-inversion oracle: integrating the pdf up to the median
        pdf = lambda e: np.exp(noise_logpdf(e, "skewt", params))
        half, _ = integrate.quad(pdf, -60, median, limit=400)
        assert half == pytest.approx(0.5, abs=1e-8)

    @pytest.mark.parametrize("noise,params", [
        ("normal", {}),
        ("ged", {"shape": 1.4}),
        ("skewt", {"df": 7.0, "skew": 0.4}),
    ])
    def test_sampler_matches_cdf(self, noise, params):
        rng = np.random.default_rng(0)
        draws = noise_sample(200_000, noise, params, rng)
        assert draws.mean() == pytest.approx(0.0, abs=0.01)
        assert draws.var() == pytest.approx(1.0, abs=0.02)
        for x in (-1.0, 0.0, 1.5):
            assert (draws <= x).mean() == pytest.approx(
                noise_cdf(x, noise, params), abs=0.005
            )


class TestGarchFilter:
    def test_positive_variances_on_any_input(self):
        rng = np.random.default_rng(1)
        params = GarchParams(omega=0.1, alpha=0.1, beta=0.8)
        for _ in range(10):
            x = rng.standard_normal(300) * rng.uniform(0.1, 10)
            assert (garch_filter(params, x) > 0).all()

    def test_matches_hand_recursion(self):
        params = GarchParams(omega=0.2, alpha=0.15, beta=0.7, gamma_lev=0.1,
                             mu=0.05)
        rng = np.random.default_rng(2)
        x = rng.standard_normal(50)
        sig2 = garch_filter(params, x)
        expected = np.var(x, ddof=1)
        assert sig2[0] == pytest.approx(expected, abs=1e-12)
        for t in range(1, 50):
            eps = x[t - 1] - params.mu
            expected = params.omega + params.alpha * eps**2 \
                + params.gamma_lev * eps**2 * (eps < 0) + params.beta * expected
            assert sig2[t] == pytest.approx(expected, abs=1e-10)

    def test_logpdf_and_cdf_use_conditional_scale(self):
        params = GarchParams(omega=0.1, alpha=0.1, beta=0.8, mu=0.0)
        rng = np.random.default_rng(3)
        x = rng.standard_normal(100)
        t = 50
        sig = np.sqrt(garch_filter(params, x)[t])
        assert garch_logpdf(params, x, t) == pytest.approx(
            stats.norm.logpdf(x[t], scale=sig), abs=1e-12
        )
        assert garch_cdf(params, x, t) == pytest.approx(
            stats.norm.cdf(x[t] / sig), abs=1e-12
        )
        with pytest.raises(ParameterError):
            garch_logpdf(params, x, 0)


class TestGarchFit:
    def test_recovers_simulated_parameters(self):
        true = GarchParams(omega=0.1, alpha=0.1, beta=0.8)
        x = garch_simulate(true, 20_000, seed=4)
        fitted = garch_fit(x, "garch", "normal", seed=4)
        assert fitted.omega == pytest.approx(0.1, abs=0.05)
        assert fitted.alpha == pytest.approx(0.1, abs=0.05)
        assert fitted.beta == pytest.approx(0.8, abs=0.05)

    def test_constant_volatility_series(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(5000) * 1.7
        fitted = garch_fit(x, "garch", "normal", seed=5)
        assert fitted.alpha < 0.03
        assert fitted.stationary_variance == pytest.approx(np.var(x, ddof=1),
                                                           rel=0.10)

    def test_gjr_on_symmetric_data_has_no_leverage(self):
        true = GarchParams(omega=0.1, alpha=0.1, beta=0.8)
        x = garch_simulate(true, 20_000, seed=6)
        fitted = garch_fit(x, "gjr", "normal", seed=6)
        assert fitted.gamma_lev == pytest.approx(0.0, abs=0.05)

    def test_fit_never_worse_than_default_start(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(1000)
        from factorflow.baselines import _GarchParameterization

        par = _GarchParameterization("garch", "normal", float(np.var(x, ddof=1)))
        init_nll = garch_nll(par.unpack(par.default_raw()), x)
        fitted = garch_fit(x, "garch", "normal", seed=7, n_restarts=3)
        assert garch_nll(fitted, x) <= init_nll + 1e-9

    def test_short_series_rejected(self):
        with pytest.raises(DataError):
            garch_fit(np.zeros(100), "garch", "normal")


class TestClassicalFactor:
    def test_noiseless_exact_recovery(self):
        rng = np.random.default_rng(8)
        f = rng.standard_normal((300, 2))
        r = (2.0 * f[:, 0] - f[:, 1])[:, None]
        model = classical_factor_fit(r, np.ones_like(r, dtype=bool), f, ["A"])
        np.testing.assert_allclose(model.loadings[0], [2.0, -1.0], atol=1e-8)
        assert model.intercepts[0] == pytest.approx(0.0, abs=1e-8)
        assert model.resid_std[0] < 1e-6

    def test_pure_noise_coefficients_near_zero(self):
        rng = np.random.default_rng(9)
        f = rng.standard_normal((400, 2)) * 0.01
        r = rng.standard_normal((400, 1)) * 0.02
        model = classical_factor_fit(r, np.ones_like(r, dtype=bool), f, ["A"])
        se = 0.02 / (0.01 * np.sqrt(400))
        assert np.abs(model.loadings[0]).max() < 2 * se

    def test_joint_matches_dense_bivariate_formula(self):
        model = LinearFactorModel(
            tickers=["A", "B"],
            intercepts=np.array([0.001, -0.002]),
            loadings=np.array([[1.2, 0.3], [0.8, -0.5]]),
            resid_std=np.array([0.01, 0.02]),
        )
        state = EMAState(np.array([0.0, 0.001]),
                         np.array([[4e-4, 1e-4], [1e-4, 2e-4]]))
        r = np.array([0.01, -0.005])
        b = model.loadings
        mean = model.intercepts + b @ state.mean
        cov = b @ state.cov @ b.T + np.diag(model.resid_std**2)
        oracle = stats.multivariate_normal(mean, cov).logpdf(r)
        assert model.joint_logpdf(r, state) == pytest.approx(oracle, abs=1e-10)

    def test_degenerate_idio_joint_equals_factor_gaussian(self):
        # B = I and D -> 0: the joint is the factor Gaussian itself
        model = LinearFactorModel(
            tickers=["A", "B"], intercepts=np.zeros(2), loadings=np.eye(2),
            resid_std=np.full(2, 1e-9),
        )
        state = EMAState(np.array([0.0, 0.0]),
                         np.array([[2e-4, 5e-5], [5e-5, 1e-4]]))
        r = np.array([0.005, -0.01])
        oracle = stats.multivariate_normal(state.mean, state.cov).logpdf(r)
        assert model.joint_logpdf(r, state) == pytest.approx(oracle, abs=1e-4)

    def test_sampled_correlation_matches_analytic(self):
        model = LinearFactorModel(
            tickers=["A", "B"],
            intercepts=np.zeros(2),
            loadings=np.array([[1.0, 0.0], [0.7, 0.5]]),
            resid_std=np.array([0.01, 0.015]),
        )
        state = EMAState(np.zeros(2), np.diag([4e-4, 1e-4]))
        draws = model.sample(state, 10**5, seed=10)
        b = model.loadings
        cov = b @ state.cov @ b.T + np.diag(model.resid_std**2)
        target = cov[0, 1] / np.sqrt(cov[0, 0] * cov[1, 1])
        got = np.corrcoef(draws.T)[0, 1]
        assert got == pytest.approx(target, abs=0.01)

    def test_insufficient_observations_rejected(self):
        rng = np.random.default_rng(11)
        f = rng.standard_normal((100, 2))
        r = rng.standard_normal((100, 1))
        mask = np.zeros((100, 1), dtype=bool)
        mask[:30, 0] = True
        with pytest.raises(DataError):
            classical_factor_fit(r, mask, f, ["A"])
