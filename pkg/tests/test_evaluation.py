import numpy as np
import pytest
import torch

from factorflow.baselines import LinearFactorModel
from factorflow.distributions import MVNParams, mvn_logpdf
from factorflow.evaluation import (
    acf_le_metrics,
    calibration_error,
    excess_correlation,
    logmeanexp_with_se,
    marginal_cdf_observed_factors,
    nll_ind_day,
    nll_joint_day,
    pit_from_paths,
    standardize_returns,
    stock_conditional_logpdfs,
    summary_table,
)
from factorflow.exceptions import DataError
from factorflow.factors import EMAState
from factorflow.nn import logmeanexp

from tests.test_sampler import build_market


class TestLogMeanExp:
    def test_shift_identity_with_large_constant(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(500)
        a, _ = logmeanexp_with_se(x)
        b, _ = logmeanexp_with_se(x + 700.0)
        assert b == pytest.approx(a + 700.0, abs=1e-9)

    def test_standard_error_scales_with_samples(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(4000)
        _, se_small = logmeanexp_with_se(x[:1000])
        _, se_large = logmeanexp_with_se(x)
        assert se_large < se_small


class TestNLLDays:
    def test_factor_independent_model_is_exact(self):
        market = build_market(stock_arch="nig", include_next_factors=False)
        date = market.dates[100]
        t = market.date_index(date)
        tickers = market.active_tickers(t)
        joint, _ = nll_joint_day(market, date, n_factor_samples=64, seed=0)
        ind, _, per_stock = nll_ind_day(market, date, n_factor_samples=64,
                                        seed=0)
        # integrand constant in the factor draw: both reduce to the plain
        # average of conditional logpdfs
        ll = stock_conditional_logpdfs(
            market, t, tickers,
            np.zeros((1, market.factor_model.config.factor_dim)))
        expected = float(-ll[:, 0].mean())
        assert joint == pytest.approx(expected, abs=1e-10)
        assert ind == pytest.approx(expected, abs=1e-10)

    def test_single_stock_joint_equals_ind(self):
        market = build_market(n_stocks=1)
        date = market.dates[100]
        joint, _ = nll_joint_day(market, date, n_factor_samples=128, seed=2)
        ind, _, _ = nll_ind_day(market, date, n_factor_samples=128, seed=2)
        assert joint == pytest.approx(ind, abs=1e-12)

    def test_matches_bruteforce_enumeration_two_stocks(self):
        market = build_market(n_stocks=2)
        date = market.dates[100]
        t = market.date_index(date)
        tickers = market.active_tickers(t)
        from factorflow.evaluation import _day_factor_samples

        samples = _day_factor_samples(market, t, 32, seed=5)
        ll = stock_conditional_logpdfs(market, t, tickers, samples)
        # brute force with plain exp/log arithmetic
        joint_oracle = -np.log(np.mean(np.exp(ll[0] + ll[1]))) / 2
        ind_oracle = -(np.log(np.mean(np.exp(ll[0])))
                       + np.log(np.mean(np.exp(ll[1])))) / 2
        joint, _ = nll_joint_day(market, date, n_factor_samples=32, seed=5)
        ind, _, _ = nll_ind_day(market, date, n_factor_samples=32, seed=5)
        assert joint == pytest.approx(joint_oracle, abs=1e-9)
        assert ind == pytest.approx(ind_oracle, abs=1e-9)

    def test_classical_factor_mc_matches_closed_form(self):
        # the MC integration machinery against the analytic Gaussian joint
        rng = np.random.default_rng(6)
        model = LinearFactorModel(
            tickers=["A", "B", "C"],
            intercepts=np.array([0.0, 0.001, -0.001]),
            loadings=rng.uniform(0.5, 1.5, size=(3, 2)),
            resid_std=np.array([0.01, 0.02, 0.015]),
        )
        state = EMAState(np.array([0.0, 0.0]), np.diag([1e-4, 4e-4]))
        for day in range(50):
            r = model.sample(state, 1, seed=100 + day)[0]
            closed = model.joint_logpdf(r, state) / 3
            draws = rng.standard_normal((4000, 2)) @ np.linalg.cholesky(
                state.cov).T + state.mean
            ll = np.stack([
                model.conditional_logpdf(r[i], draws.T, i).sum(axis=0)
                if False else
                np.array([model.conditional_logpdf(r[i], f, i) for f in draws])
                for i in range(3)
            ])
            mc, se = logmeanexp_with_se(ll.sum(axis=0))
            assert mc / 3 == pytest.approx(closed, abs=3 * se / 3 + 1e-6)

    def test_convergence_with_more_samples(self):
        market = build_market(n_stocks=2)
        date = market.dates[100]
        small, se_small = nll_joint_day(market, date, n_factor_samples=256,
                                        seed=7)
        big, se_big = nll_joint_day(market, date, n_factor_samples=4096,
                                    seed=8)
        assert se_big < se_small
        assert abs(big - small) < 4 * (se_small + se_big) + 1e-3


class TestCalibrationError:
    def test_near_uniform_grid_is_tiny(self):
        n = 999
        values = np.arange(1, n + 1) / (n + 1)
        assert calibration_error(values, 100) < 1e-4

    def test_point_mass_matches_hand_summation(self):
        values = np.full(50, 0.5)
        levels = np.arange(1, 101) / 101.0
        oracle = float(np.sum((levels - (levels > 0.5)) ** 2))
        assert calibration_error(values, 100) == pytest.approx(oracle,
                                                               abs=1e-12)

    def test_uniform_below_null_percentile(self):
        rng = np.random.default_rng(9)
        null = [calibration_error(rng.random(10_000), 100)
                for _ in range(200)]
        value = calibration_error(np.random.default_rng(10).random(10_000),
                                  100)
        assert value < np.percentile(null, 99)

    def test_pit_invariance_under_monotone_transform(self):
        # transforming data and model CDF by the same strictly increasing map
        # leaves the PIT values, hence the metric, unchanged
        rng = np.random.default_rng(11)
        x = rng.standard_normal(2000)
        from scipy.stats import norm

        u_raw = norm.cdf(x)
        y = np.exp(x)  # monotone transform; model CDF becomes lognormal
        u_transformed = norm.cdf(np.log(y))
        assert calibration_error(u_transformed, 100) == pytest.approx(
            calibration_error(u_raw, 100), abs=1e-12)

    def test_input_validation(self):
        with pytest.raises(DataError):
            calibration_error([], 100)
        with pytest.raises(DataError):
            calibration_error([1.5], 100)


class TestACFLE:
    def test_identical_panels_give_zero(self):
        rng = np.random.default_rng(12)
        panel = rng.standard_normal((300, 4))
        acf, le = acf_le_metrics(panel, panel)
        assert acf == 0.0
        assert le == 0.0

    def test_iid_versus_iid_is_small(self):
        rng = np.random.default_rng(13)
        real = rng.standard_normal((10_000, 3))
        samp = rng.standard_normal((10_000, 3))
        acf, le = acf_le_metrics(real, samp)
        assert acf < 0.05
        assert le < 0.05

    def test_detects_missing_volatility_clustering(self):
        from factorflow.baselines import GarchParams, garch_simulate

        params = GarchParams(omega=0.05, alpha=0.15, beta=0.80)
        real = np.column_stack([
            garch_simulate(params, 10_000, seed=s) for s in range(3)
        ])
        rng = np.random.default_rng(14)
        samp = rng.standard_normal(real.shape) * real.std()
        acf_garch, _ = acf_le_metrics(real, samp)
        # true ACF(1) of squared returns for GARCH is alpha*(1-(a+b)^2+ab)
        # /(1-(a+b)^2+a^2) which is substantially positive here
        assert acf_garch > 0.05

    def test_short_panels_rejected(self):
        with pytest.raises(DataError):
            acf_le_metrics(np.zeros((50, 2)), np.zeros((50, 2)))


class TestStandardize:
    def test_exact_generator_self_consistency(self):
        beta = [1.0, 0.5]
        market = build_market(stock_arch="linear", wire_linear_beta=beta,
                              idio_sigma=0.01, n_stocks=2)
        # rewrite observed returns so the wired model IS the generator
        rng = np.random.default_rng(15)
        mu = market.f_pca @ np.asarray(beta)
        market.returns = np.column_stack([
            mu + 0.01 * rng.standard_normal(len(mu)),
            mu + 0.01 * rng.standard_normal(len(mu)),
        ])
        dates = market.dates[50:110]
        panel, tickers = standardize_returns(market, dates, n_samples=3000,
                                             seed=3, mode="observed")
        flat = panel.reshape(-1)
        assert flat.mean() == pytest.approx(0.0, abs=4 / np.sqrt(flat.size))
        assert flat.std() == pytest.approx(1.0, abs=0.1)

    def test_observed_mode_matches_analytic_moments(self):
        beta = [1.0, 0.5]
        market = build_market(stock_arch="linear", wire_linear_beta=beta,
                              idio_sigma=0.01, n_stocks=2)
        date = market.dates[100]
        t = market.date_index(date)
        panel, tickers = standardize_returns(market, [date], n_samples=8000,
                                             seed=4, mode="observed")
        mu_true = float(np.asarray(beta) @ market.f_pca[t])
        observed = market.returns[t, 0]
        expected = (observed - mu_true) / 0.01
        assert panel[0, 0] == pytest.approx(expected, abs=0.12)

    def test_modes_agree_for_factor_free_model(self):
        market = build_market(zero_stock_nets=True, n_stocks=3)
        date = market.dates[100]
        a, _ = standardize_returns(market, [date], n_samples=6000, seed=5,
                                   mode="observed")
        b, _ = standardize_returns(market, [date], n_samples=6000, seed=5,
                                   mode="sampled")
        # factor-free: sampled covariance is diagonal, so whitening reduces
        # to the per-stock standardization up to MC noise
        np.testing.assert_allclose(a[0], b[0], atol=0.2)


class TestExcessCorrelation:
    def test_iid_null_is_centered(self):
        rng = np.random.default_rng(16)
        n_months, days, stocks = 100, 21, 50
        panel = rng.standard_normal((n_months * days, stocks))
        keys = np.repeat(np.arange(n_months), days)
        results = excess_correlation(panel, keys)
        values = [v for _, v in results]
        assert np.mean(values) == pytest.approx(0.0, abs=0.01)

    def test_perfectly_correlated_pair(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal(21)
        panel = np.column_stack([x, x])
        results = excess_correlation(panel, ["m"] * 21)
        assert results[0][1] == pytest.approx(1.0 - np.sqrt(1.0 / 20),
                                              abs=1e-12)

    def test_two_day_month_boundary(self):
        rng = np.random.default_rng(18)
        panel = rng.standard_normal((2, 6))
        results = excess_correlation(panel, ["m", "m"], min_days=2)
        # with n=2 every pairwise correlation is +-1, RMS = 1, null = 1
        assert results[0][1] == pytest.approx(0.0, abs=1e-12)

    def test_short_month_rejected(self):
        with pytest.raises(DataError):
            excess_correlation(np.zeros((3, 4)), ["m"] * 3)


class TestPIT:
    def test_median_maps_to_half(self):
        market = build_market(n_stocks=2)
        from factorflow.sampler import sample_one_day

        date = market.dates[100]
        paths = sample_one_day(market, date, n_paths=2001, seed=6)
        observed = np.median(paths.returns[:, 0, :], axis=0)
        per_ticker, portfolio = pit_from_paths(paths, observed)
        np.testing.assert_allclose(per_ticker, 0.5, atol=0.01)

    def test_factor_free_marginal_cdf_equals_conditional(self):
        market = build_market(zero_stock_nets=True, n_stocks=1)
        date = market.dates[100]
        t = market.date_index(date)
        value = 0.005
        marginal = marginal_cdf_observed_factors(market, date, "S000",
                                                 value=value,
                                                 n_factor_samples=8, seed=7)
        from factorflow.distributions import NIGParams, nig_cdf

        # wired standard NIG base, identity flow, return_scale 0.01
        oracle = nig_cdf(value / 0.01, NIGParams(0.0, 1.0, 1.0, 0.0))
        assert marginal == pytest.approx(oracle, abs=1e-9)


class TestSummaryTable:
    def test_pivot_layout(self):
        rows = [
            {"model": "ours", "split": "val", "metric": "nll_joint",
             "value": 0.39},
            {"model": "ours", "split": "test", "metric": "nll_joint",
             "value": 0.64},
            {"model": "garch_normal", "split": "val", "metric": "nll_ind",
             "value": 0.96},
        ]
        table = summary_table(rows)
        assert "val_nll_joint" in table.columns
        assert "test_nll_joint" in table.columns
        assert set(table["model"]) == {"ours", "garch_normal"}
