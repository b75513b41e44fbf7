import numpy as np
import pytest
import torch

from factorflow.ciwae import CIWAEConfig, CIWAEModel
from factorflow.data import SynthConfig, synth_generate
from factorflow.exceptions import DataError, ParameterError
from factorflow.factors import EMAParams, pca_fit
from factorflow.nn import DTYPE, set_seed
from factorflow.sampler import (
    MarketModel,
    SamplePaths,
    entity_key,
    mc_statistics,
    sample_multi_day,
    sample_one_day,
)
from factorflow.stockflow import StockFlowConfig, StockFlowModel

WINDOW = 16
SOFTPLUS_INV = lambda y: float(np.log(np.expm1(y)))


def build_market(seed=0, n_stocks=4, zero_stock_nets=False, stock_arch="flow",
                 wire_linear_beta=None, idio_sigma=0.01, **stock_kwargs):
    set_seed(seed)
    cfg = SynthConfig(n_stocks=n_stocks, n_factors=2, horizon=120,
                      factor_vol=0.01, idio_vol=idio_sigma, seed=seed)
    panel, history, truth = synth_generate(cfg)
    pca = pca_fit(history.values[:80], 1.0)
    f_pca = pca.transform(history.values)
    ema_params = EMAParams.default(f_pca[:80])

    fm_config = CIWAEConfig(factor_dim=pca.n_components, window=WINDOW,
                            hidden=8, latent=3, dropout=0.0, seed=seed)
    factor_model = CIWAEModel(fm_config)
    factor_model.set_scales(np.full(pca.n_components, 100.0),
                            np.full(pca.n_components, 100.0))
    factor_model.eval()

    sm_config = StockFlowConfig(
        factor_dim=pca.n_components, window=WINDOW, hidden=8, block_hidden=8,
        cond_dim=4, n_blocks=2, dropout=0.0, seed=seed,
        architecture=stock_arch, **stock_kwargs,
    )
    stock_model = StockFlowModel(sm_config)
    stock_model.set_scales(0.01, np.full(pca.n_components, 0.01))
    if zero_stock_nets:
        with torch.no_grad():
            for block in stock_model.blocks:
                for lin in (block.lin1, block.lin2, block.lin3):
                    lin.linear.weight.zero_()
                    lin.linear.bias.zero_()
            for head in (stock_model.base_mu, stock_model.base_scale,
                         stock_model.base_beta, stock_model.base_delta):
                head.weight.zero_()
                head.bias.zero_()
            stock_model.base_scale.bias.fill_(SOFTPLUS_INV(1.0 - 1e-8))
            stock_model.base_delta.bias.fill_(SOFTPLUS_INV(1.0 - 1e-8))
    if wire_linear_beta is not None:
        # linear architecture: Normal(mu = beta . f_next, sigma)
        with torch.no_grad():
            stock_model.set_scales(1.0, np.ones(pca.n_components))
            stock_model.base_mu.weight.copy_(torch.as_tensor(
                [wire_linear_beta], dtype=DTYPE))
            stock_model.base_mu.bias.zero_()
            stock_model.base_scale.weight.zero_()
            stock_model.base_scale.bias.fill_(SOFTPLUS_INV(idio_sigma))
    stock_model.eval()
    return MarketModel(
        pca=pca, ema_params=ema_params, factor_model=factor_model,
        stock_model=stock_model, panel_returns=panel.returns,
        panel_mask=panel.mask, factor_values=history.values,
        dates=panel.dates, tickers=panel.tickers,
    )


class TestOneDay:
    def test_seed_reproducibility(self):
        market = build_market()
        date = market.dates[100]
        a = sample_one_day(market, date, n_paths=32, seed=7)
        b = sample_one_day(market, date, n_paths=32, seed=7)
        np.testing.assert_array_equal(a.returns, b.returns)
        np.testing.assert_array_equal(a.factors, b.factors)

    def test_ticker_order_invariance(self):
        market = build_market()
        date = market.dates[100]
        order1 = ["S000", "S001", "S002", "S003"]
        order2 = ["S002", "S000", "S003", "S001"]
        a = sample_one_day(market, date, n_paths=40, seed=3, tickers=order1)
        b = sample_one_day(market, date, n_paths=40, seed=3, tickers=order2)
        for tk in order1:
            np.testing.assert_array_equal(a.ticker_column(tk),
                                          b.ticker_column(tk))

    def test_prefix_stability_when_growing_paths(self):
        market = build_market()
        date = market.dates[100]
        small = sample_one_day(market, date, n_paths=25, seed=11)
        large = sample_one_day(market, date, n_paths=100, seed=11)
        np.testing.assert_array_equal(small.factors, large.factors[:25])
        np.testing.assert_array_equal(small.returns, large.returns[:25])

    def test_factor_sharing_induces_correlation(self):
        beta = [1.0, 0.5]
        market = build_market(stock_arch="linear", wire_linear_beta=beta,
                              idio_sigma=0.01, n_stocks=2)
        date = market.dates[100]
        paths = sample_one_day(market, date, n_paths=4000, seed=5)
        f = paths.factors[:, 0, :]
        sig_f = np.cov(f, rowvar=False)
        b = np.asarray(beta)
        var_common = float(b @ sig_f @ b)
        expected = var_common / (var_common + 0.01**2)
        got = np.corrcoef(paths.returns[:, 0, 0], paths.returns[:, 0, 1])[0, 1]
        assert expected > 0.1
        assert got == pytest.approx(expected, abs=0.05)

    def test_single_stock_marginal_matches_stock_sampler(self):
        from scipy import stats

        market = build_market(zero_stock_nets=True, n_stocks=1)
        date = market.dates[100]
        paths = sample_one_day(market, date, n_paths=4000, seed=9)
        # base is a wired standard NIG, flow is identity: joint samples are
        # NIG draws scaled by return_scale regardless of the factor draw
        from factorflow.distributions import NIGParams, nig_sample

        oracle = nig_sample(NIGParams(0.0, 1.0, 1.0, 0.0), 4000,
                            seed=123) * 0.01
        ks = stats.ks_2samp(paths.returns[:, 0, 0], oracle)
        assert ks.pvalue > 0.01

    def test_missing_history_errors_with_ticker_names(self):
        market = build_market()
        market.mask[95, 2] = False  # hole inside S002's window
        date = market.dates[100]
        with pytest.raises(DataError, match="S002"):
            sample_one_day(market, date, n_paths=4, seed=0,
                           tickers=["S000", "S002"])


class TestMultiDay:
    def test_horizon_one_equals_one_day(self):
        market = build_market()
        date = market.dates[100]
        a = sample_one_day(market, date, n_paths=16, seed=2)
        b = sample_multi_day(market, date, horizon=1, n_paths=16, seed=2)
        np.testing.assert_array_equal(a.returns, b.returns)

    def test_shapes_and_first_day_consistency(self):
        market = build_market()
        date = market.dates[100]
        single = sample_one_day(market, date, n_paths=12, seed=4)
        multi = sample_multi_day(market, date, horizon=3, n_paths=12, seed=4)
        assert multi.returns.shape == (12, 3, 4)
        assert multi.factors.shape == (12, 3, 2)
        np.testing.assert_array_equal(multi.returns[:, 0], single.returns[:, 0])
        np.testing.assert_array_equal(multi.factors[:, 0], single.factors[:, 0])

    def test_iid_model_has_stationary_marginals(self):
        market = build_market(zero_stock_nets=True)
        date = market.dates[100]
        paths = sample_multi_day(market, date, horizon=5, n_paths=3000, seed=6)
        v1 = paths.returns[:, 0, 0].var()
        v5 = paths.returns[:, 4, 0].var()
        # base wired to NIG(0,1,1,0) scaled by 0.01: variance 1e-4
        assert v1 == pytest.approx(1e-4, rel=0.15)
        assert v5 == pytest.approx(v1, rel=0.15)

    def test_invalid_args(self):
        market = build_market()
        with pytest.raises(ParameterError):
            sample_multi_day(market, market.dates[100], horizon=0, n_paths=4,
                             seed=0)
        with pytest.raises(ParameterError):
            sample_multi_day(market, market.dates[100], horizon=1, n_paths=0,
                             seed=0)
        with pytest.raises(DataError):
            sample_one_day(market, market.dates[3], n_paths=4, seed=0)


class TestMCStatistics:
    def make_paths(self, returns):
        returns = np.asarray(returns, dtype=float)
        n, k = returns.shape
        return SamplePaths(
            factors=np.zeros((n, 1, 1)),
            returns=returns[:, None, :],
            tickers=[f"T{i}" for i in range(k)],
            dates=["2020-01-02"],
            seed=0,
        )

    def test_constant_column(self):
        paths = self.make_paths(np.full((50, 1), 0.42))
        stats = mc_statistics(paths, correlations=False)
        assert stats["vol"][0] == 0.0
        for q, v in stats["quantiles"].items():
            assert v[0] == pytest.approx(0.42)

    def test_constant_column_correlation_errors(self):
        paths = self.make_paths(np.column_stack(
            [np.full(50, 0.1), np.random.default_rng(0).standard_normal(50)]))
        with pytest.raises(DataError):
            mc_statistics(paths)

    def test_identical_columns_corr_one(self):
        x = np.random.default_rng(1).standard_normal(200)
        paths = self.make_paths(np.column_stack([x, x]))
        stats = mc_statistics(paths)
        assert stats["correlation"][0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_vol_of_standard_normal(self):
        x = np.random.default_rng(2).standard_normal(10**5)
        paths = self.make_paths(x[:, None])
        stats = mc_statistics(paths, correlations=False)
        assert stats["vol"][0] == pytest.approx(1.0, abs=3.0 / np.sqrt(2e5))

    def test_quantiles_linear_interpolation(self):
        x = np.arange(1, 101, dtype=float)
        paths = self.make_paths(x[:, None])
        stats = mc_statistics(paths, quantiles=(0.5,), correlations=False)
        assert stats["quantiles"][0.5][0] == pytest.approx(50.5)


class TestEntityKey:
    def test_stable_and_distinct(self):
        assert entity_key("AAPL") == entity_key("AAPL")
        assert entity_key("AAPL") != entity_key("MSFT")
        assert entity_key("AAPL") > 0
