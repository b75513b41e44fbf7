import numpy as np
import pytest

from factorflow.distributions import MVNParams, mvn_logpdf
from factorflow.exceptions import DataError, ParameterError
from factorflow.factors import (
    EMAParams,
    EMAState,
    ema_fit,
    ema_gaussian_logpdf,
    ema_scan,
    global_moments,
    pca_fit,
    unwhiten,
    whiten,
)


class TestPCA:
    def test_collinear_data_needs_one_component(self):
        rng = np.random.default_rng(0)
        x1 = rng.standard_normal(200)
        data = np.column_stack([x1, 2.0 * x1])
        model = pca_fit(data, 0.99)
        assert model.n_components == 1
        assert model.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-10)

    def test_isotropic_gaussian_needs_all_components(self):
        rng = np.random.default_rng(1)
        data = rng.standard_normal((5000, 3))
        # eigenvalues of the sample covariance are near-equal, so two
        # components cannot reach 95%
        eigvals = np.sort(np.linalg.eigvalsh(np.cov(data.T)))[::-1]
        assert eigvals[:2].sum() / eigvals.sum() < 0.95
        model = pca_fit(data, 0.95)
        assert model.n_components == 3

    def test_transform_of_mean_is_zero(self):
        rng = np.random.default_rng(2)
        data = rng.standard_normal((50, 4)) + 3.0
        model = pca_fit(data, 1.0)
        np.testing.assert_allclose(model.transform(data.mean(axis=0)),
                                   np.zeros(model.n_components), atol=1e-10)

    def test_inverse_recovers_when_components_span(self):
        rng = np.random.default_rng(3)
        data = rng.standard_normal((100, 3))
        model = pca_fit(data, 1.0)
        assert model.n_components == 3
        np.testing.assert_allclose(model.inverse(model.transform(data)), data,
                                   atol=1e-10)

    def test_norm_preserved_on_component_subspace(self):
        rng = np.random.default_rng(4)
        data = rng.standard_normal((100, 5))
        model = pca_fit(data, 1.0)
        centered = data - model.mean
        f = model.transform(data)
        np.testing.assert_allclose(np.linalg.norm(f, axis=1),
                                   np.linalg.norm(centered, axis=1), atol=1e-10)

    def test_reconstruction_error_bounded_by_dropped_variance(self):
        rng = np.random.default_rng(5)
        base = rng.standard_normal((400, 2))
        data = np.column_stack([base[:, 0], base[:, 0] + 0.1 * base[:, 1],
                                base[:, 1] * 0.05])
        model = pca_fit(data, 0.95)
        recon = model.inverse(model.transform(data))
        resid_var = np.var(data - recon, axis=0).sum()
        total_var = np.var(data - data.mean(axis=0), axis=0).sum()
        dropped = 1.0 - model.explained_variance_ratio.sum()
        assert resid_var / total_var <= dropped + 1e-8

    def test_zero_variance_input_rejected(self):
        with pytest.raises(DataError):
            pca_fit(np.ones((50, 3)), 0.9)


def simple_params(d, **overrides):
    defaults = dict(
        mean_decay=np.full(d, 0.9), mean_shrink=np.zeros(d),
        mean_target=np.zeros(d), var_decay=np.full(d, 0.9),
        var_shrink=np.zeros(d), var_target=np.ones(d),
        corr_decay=0.9, corr_shrink=0.0, corr_target=np.eye(d),
    )
    defaults.update(overrides)
    return EMAParams(**defaults)


class TestEMAScan:
    def test_constant_series_converges_to_constant_and_zero_variance(self):
        series = np.full((300, 2), 1.5)
        init = EMAState(np.array([1.5, 1.5]), np.eye(2) * 4.0)
        states = ema_scan(series, simple_params(2), init=init)
        np.testing.assert_allclose(states[-1].mean, [1.5, 1.5], atol=1e-12)
        assert np.abs(states[-1].cov).max() < 1e-10

    def test_shrink_one_pins_to_target(self):
        rng = np.random.default_rng(6)
        series = rng.standard_normal((50, 2)) * 3.0 + 1.0
        target_corr = np.array([[1.0, 0.25], [0.25, 1.0]])
        params = simple_params(
            2, mean_shrink=np.ones(2), mean_target=np.array([7.0, -7.0]),
            var_shrink=np.ones(2), var_target=np.array([2.0, 0.5]),
            corr_shrink=1.0, corr_target=target_corr,
        )
        states = ema_scan(series, params)
        for s in states:
            np.testing.assert_allclose(s.mean, [7.0, -7.0], atol=1e-12)
            expected = target_corr * np.outer(np.sqrt([2.0, 0.5]),
                                              np.sqrt([2.0, 0.5]))
            np.testing.assert_allclose(s.cov, expected, atol=1e-12)

    def test_matches_hand_recursion(self):
        rng = np.random.default_rng(7)
        series = rng.standard_normal((10, 1))
        init = EMAState(np.array([0.0]), np.array([[1.0]]))
        states = ema_scan(series, simple_params(1), init=init)
        m = 0.0
        for t in range(10):
            m = 0.9 * m + 0.1 * series[t, 0]
            assert states[t].mean[0] == pytest.approx(m, abs=1e-12)

    def test_hand_recursion_variance(self):
        rng = np.random.default_rng(8)
        series = rng.standard_normal((10, 1))
        init = EMAState(np.array([0.5]), np.array([[2.0]]))
        states = ema_scan(series, simple_params(1), init=init)
        m, v = 0.5, 2.0
        for t in range(10):
            m = 0.9 * m + 0.1 * series[t, 0]
            v = 0.9 * v + 0.1 * (series[t, 0] - m) ** 2
            assert states[t].cov[0, 0] == pytest.approx(v, abs=1e-12)

    def test_covariance_symmetric_psd_on_random_data(self):
        rng = np.random.default_rng(9)
        series = rng.standard_normal((200, 4)) @ np.diag([1.0, 2.0, 0.5, 1.5])
        params = simple_params(
            4, mean_target=np.zeros(4), var_target=np.ones(4),
            corr_shrink=0.2, corr_target=np.eye(4),
        )
        states = ema_scan(series, params)
        for s in states:
            np.testing.assert_allclose(s.cov, s.cov.T, atol=1e-12)
            assert np.linalg.eigvalsh(s.cov).min() >= -1e-10

    def test_non_finite_input_rejected(self):
        series = np.ones((20, 2))
        series[3, 1] = np.nan
        with pytest.raises(DataError):
            ema_scan(series, simple_params(2))

    def test_invalid_params_rejected(self):
        with pytest.raises(ParameterError):
            simple_params(2, mean_decay=np.array([0.5, 1.5]))
        with pytest.raises(ParameterError):
            simple_params(2, corr_target=np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestEMAFit:
    def test_fixed_gaussian_attains_true_nll(self):
        rng = np.random.default_rng(10)
        cov = np.array([[1.0, 0.3], [0.3, 0.5]])
        chol = np.linalg.cholesky(cov)
        mean = np.array([0.1, -0.2])
        draw = lambda n: rng.standard_normal((n, 2)) @ chol.T + mean
        train, val = draw(1500), draw(500)
        params = ema_fit(train, val, kl_weight_grid=(0.0, 0.1), max_iter=150)
        fitted_nll = _val_nll(train, val, params)
        true_nll = -np.mean(mvn_logpdf(val, MVNParams(mean, cov)))
        assert fitted_nll <= true_nll * 1.01 + 0.01
        # the optimum pins the shrunk estimate at the true moments
        states = ema_scan(np.concatenate([train, val]), params,
                          init=EMAState(*global_moments(train)))
        last = states[-1]
        np.testing.assert_allclose(last.mean, mean, atol=0.1)
        np.testing.assert_allclose(last.cov, cov, atol=0.15)

    def test_huge_kl_weight_collapses_to_global(self):
        rng = np.random.default_rng(11)
        train = rng.standard_normal((400, 2))
        val = rng.standard_normal((100, 2))
        from factorflow.factors import _predictive_nll, _scan_arrays

        params = ema_fit(train, val, kl_weight_grid=(1e6,), max_iter=150)
        g_mean, g_cov = global_moments(train)
        means, covs = _scan_arrays(train, params, g_mean, g_cov)
        assert np.abs(means - g_mean).max() < 0.05
        assert np.abs(covs - g_cov).max() < 0.1

    def test_heteroskedastic_beats_global_gaussian(self):
        rng = np.random.default_rng(12)
        def regime_series(n):
            x = rng.standard_normal((n, 1))
            scale = np.where((np.arange(n) // 250) % 2 == 0, 0.5, 2.0)
            return x * scale[:, None]
        train, val = regime_series(2000), regime_series(1000)
        params = ema_fit(train, val, kl_weight_grid=(0.0,), max_iter=150)
        fitted_nll = _val_nll(train, val, params)
        g_mean, g_cov = global_moments(train)
        global_nll = -np.mean(
            [mvn_logpdf(v, MVNParams(g_mean, g_cov)) for v in val]
        )
        assert fitted_nll < global_nll - 0.05

    def test_never_degrades_vs_initialization(self):
        rng = np.random.default_rng(13)
        train = rng.standard_normal((300, 2))
        val = rng.standard_normal((120, 2)) * 1.7
        fitted = ema_fit(train, val, kl_weight_grid=(0.0, 1.0), max_iter=30)
        init_nll = _val_nll(train, val, EMAParams.default(train))
        assert _val_nll(train, val, fitted) <= init_nll + 1e-9


def _val_nll(train, val, params):
    g_mean, g_cov = global_moments(train)
    joint = np.concatenate([train, val])
    states = ema_scan(joint, params, init=EMAState(g_mean, g_cov))
    nlls = []
    for t in range(train.shape[0], joint.shape[0]):
        prev = states[t - 1]
        nlls.append(-ema_gaussian_logpdf(joint[t], prev))
    return float(np.mean(nlls))


class TestWhiten:
    def test_identity_state_is_identity(self):
        state = EMAState(np.zeros(3), np.eye(3))
        x = np.array([0.2, -1.0, 0.5])
        w, corr = whiten(x, state)
        np.testing.assert_allclose(w, x, atol=1e-12)
        assert corr == pytest.approx(0.0, abs=1e-12)

    def test_diagonal_case(self):
        state = EMAState(np.zeros(2), 2.0 * np.eye(2))
        x = np.array([1.0, -2.0])
        w, corr = whiten(x, state)
        np.testing.assert_allclose(w, x / 2.0, atol=1e-12)
        assert corr == pytest.approx(-np.log(4.0), abs=1e-12)

    def test_round_trip_on_random_states(self):
        rng = np.random.default_rng(14)
        for _ in range(200):
            d = rng.integers(1, 5)
            a = rng.standard_normal((d, d))
            state = EMAState(rng.standard_normal(d), a @ a.T + 0.1 * np.eye(d))
            x = rng.standard_normal(d)
            w, _ = whiten(x, state)
            np.testing.assert_allclose(unwhiten(w, state), x, atol=1e-10)

    def test_density_correction_integrates_to_one(self):
        # push a standard normal density on the whitened variable through the
        # change of variables and integrate over the raw variable by
        # quadrature
        state = EMAState(np.array([0.3, -0.1]),
                         np.array([[0.8, 0.2], [0.2, 0.5]]))
        grid = np.linspace(-6, 6, 241)
        step = grid[1] - grid[0]
        xx, yy = np.meshgrid(grid, grid)
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        w, corr = whiten(pts, state)
        log_density = mvn_logpdf(w, MVNParams(np.zeros(2), np.eye(2))) + corr
        total = np.exp(log_density).sum() * step**2
        assert total == pytest.approx(1.0, abs=1e-3)

    def test_ema_gaussian_logpdf_matches_mvn(self):
        rng = np.random.default_rng(15)
        a = rng.standard_normal((3, 3))
        state = EMAState(rng.standard_normal(3), a @ a.T + np.eye(3))
        x = rng.standard_normal(3)
        assert ema_gaussian_logpdf(x, state) == pytest.approx(
            mvn_logpdf(x, MVNParams(state.mean, state.cov)), abs=1e-12
        )
