"""Monte-Carlo NLL estimators, calibration, stylized facts, excess correlation.

The joint and per-stock (independent) NLL metrics integrate the stock
conditional densities over factor draws:

    nll_joint = -(1/N) logmeanexp_s [ sum_i log p(r_i | F_s) ]
    nll_ind   = -(1/N) sum_i logmeanexp_s [ log p(r_i | F_s) ]

both log-sum-exp stabilized, each with a delta-method MC standard error.

Calibration error follows the squared-deviation form over M evenly spaced
levels p_j = j/(M+1), with p-hat the fraction of CDF values strictly below
p_j.  Stylized-fact metrics compare lagged-squared-return correlations (ACF,
lags 1/5/20) and the leverage correlation corr(r_t^2, r_{t-1}) between real
and sampled panels.  The excess-correlation diagnostic standardizes returns
by model-implied moments and reports monthly RMS pairwise correlation minus
the zero-correlation (Hotelling) level sqrt(1/(n-1)).
"""

from __future__ import annotations

import numpy as np
import torch

from .distributions import nig_cdf
from .exceptions import DataError, NumericalError, ParameterError
from .nn import DTYPE, logmeanexp
from .sampler import MarketModel, SamplePaths, sample_one_day

__all__ = [
    "logmeanexp_with_se",
    "nll_joint_day",
    "nll_ind_day",
    "calibration_error",
    "acf_le_metrics",
    "standardize_returns",
    "excess_correlation",
    "stock_conditional_logpdfs",
    "marginal_cdf_observed_factors",
    "pit_from_paths",
    "summary_table",
]


def logmeanexp_with_se(x):
    """(logmeanexp, delta-method standard error) for one sample vector."""
    x = np.asarray(x, dtype=float)
    m = x.max()
    w = np.exp(x - m)
    mean_w = w.mean()
    se = w.std(ddof=1) / (mean_w * np.sqrt(len(x))) if len(x) > 1 else np.inf
    return float(m + np.log(mean_w)), float(se)


def _day_factor_samples(market: MarketModel, t, n_samples, seed):
    window = market.factor_history_window(t)
    state = market.ema_states[t - 1]
    rng = np.random.default_rng([int(seed), int(t), 0])
    cfg = market.factor_model.config
    latent = rng.standard_normal((n_samples, cfg.latent))
    variates = np.stack([
        rng.standard_normal((n_samples, cfg.factor_dim)),
        rng.random((n_samples, cfg.factor_dim)),
        rng.standard_normal((n_samples, cfg.factor_dim)),
    ], axis=-1)
    windows = np.broadcast_to(window, (n_samples,) + window.shape)
    means = covs = None
    if market.use_whitening:
        means = np.broadcast_to(state.mean, (n_samples, cfg.factor_dim))
        covs = np.broadcast_to(state.cov,
                               (n_samples, cfg.factor_dim, cfg.factor_dim))
    return market.factor_model.sample_batch(windows, means, covs, latent,
                                            variates)


def stock_conditional_logpdfs(market: MarketModel, t, tickers, factor_samples):
    """(n_tickers, n_samples) matrix of log p(r_i | F_s) at day index t.

    History summaries are computed once per ticker and reused across all
    factor draws.
    """
    stock_wins, factor_win, feats = market.stock_windows(t, tickers)
    summaries = market.stock_summary_batch(stock_wins, factor_win)
    model = market.stock_model
    n_samples = factor_samples.shape[0]
    f_t = torch.as_tensor(factor_samples, dtype=DTYPE)
    idx = [market.tickers.index(tk) for tk in tickers]
    out = np.empty((len(tickers), n_samples))
    with torch.no_grad():
        for j, (tk, col) in enumerate(zip(tickers, idx)):
            summary = summaries[j:j + 1].expand(n_samples, -1)
            feats_t = None
            if feats is not None:
                feats_t = torch.as_tensor(
                    np.broadcast_to(feats[j], (n_samples, feats.shape[1])),
                    dtype=DTYPE)
            conds, base = model.condition_from_summary(summary, f_t, feats_t)
            r = torch.full((n_samples,), float(market.returns[t, col]),
                           dtype=DTYPE)
            ll = model.log_prob(r, conds, base).numpy()
            if not np.isfinite(ll).all():
                bad = int(np.nonzero(~np.isfinite(ll))[0][0])
                raise NumericalError(
                    f"non-finite stock log-density for ticker {tk!r} at "
                    f"factor sample {bad}"
                )
            out[j] = ll
    return out


def nll_joint_day(market: MarketModel, date, n_factor_samples=100_000,
                  seed=0, tickers=None):
    """Universe-averaged joint NLL for one day, with its MC standard error."""
    if n_factor_samples < 1:
        raise ParameterError("n_factor_samples must be >= 1")
    t = market.date_index(date)
    if tickers is None:
        tickers = market.active_tickers(t)
    if not tickers:
        raise DataError(f"no tickers with complete history at {date!r}")
    samples = _day_factor_samples(market, t, n_factor_samples, seed)
    ll = stock_conditional_logpdfs(market, t, tickers, samples)
    total = ll.sum(axis=0)
    lme, se = logmeanexp_with_se(total)
    n = len(tickers)
    return -lme / n, se / n


def nll_ind_day(market: MarketModel, date, n_factor_samples=100_000, seed=0,
                tickers=None):
    """Universe-averaged per-stock marginal NLL for one day, plus SE."""
    if n_factor_samples < 1:
        raise ParameterError("n_factor_samples must be >= 1")
    t = market.date_index(date)
    if tickers is None:
        tickers = market.active_tickers(t)
    if not tickers:
        raise DataError(f"no tickers with complete history at {date!r}")
    samples = _day_factor_samples(market, t, n_factor_samples, seed)
    ll = stock_conditional_logpdfs(market, t, tickers, samples)
    n = len(tickers)
    per_stock = {}
    total = 0.0
    var = 0.0
    for j, tk in enumerate(tickers):
        lme, se = logmeanexp_with_se(ll[j])
        per_stock[tk] = -lme
        total += lme
        var += se**2
    return -total / n, float(np.sqrt(var)) / n, per_stock


def calibration_error(cdf_values, m_levels=100) -> float:
    """Sum of squared deviations between nominal and empirical coverage.

    Levels are p_j = j/(m_levels+1); the empirical p-hat counts values
    strictly below each level.
    """
    values = np.asarray(cdf_values, dtype=float)
    if values.size == 0:
        raise DataError("calibration_error needs at least one CDF value")
    if m_levels < 1:
        raise ParameterError("m_levels must be >= 1")
    if np.any((values < 0) | (values > 1)):
        raise DataError("CDF values must lie in [0, 1]")
    levels = np.arange(1, m_levels + 1) / (m_levels + 1)
    covered = (values[None, :] < levels[:, None]).mean(axis=1)
    return float(np.sum((levels - covered) ** 2))


def acf_le_metrics(real_panel, sampled_panel, lags=(1, 5, 20)):
    """Volatility-clustering (ACF) and leverage (LE) error metrics.

    Both panels are (T, N) and date-aligned, ``sampled_panel`` holding one
    model draw per cell.  Per security the ACF error at lag d is the absolute
    difference between corr(real_t^2, real_{t-d}^2) and corr(samp_t^2,
    real_{t-d}^2); LE uses corr(., real_{t-1}) of squared values against the
    lagged signed return.
    """
    real = np.asarray(real_panel, dtype=float)
    samp = np.asarray(sampled_panel, dtype=float)
    if real.shape != samp.shape:
        raise DataError("panels must be aligned")
    if real.shape[0] < 100:
        raise DataError(f"need at least 100 rows, got {real.shape[0]}")
    n = real.shape[1]
    acf_terms = np.empty((n, len(lags)))
    le_terms = np.empty(n)
    for i in range(n):
        r2 = real[:, i] ** 2
        s2 = samp[:, i] ** 2
        for k, lag in enumerate(lags):
            target = r2[:-lag]
            acf_terms[i, k] = abs(
                _corr(r2[lag:], target) - _corr(s2[lag:], target)
            )
        lagged = real[:-1, i]
        le_terms[i] = abs(_corr(r2[1:], lagged) - _corr(s2[1:], lagged))
    return float(acf_terms.mean()), float(le_terms.mean())


def _corr(a, b):
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def standardize_returns(market: MarketModel, dates, n_samples=2048, seed=0,
                        mode="observed", tickers=None):
    """Standardize observed returns by model-implied moments.

    mode="observed": per (stock, day), moments are MC-estimated from the
    stock model conditioned on the day's observed factors.  mode="sampled":
    joint paths with sampled factors give the day's full return covariance
    and the observed vector is whitened by its inverse symmetric square root
    (scaled and rotated rather than elementwise).

    Returns (panel (n_dates, n_tickers), tickers).
    """
    if mode not in ("observed", "sampled"):
        raise ParameterError(f"unknown mode {mode!r}")
    first_t = market.date_index(dates[0])
    if tickers is None:
        tickers = market.active_tickers(first_t)
    out = np.full((len(dates), len(tickers)), np.nan)
    model = market.stock_model
    for row, date in enumerate(dates):
        t = market.date_index(date)
        cols = [market.tickers.index(tk) for tk in tickers]
        observed = market.returns[t, cols]
        if mode == "observed":
            stock_wins, factor_win, feats = market.stock_windows(t, tickers)
            summaries = market.stock_summary_batch(stock_wins, factor_win)
            f_next = torch.as_tensor(market.f_pca[t:t + 1], dtype=DTYPE)
            for j, tk in enumerate(tickers):
                feats_t = None
                if feats is not None:
                    feats_t = torch.as_tensor(feats[j:j + 1], dtype=DTYPE)
                with torch.no_grad():
                    conds, base = model.condition_from_summary(
                        summaries[j:j + 1], f_next, feats_t)
                draws = model.sample_from_conditioners(
                    conds, base, n_samples,
                    seed=np.random.default_rng([seed, t, j]).integers(2**31))
                mu_hat = draws.mean()
                sig_hat = draws.std(ddof=1)
                if sig_hat < 1e-10:
                    raise NumericalError(
                        f"degenerate model std for {tk!r} on {date!r}")
                out[row, j] = (observed[j] - mu_hat) / sig_hat
        else:
            paths = sample_one_day(market, date, n_paths=n_samples,
                                   seed=seed + t, tickers=list(tickers))
            draws = paths.returns[:, 0, :]
            mu_hat = draws.mean(axis=0)
            cov_hat = np.cov(draws, rowvar=False)
            cov_hat = np.atleast_2d(cov_hat)
            vals, vecs = np.linalg.eigh(cov_hat)
            if vals.min() < 1e-20:
                raise NumericalError(f"degenerate model covariance on {date!r}")
            inv_sqrt = vecs @ np.diag(vals**-0.5) @ vecs.T
            out[row] = inv_sqrt @ (observed - mu_hat)
    return out, list(tickers)


def excess_correlation(standardized_panel, month_keys, min_days=5):
    """Monthly RMS pairwise correlation minus the Hotelling null level.

    ``month_keys`` labels each row (day); months with fewer than ``min_days``
    rows are an error, as is an empty partition.  Stocks must be present (no
    NaN) for the entire month to enter that month's correlation.
    """
    panel = np.asarray(standardized_panel, dtype=float)
    keys = list(month_keys)
    if panel.shape[0] != len(keys):
        raise DataError("month_keys must label every row")
    order = sorted(set(keys), key=keys.index)
    results = []
    for month in order:
        rows = [i for i, k in enumerate(keys) if k == month]
        if len(rows) == 0:
            raise DataError(f"empty month {month!r}")
        if len(rows) < min_days:
            raise DataError(
                f"month {month!r} has {len(rows)} days, need {min_days}")
        block = panel[rows]
        present = ~np.isnan(block).any(axis=0)
        block = block[:, present]
        if block.shape[1] < 2:
            raise DataError(f"month {month!r} has fewer than two full stocks")
        corr = np.corrcoef(block, rowvar=False)
        iu = np.triu_indices(corr.shape[0], k=1)
        rms = float(np.sqrt(np.mean(corr[iu] ** 2)))
        n = len(rows)
        results.append((month, rms - np.sqrt(1.0 / (n - 1))))
    return results


# ---------------------------------------------------------------------------
# PIT helpers for calibration studies


def marginal_cdf_observed_factors(market: MarketModel, date, ticker,
                                  value=None, n_factor_samples=128, seed=0):
    """Model CDF of a return with the factor integrated out by MC.

    Averages the conditional flow CDF over factor draws.  ``value`` defaults
    to the observed return for (ticker, date).
    """
    t = market.date_index(date)
    col = market.tickers.index(ticker)
    if value is None:
        value = float(market.returns[t, col])
    samples = _day_factor_samples(market, t, n_factor_samples, seed)
    stock_wins, factor_win, feats = market.stock_windows(t, [ticker])
    summary = market.stock_summary_batch(stock_wins, factor_win)
    model = market.stock_model
    f_t = torch.as_tensor(samples, dtype=DTYPE)
    feats_t = None
    if feats is not None:
        feats_t = torch.as_tensor(
            np.broadcast_to(feats[0], (n_factor_samples, feats.shape[1])),
            dtype=DTYPE)
    with torch.no_grad():
        conds, base = model.condition_from_summary(
            summary.expand(n_factor_samples, -1), f_t, feats_t)
    z = model.base_values(np.full(n_factor_samples, value), conds)
    if base.kind == "normal":
        from scipy.stats import norm

        mu = base["mu"].detach().numpy()
        sigma = base["sigma"].detach().numpy()
        return float(np.mean(norm.cdf(z, loc=mu, scale=sigma)))
    vals = [nig_cdf(z[s], base.nig_params(s))
            for s in range(n_factor_samples)]
    return float(np.mean(vals))


def pit_from_paths(paths: SamplePaths, observed, day=0):
    """Empirical-CDF PIT of an observed return vector within joint paths.

    Returns (per-ticker PIT vector, portfolio PIT) where the portfolio is
    equal-weighted over the path tickers.
    """
    draws = paths.returns[:, day, :]
    observed = np.asarray(observed, dtype=float)
    if observed.shape != (draws.shape[1],):
        raise DataError(
            f"observed must have length {draws.shape[1]}, got {observed.shape}")
    per_ticker = np.array([
        np.searchsorted(np.sort(draws[:, i]), observed[i], side="left")
        / draws.shape[0]
        for i in range(draws.shape[1])
    ])
    port_draws = draws.mean(axis=1)
    port_obs = observed.mean()
    portfolio = np.searchsorted(np.sort(port_draws), port_obs,
                                side="left") / draws.shape[0]
    return per_ticker, float(portfolio)


def summary_table(rows):
    """Pivot metric rows into the side-by-side model-comparison layout.

    ``rows`` are dicts with keys model, split, metric, value.  Output columns
    follow the Val/Test x Ind/Joint arrangement when present.
    """
    import pandas as pd

    frame = pd.DataFrame(rows)
    if frame.empty:
        raise DataError("no metric rows to summarize")
    pivot = frame.pivot_table(index="model",
                              columns=["split", "metric"],
                              values="value", aggfunc="mean")
    pivot.columns = [f"{split}_{metric}" for split, metric in pivot.columns]
    return pivot.reset_index()
