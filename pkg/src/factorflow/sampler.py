"""Joint one-day and autoregressive multi-day sampling, plus MC statistics.

A :class:`MarketModel` bundles the fitted artifacts (PCA, EMA parameters,
factor CIWAE, stock flow) with the aligned data panels and answers sampling
and conditional-density queries per date.

Randomness discipline: every (day, entity) pair owns an independent
substream seeded by ``(seed, day, entity_key)``, where the entity key is 0
for the factor model and a stable digest of the ticker otherwise.  Each path
consumes a fixed number of variates from its row of the pre-drawn block, so
ticker order cannot matter and growing ``n_paths`` extends the blocks
without disturbing earlier paths.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import DataError, ParameterError
from .factors import EMAParams, EMARecursion, EMAState, PCAModel, ema_scan_full
from .nn import DTYPE

__all__ = [
    "MarketModel",
    "SamplePaths",
    "sample_one_day",
    "sample_multi_day",
    "mc_statistics",
    "entity_key",
]


def entity_key(ticker: str) -> int:
    """Stable 63-bit digest of a ticker, independent of universe order."""
    digest = hashlib.sha256(ticker.encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _day_rng(seed, day_index, entity):
    return np.random.default_rng([int(seed), int(day_index), int(entity)])


def _normals_from_uniforms(u):
    from scipy.stats import norm

    return norm.ppf(np.clip(u, 1e-300, 1.0 - 1e-16))


def _factor_variates(rng, n_paths, latent, d):
    """Fixed per-path layout drawn in one call, so earlier paths are stable
    when n_paths grows: latent normals, then (normal, uniform, normal) per
    dimension.  Normals come from inverse-CDF of the uniform block."""
    block = rng.random((n_paths, latent + 3 * d))
    latent_normals = _normals_from_uniforms(block[:, :latent])
    nig = np.stack([
        _normals_from_uniforms(block[:, latent:latent + d]),
        block[:, latent + d:latent + 2 * d],
        _normals_from_uniforms(block[:, latent + 2 * d:]),
    ], axis=-1)
    return latent_normals, nig


def _stock_variates(rng, n_paths):
    """Fixed per-path layout (normal, uniform, normal) from one draw."""
    block = rng.random((n_paths, 3))
    return np.column_stack([
        _normals_from_uniforms(block[:, 0]), block[:, 1],
        _normals_from_uniforms(block[:, 2]),
    ])


@dataclass
class SamplePaths:
    """paths x horizon x (factors, tickers) joint sample tensor.

    Within one path-day all stock samples share exactly one factor draw.
    """

    factors: np.ndarray   # (paths, horizon, d_pca)
    returns: np.ndarray   # (paths, horizon, n_tickers)
    tickers: list
    dates: list           # target-day labels, length horizon
    seed: int

    @property
    def n_paths(self) -> int:
        return self.returns.shape[0]

    @property
    def horizon(self) -> int:
        return self.returns.shape[1]

    def ticker_column(self, ticker, day=0):
        return self.returns[:, day, self.tickers.index(ticker)]

    def to_arrays(self):
        return {"factors": self.factors, "returns": self.returns}

    def meta(self):
        return {"tickers": list(self.tickers),
                "dates": [str(d) for d in self.dates],
                "seed": int(self.seed)}

    def to_frame(self):
        import pandas as pd

        paths, horizon, _ = self.returns.shape
        path_idx = np.repeat(np.arange(paths), horizon)
        day_idx = np.tile(np.arange(horizon), paths)
        data = {"path": path_idx, "date": [self.dates[h] for h in day_idx]}
        flat_f = self.factors.reshape(paths * horizon, -1)
        for j in range(flat_f.shape[1]):
            data[f"factor_{j}"] = flat_f[:, j]
        flat_r = self.returns.reshape(paths * horizon, -1)
        for i, ticker in enumerate(self.tickers):
            data[ticker] = flat_r[:, i]
        return pd.DataFrame(data)


class MarketModel:
    """Fitted joint model over a panel plus the conditioning plumbing.

    ``panel_returns`` (T, N) with boolean ``panel_mask``; ``factor_values``
    (T, d_raw) raw factor returns aligned on the same dates.  The PCA
    series, EMA states (with raw internals for rollout continuation) and
    whitened series are derived once at construction.
    """

    def __init__(self, pca: PCAModel, ema_params: EMAParams, factor_model,
                 stock_model, panel_returns, panel_mask, factor_values,
                 dates, tickers, features=None,
                 ema_init: EMAState | None = None):
        self.pca = pca
        self.ema_params = ema_params
        self.factor_model = factor_model
        self.stock_model = stock_model
        self.returns = np.asarray(panel_returns, dtype=float)
        self.mask = np.asarray(panel_mask, dtype=bool)
        self.factor_values = np.asarray(factor_values, dtype=float)
        self.dates = list(dates)
        self.tickers = list(tickers)
        self.features = features
        if self.returns.shape[0] != self.factor_values.shape[0]:
            raise DataError("panel and factor history must share the date axis")
        self.f_pca = pca.transform(self.factor_values)
        (self.ema_states, self._raw_means, self._raw_vars,
         self._raw_corrs) = ema_scan_full(self.f_pca, ema_params,
                                          init=ema_init)
        self._whitened = None

    # -- conditioning data ---------------------------------------------

    @property
    def factor_window(self) -> int:
        return self.factor_model.config.window

    @property
    def stock_window(self) -> int:
        return self.stock_model.config.window

    @property
    def use_whitening(self) -> bool:
        return self.factor_model.config.use_ema_whitening

    def whitened_series(self):
        if self._whitened is None:
            from .factors import whiten

            series = np.empty_like(self.f_pca)
            series[0] = self.f_pca[0]
            for t in range(1, len(series)):
                series[t], _ = whiten(self.f_pca[t], self.ema_states[t - 1])
            self._whitened = series
        return self._whitened

    def date_index(self, date) -> int:
        try:
            return self.dates.index(date)
        except ValueError:
            raise DataError(f"date {date!r} not in panel")

    def factor_history_window(self, t):
        """Factor-model conditioning window ending the day before target t."""
        w = self.factor_window
        if t < w + 1:
            raise DataError(f"target index {t} lacks a full {w}-day window")
        series = self.whitened_series() if self.use_whitening else self.f_pca
        return series[t - w:t]

    def active_tickers(self, t):
        """Tickers with a full stock window plus membership at target t."""
        w = self.stock_window
        ok = np.isfinite(np.nan_to_num(self.returns, nan=np.nan)) & self.mask
        alive = ok[t - w:t + 1].all(axis=0)
        return [self.tickers[i] for i in np.nonzero(alive)[0]]

    def stock_windows(self, t, tickers):
        w = self.stock_window
        idx = [self.tickers.index(tk) for tk in tickers]
        missing = [tk for tk, i in zip(tickers, idx)
                   if not (self.mask[t - w:t + 1, i].all()
                           and np.isfinite(self.returns[t - w:t + 1, i]).all())]
        if missing:
            raise DataError(
                f"incomplete history for tickers {missing} at index {t}")
        stock_wins = self.returns[t - w:t][:, idx].T    # (n, w)
        factor_win = self.f_pca[t - w:t]                # (w, d)
        feats = None
        if self.features is not None and self.stock_model.config.feature_dim:
            feats = np.stack([self.features[t, i] for i in idx])
        return stock_wins, factor_win, feats

    def stock_summary_batch(self, stock_wins, factor_wins):
        """History summaries for stacked windows.

        ``stock_wins`` (n, w); ``factor_wins`` (w, d) shared or (n, w, d)
        per-row.  Returns (n, hidden).
        """
        cfg = self.stock_model.config
        n = stock_wins.shape[0]
        cols = []
        if cfg.include_stock_history:
            cols.append(stock_wins[:, :, None])
        if cfg.include_factor_history:
            fw = factor_wins if factor_wins.ndim == 3 else np.broadcast_to(
                factor_wins, (n,) + factor_wins.shape)
            cols.append(fw)
        if not cols:
            with torch.no_grad():
                return self.stock_model.summarize_history(
                    torch.empty(n, cfg.window, 0, dtype=DTYPE))
        windows = torch.as_tensor(np.concatenate(cols, axis=2), dtype=DTYPE)
        with torch.no_grad():
            return self.stock_model.summarize_history(windows)


# ---------------------------------------------------------------------------
# sampling


def sample_one_day(market: MarketModel, date, n_paths, seed, tickers=None):
    """Joint next-day samples: one factor draw per path, shared by all stocks."""
    return sample_multi_day(market, date, horizon=1, n_paths=n_paths,
                            seed=seed, tickers=tickers)


def sample_multi_day(market: MarketModel, date, horizon, n_paths, seed,
                     tickers=None, chunk=256):
    """Autoregressive joint sampling over ``horizon`` days.

    Day h > 0 conditions every path on its own sampled history; all rolling
    windows keep their fixed training length (the oldest day is dropped as
    each sampled day is appended), and EMA states advance per path.

    All network evaluations run on fixed-shape path chunks (the path count
    is padded up to a multiple of ``chunk`` internally), so earlier paths
    are bit-identical when n_paths grows: tensor kernels choose reduction
    orders by shape, and padding pins the shape.
    """
    if horizon < 1:
        raise ParameterError(f"horizon must be >= 1, got {horizon}")
    if n_paths < 1:
        raise ParameterError(f"n_paths must be >= 1, got {n_paths}")
    t0 = market.date_index(date)
    if tickers is None:
        tickers = market.active_tickers(t0)
    if not tickers:
        raise DataError(f"no tickers with complete history at {date!r}")
    fw, sw = market.factor_window, market.stock_window
    if t0 < max(fw + 1, sw):
        raise DataError(f"target {date!r} lacks full lookback windows")

    n = len(tickers)
    d = market.factor_model.config.factor_dim
    latent = market.factor_model.config.latent
    n_eff = int(np.ceil(n_paths / chunk)) * chunk
    from .ciwae import sample_factors_batch

    factor_draws = np.empty((n_eff, horizon, d))
    return_draws = np.empty((n_eff, horizon, n))

    stock_wins0, factor_win0, feats0 = market.stock_windows(t0, tickers)
    cond_series = market.whitened_series() if market.use_whitening \
        else market.f_pca

    if horizon > 1:
        fpca_buf = np.broadcast_to(market.f_pca[t0 - sw:t0],
                                   (n_eff, sw, d)).copy()
        cond_buf = np.broadcast_to(cond_series[t0 - fw:t0],
                                   (n_eff, fw, d)).copy()
        returns_buf = np.broadcast_to(stock_wins0.T[None],
                                      (n_eff, sw, n)).copy()
        ema = EMARecursion(market.ema_params,
                           market._raw_means[t0 - 1],
                           market._raw_vars[t0 - 1],
                           market._raw_corrs[t0 - 1], n_paths=n_eff)
    state0 = market.ema_states[t0 - 1]
    state_means = np.broadcast_to(state0.mean, (n_eff, d)).copy()
    state_covs = np.broadcast_to(state0.cov, (n_eff, d, d)).copy()
    day0_window = np.broadcast_to(cond_series[t0 - fw:t0], (chunk, fw, d))
    chunks = range(0, n_eff, chunk)

    for h in range(horizon):
        latent_normals, nig_variates = _factor_variates(
            _day_rng(seed, h, 0), n_eff, latent, d)
        for lo in chunks:
            hi = lo + chunk
            windows = day0_window if h == 0 else cond_buf[lo:hi]
            factor_draws[lo:hi, h] = sample_factors_batch(
                market.factor_model, windows,
                state_means[lo:hi] if market.use_whitening else None,
                state_covs[lo:hi] if market.use_whitening else None,
                latent_normals[lo:hi], nig_variates[lo:hi],
            )
        f_next = factor_draws[:, h]

        if h == 0:
            summaries0 = market.stock_summary_batch(stock_wins0, factor_win0)
        f_next_t = torch.as_tensor(f_next, dtype=DTYPE)
        for j, ticker in enumerate(tickers):
            variates = _stock_variates(_day_rng(seed, h, entity_key(ticker)),
                                       n_eff)
            feats_t = None
            if feats0 is not None:
                feats_t = torch.as_tensor(
                    np.broadcast_to(feats0[j], (chunk, feats0.shape[1])),
                    dtype=DTYPE)
            for lo in chunks:
                hi = lo + chunk
                if h == 0:
                    summary = summaries0[j:j + 1].expand(chunk, -1)
                else:
                    summary = market.stock_summary_batch(
                        returns_buf[lo:hi, :, j], fpca_buf[lo:hi])
                with torch.no_grad():
                    conds, base = market.stock_model.condition_from_summary(
                        summary, f_next_t[lo:hi], feats_t)
                return_draws[lo:hi, h, j] = \
                    market.stock_model.sample_from_conditioners(
                        conds, base, chunk, variates=variates[lo:hi])

        if horizon > 1:
            # advance per-path state and windows with the sampled day
            if market.use_whitening:
                dev = f_next - state_means
                new_cond = np.linalg.solve(state_covs, dev[:, :, None])[:, :, 0]
            else:
                new_cond = f_next
            cond_buf = np.concatenate(
                [cond_buf[:, 1:], new_cond[:, None, :]], axis=1)
            fpca_buf = np.concatenate(
                [fpca_buf[:, 1:], f_next[:, None, :]], axis=1)
            returns_buf = np.concatenate(
                [returns_buf[:, 1:], return_draws[:, h][:, None, :]], axis=1)
            state_means, state_covs = ema.update(f_next)

    target_dates = [
        market.dates[t0 + h] if t0 + h < len(market.dates) else f"{date}+{h}"
        for h in range(horizon)
    ]
    return SamplePaths(factors=factor_draws[:n_paths],
                       returns=return_draws[:n_paths],
                       tickers=list(tickers), dates=target_dates, seed=seed)


# ---------------------------------------------------------------------------
# Monte-Carlo statistics


def mc_statistics(paths: SamplePaths, day=0,
                  quantiles=(0.05, 0.25, 0.5, 0.75, 0.95),
                  correlations=True):
    """Per-ticker vol, pairwise correlations and quantiles across paths.

    Vol uses the unbiased (n-1) estimator; quantiles interpolate linearly.
    Zero-variance columns make the correlation matrix undefined, which is an
    error unless ``correlations=False``.
    """
    if paths.n_paths < 2:
        raise ParameterError("need at least two paths for statistics")
    r = paths.returns[:, day, :]
    vols = r.std(axis=0, ddof=1)
    vols[r.max(axis=0) == r.min(axis=0)] = 0.0  # exact for constant columns
    qs = np.quantile(r, quantiles, axis=0)
    corr = None
    if correlations:
        degenerate = [paths.tickers[i] for i in np.nonzero(vols == 0.0)[0]]
        if degenerate:
            raise DataError(
                f"correlation undefined for zero-variance tickers {degenerate}")
        corr = np.atleast_2d(np.corrcoef(r, rowvar=False))
    return {
        "tickers": list(paths.tickers),
        "vol": vols,
        "correlation": corr,
        "quantiles": {q: qs[k] for k, q in enumerate(quantiles)},
    }
