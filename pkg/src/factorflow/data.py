"""Data ingestion, date splits, and the synthetic ground-truth market.

CSV schemas (long format):

    returns.csv   date,ticker,return
    universe.csv  date,ticker            (point-in-time membership)
    factors.csv   date,factor_id,value
    features.csv  date,ticker,feature_1..feature_m

Dates are ISO-8601 strings; business-day logic belongs to the data producer.
Returns are simple daily returns by default; a config switch selects log
returns downstream.

The synthetic generator produces a linear factor market

    r_{i,t} = beta_i . F_t + sigma_{i,t} * eps_{i,t}

with configurable factor dynamics (iid Gaussian or GARCH), idiosyncratic
volatility (constant, GARCH, or driven by the lagged factor magnitude) and
noise family (Gaussian or standardized NIG).  The returned truth handle
evaluates exact conditional densities for oracle comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .distributions import NIGParams, nig_logpdf
from .exceptions import DataError, ParameterError

__all__ = [
    "ReturnPanel",
    "FactorHistory",
    "SplitConfig",
    "PanelSplit",
    "SynthConfig",
    "SynthTruth",
    "load_panel",
    "load_factors",
    "load_features",
    "split_by_date",
    "synth_generate",
    "write_market_csvs",
]


@dataclass
class ReturnPanel:
    dates: list
    tickers: list
    returns: np.ndarray   # (T, N), NaN where not a member
    mask: np.ndarray      # (T, N) bool

    def __post_init__(self):
        if list(self.dates) != sorted(set(self.dates)):
            raise DataError("dates must be strictly increasing and unique")
        t_len, n = len(self.dates), len(self.tickers)
        if self.returns.shape != (t_len, n) or self.mask.shape != (t_len, n):
            raise DataError("returns/mask shape must match dates x tickers")
        bad = self.mask & ~np.isfinite(self.returns)
        if bad.any():
            t, i = np.argwhere(bad)[0]
            raise DataError(
                f"non-finite return for member cell ({self.dates[t]}, "
                f"{self.tickers[i]})"
            )

    @property
    def shape(self):
        return self.returns.shape

    def restrict_dates(self, start_idx, stop_idx):
        return ReturnPanel(
            dates=list(self.dates[start_idx:stop_idx]),
            tickers=list(self.tickers),
            returns=self.returns[start_idx:stop_idx].copy(),
            mask=self.mask[start_idx:stop_idx].copy(),
        )


@dataclass
class FactorHistory:
    dates: list
    factor_ids: list
    values: np.ndarray    # (T, d_raw)

    def __post_init__(self):
        if self.values.shape != (len(self.dates), len(self.factor_ids)):
            raise DataError("factor values must be dates x factor_ids")
        if not np.isfinite(self.values).all():
            raise DataError("factor history contains non-finite values")


def _parse_dates(series, filename):
    parsed = pd.to_datetime(series, format="%Y-%m-%d", errors="coerce")
    bad = parsed.isna()
    if bad.any():
        row = int(np.nonzero(bad.to_numpy())[0][0]) + 2  # 1-based + header
        raise DataError(
            f"{filename}: unparseable date {series.iloc[int(np.nonzero(bad.to_numpy())[0][0])]!r} at row {row}"
        )
    return parsed.dt.strftime("%Y-%m-%d")


def load_panel(returns_csv, universe_csv) -> ReturnPanel:
    """Assemble the point-in-time return panel from long CSVs.

    A (date, ticker) pair absent from the universe file is masked out, not an
    error; duplicate keys and non-finite returns are rejected with their row
    numbers.
    """
    ret = pd.read_csv(returns_csv)
    _require_columns(ret, ["date", "ticker", "return"], returns_csv)
    ret["date"] = _parse_dates(ret["date"], returns_csv)
    dup = ret.duplicated(subset=["date", "ticker"])
    if dup.any():
        row = int(np.nonzero(dup.to_numpy())[0][0]) + 2
        raise DataError(f"{returns_csv}: duplicate (date,ticker) at row {row}")
    finite = np.isfinite(ret["return"].to_numpy(dtype=float))
    if not finite.all():
        row = int(np.nonzero(~finite)[0][0]) + 2
        raise DataError(f"{returns_csv}: non-finite return at row {row}")

    uni = pd.read_csv(universe_csv)
    _require_columns(uni, ["date", "ticker"], universe_csv)
    uni["date"] = _parse_dates(uni["date"], universe_csv)
    dup = uni.duplicated(subset=["date", "ticker"])
    if dup.any():
        row = int(np.nonzero(dup.to_numpy())[0][0]) + 2
        raise DataError(f"{universe_csv}: duplicate (date,ticker) at row {row}")

    dates = sorted(set(ret["date"]))
    tickers = sorted(set(ret["ticker"]))
    date_idx = {d: i for i, d in enumerate(dates)}
    ticker_idx = {tk: i for i, tk in enumerate(tickers)}
    returns = np.full((len(dates), len(tickers)), np.nan)
    rows = ret["date"].map(date_idx).to_numpy()
    cols = ret["ticker"].map(ticker_idx).to_numpy()
    returns[rows, cols] = ret["return"].to_numpy(dtype=float)

    mask = np.zeros_like(returns, dtype=bool)
    member_rows = uni["date"].map(date_idx)
    member_cols = uni["ticker"].map(ticker_idx)
    ok = member_rows.notna() & member_cols.notna()
    mask[member_rows[ok].astype(int), member_cols[ok].astype(int)] = True
    mask &= np.isfinite(returns)
    returns[~mask] = np.nan
    return ReturnPanel(dates=dates, tickers=tickers, returns=returns,
                       mask=mask)


def load_factors(factors_csv) -> FactorHistory:
    frame = pd.read_csv(factors_csv)
    _require_columns(frame, ["date", "factor_id", "value"], factors_csv)
    frame["date"] = _parse_dates(frame["date"], factors_csv)
    dup = frame.duplicated(subset=["date", "factor_id"])
    if dup.any():
        row = int(np.nonzero(dup.to_numpy())[0][0]) + 2
        raise DataError(f"{factors_csv}: duplicate (date,factor_id) at row {row}")
    pivot = frame.pivot(index="date", columns="factor_id", values="value")
    if pivot.isna().any().any():
        raise DataError(f"{factors_csv}: missing (date,factor_id) combinations")
    return FactorHistory(
        dates=list(pivot.index),
        factor_ids=list(pivot.columns),
        values=pivot.to_numpy(dtype=float),
    )


def load_features(features_csv, dates, tickers):
    """Optional per-stock feature matrix aligned to (dates, tickers).

    Missing cells stay zero; the model carries a presence flag separately.
    Returns (features (T, N, m), feature_names).
    """
    frame = pd.read_csv(features_csv)
    if "date" not in frame.columns or "ticker" not in frame.columns:
        raise DataError(f"{features_csv}: need date,ticker columns")
    feature_names = [c for c in frame.columns if c not in ("date", "ticker")]
    if not feature_names:
        raise DataError(f"{features_csv}: no feature columns")
    frame["date"] = _parse_dates(frame["date"], features_csv)
    date_idx = {d: i for i, d in enumerate(dates)}
    ticker_idx = {tk: i for i, tk in enumerate(tickers)}
    out = np.zeros((len(dates), len(tickers), len(feature_names)))
    for _, row in frame.iterrows():
        t = date_idx.get(row["date"])
        i = ticker_idx.get(row["ticker"])
        if t is None or i is None:
            continue
        out[t, i] = row[feature_names].to_numpy(dtype=float)
    return out, feature_names


def _require_columns(frame, needed, filename):
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise DataError(f"{filename}: missing columns {missing}")


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitConfig:
    train: tuple   # (start, end) inclusive ISO dates
    val: tuple
    test: tuple

    def __post_init__(self):
        spans = [self.train, self.val, self.test]
        for a, b in spans:
            if a > b:
                raise ParameterError(f"split range {a}..{b} is reversed")
        for (a1, b1), (a2, b2) in zip(spans, spans[1:]):
            if b1 >= a2:
                raise ParameterError(
                    "splits must be ordered and non-overlapping")


@dataclass
class PanelSplit:
    """A split with its conditioning context.

    ``panel`` includes up to ``lookback`` rows before the split range so
    early targets keep full windows; rows before ``target_start_idx`` are
    context only, never targets.
    """

    panel: ReturnPanel
    target_dates: list
    target_start_idx: int


def split_by_date(panel: ReturnPanel, splits: SplitConfig, lookback=256):
    """Partition a panel into train/val/test with lookback context."""
    dates = np.asarray(panel.dates)
    out = []
    for start, end in (splits.train, splits.val, splits.test):
        inside = (dates >= start) & (dates <= end)
        if not inside.any():
            raise DataError(f"split {start}..{end} matches no panel dates")
        first = int(np.argmax(inside))
        last = int(len(dates) - np.argmax(inside[::-1]))
        context_start = max(0, first - lookback)
        sub = panel.restrict_dates(context_start, last)
        out.append(PanelSplit(
            panel=sub,
            target_dates=[d for d in dates[first:last]],
            target_start_idx=first - context_start,
        ))
    return tuple(out)


# ---------------------------------------------------------------------------
# synthetic market


@dataclass
class SynthConfig:
    n_stocks: int = 20
    n_factors: int = 5
    horizon: int = 3000
    factor_process: str = "gaussian"      # gaussian | garch
    factor_vol: float = 0.01
    factor_garch: dict = field(default_factory=lambda: {
        "omega_frac": 0.05, "alpha": 0.10, "beta": 0.85})
    loading_low: float = 0.5
    loading_high: float = 1.5
    idio_process: str = "constant"        # constant | garch | factor_lagged
    idio_vol: float = 0.01
    idio_garch: dict = field(default_factory=lambda: {
        "omega_frac": 0.05, "alpha": 0.08, "beta": 0.90})
    noise: str = "normal"                 # normal | nig
    nig_alpha: float = 2.0
    nig_beta: float = -0.6
    start_date: str = "2000-01-03"
    seed: int = 0

    def __post_init__(self):
        if self.n_stocks < 1 or self.n_factors < 1 or self.horizon < 1:
            raise ParameterError("counts must be >= 1")
        if self.factor_process not in ("gaussian", "garch"):
            raise ParameterError(f"unknown factor process {self.factor_process!r}")
        if self.idio_process not in ("constant", "garch", "factor_lagged"):
            raise ParameterError(f"unknown idio process {self.idio_process!r}")
        if self.noise not in ("normal", "nig"):
            raise ParameterError(f"unknown noise {self.noise!r}")


def _standardized_nig(alpha, beta):
    """NIG parameters with zero mean and unit variance at given shape/skew."""
    gamma = np.sqrt(alpha**2 - beta**2)
    delta = gamma**3 / alpha**2            # variance delta*alpha^2/gamma^3 = 1
    mu = -delta * beta / gamma             # mean mu + delta*beta/gamma = 0
    return NIGParams(mu, delta, alpha, beta)


class SynthTruth:
    """Exact conditional densities of the synthetic generator."""

    def __init__(self, config, betas, factor_sig2, idio_sig, factors):
        self.config = config
        self.betas = betas              # (N, d)
        self.factor_sig2 = factor_sig2  # (T, d) conditional factor variances
        self.idio_sig = idio_sig        # (T, N)
        self.factors = factors          # (T, d)
        self._nig = None
        if config.noise == "nig":
            self._nig = _standardized_nig(config.nig_alpha, config.nig_beta)

    def conditional_logpdf(self, i, t, r) -> float:
        """log p(r_{i,t} | F_t, history): the teacher-forced density."""
        mu = self.betas[i] @ self.factors[t]
        sig = self.idio_sig[t, i]
        e = (r - mu) / sig
        if self._nig is None:
            return float(-0.5 * np.log(2 * np.pi) - np.log(sig) - 0.5 * e**2)
        return float(nig_logpdf(e, self._nig) - np.log(sig))

    def factor_moments(self, t):
        """Mean and covariance of F_t given its own history."""
        return np.zeros(self.config.n_factors), np.diag(self.factor_sig2[t])

    def marginal_ind_logpdf(self, i, t, r) -> float:
        """log p(r_{i,t} | history) with the factor integrated out (Gaussian)."""
        if self._nig is not None:
            raise ParameterError(
                "closed-form marginal requires Gaussian noise")
        _, cov = self.factor_moments(t)
        b = self.betas[i]
        var = b @ cov @ b + self.idio_sig[t, i] ** 2
        mu = 0.0
        return float(-0.5 * np.log(2 * np.pi * var) - 0.5 * (r - mu)**2 / var)

    def joint_day_logpdf(self, r_vec, t, stock_idx=None) -> float:
        """Closed-form joint density of a day's return vector (Gaussian)."""
        if self._nig is not None:
            raise ParameterError("closed-form joint requires Gaussian noise")
        idx = np.arange(self.config.n_stocks) if stock_idx is None else stock_idx
        b = self.betas[idx]
        _, cov = self.factor_moments(t)
        joint_cov = b @ cov @ b.T + np.diag(self.idio_sig[t, idx] ** 2)
        from .distributions import MVNParams, mvn_logpdf

        return float(mvn_logpdf(np.asarray(r_vec, dtype=float),
                                MVNParams(np.zeros(len(idx)), joint_cov)))

    def implied_correlations(self, t, stock_idx=None):
        idx = np.arange(self.config.n_stocks) if stock_idx is None else stock_idx
        b = self.betas[idx]
        _, cov = self.factor_moments(t)
        joint = b @ cov @ b.T + np.diag(self.idio_sig[t, idx] ** 2)
        std = np.sqrt(np.diag(joint))
        return joint / np.outer(std, std)


def synth_generate(config: SynthConfig):
    """Generate (ReturnPanel, FactorHistory, SynthTruth); fixed-seed exact."""
    rng = np.random.default_rng(config.seed)
    t_len, n, d = config.horizon, config.n_stocks, config.n_factors

    # factors with their true conditional variances
    factor_sig2 = np.full((t_len, d), config.factor_vol**2)
    factors = np.empty((t_len, d))
    if config.factor_process == "gaussian":
        factors = rng.standard_normal((t_len, d)) * config.factor_vol
    else:
        g = config.factor_garch
        uncond = config.factor_vol**2
        omega = g["omega_frac"] * uncond
        persistence = g["alpha"] + g["beta"]
        omega = uncond * (1.0 - persistence)  # pin unconditional variance
        for j in range(d):
            sig2 = uncond
            for t in range(t_len):
                factor_sig2[t, j] = sig2
                eps = np.sqrt(sig2) * rng.standard_normal()
                factors[t, j] = eps
                sig2 = omega + g["alpha"] * eps**2 + g["beta"] * sig2

    betas = rng.uniform(config.loading_low, config.loading_high, size=(n, d))

    idio_sig = np.full((t_len, n), config.idio_vol)
    if config.idio_process == "garch":
        g = config.idio_garch
        uncond = config.idio_vol**2
        omega = uncond * (1.0 - g["alpha"] - g["beta"])
        for i in range(n):
            sig2 = uncond
            noise = rng.standard_normal(t_len)
            for t in range(t_len):
                idio_sig[t, i] = np.sqrt(sig2)
                eps = idio_sig[t, i] * noise[t]
                sig2 = omega + g["alpha"] * eps**2 + g["beta"] * sig2
    elif config.idio_process == "factor_lagged":
        lagged = np.abs(np.concatenate([[0.0], factors[:-1, -1]]))
        scale = 0.5 + lagged / max(config.factor_vol, 1e-12)
        idio_sig = config.idio_vol * np.tile(scale[:, None], (1, n))

    if config.noise == "normal":
        eps = rng.standard_normal((t_len, n))
    else:
        from .distributions import nig_sample

        p = _standardized_nig(config.nig_alpha, config.nig_beta)
        eps = nig_sample(p, t_len * n, seed=rng.integers(2**31)
                         ).reshape(t_len, n)
    returns = factors @ betas.T + idio_sig * eps

    dates = [d.strftime("%Y-%m-%d")
             for d in pd.bdate_range(config.start_date, periods=t_len)]
    tickers = [f"S{i:03d}" for i in range(n)]
    panel = ReturnPanel(dates=dates, tickers=tickers, returns=returns,
                        mask=np.ones((t_len, n), dtype=bool))
    history = FactorHistory(dates=dates,
                            factor_ids=[f"F{j}" for j in range(d)],
                            values=factors)
    truth = SynthTruth(config, betas, factor_sig2, idio_sig, factors)
    return panel, history, truth


def write_market_csvs(outdir, panel: ReturnPanel, history: FactorHistory):
    """Emit returns.csv, universe.csv and factors.csv under outdir."""
    import os

    rows = np.argwhere(panel.mask)
    returns = pd.DataFrame({
        "date": [panel.dates[t] for t, _ in rows],
        "ticker": [panel.tickers[i] for _, i in rows],
        "return": [panel.returns[t, i] for t, i in rows],
    })
    returns.to_csv(os.path.join(outdir, "returns.csv"), index=False)
    returns[["date", "ticker"]].to_csv(
        os.path.join(outdir, "universe.csv"), index=False)
    t_len, d = history.values.shape
    factors = pd.DataFrame({
        "date": np.repeat(history.dates, d),
        "factor_id": np.tile(history.factor_ids, t_len),
        "value": history.values.reshape(-1),
    })
    factors.to_csv(os.path.join(outdir, "factors.csv"), index=False)
