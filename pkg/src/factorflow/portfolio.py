"""Sharpe-maximizing portfolio construction from model samples.

The long and short books are separate softmax-parameterized simplex vectors,
optimized by Adam ascent on the sample-moment Sharpe objective

    (w_L . mu - w_S . mu - w_S . b) / sqrt((w_L - w_S)' Sigma (w_L - w_S))

with borrow cost b on the short side only (zero for the plain variant) and a
variance floor under the square root.  Long-only drops the short book.
Softmax guarantees the simplex invariants exactly; convergence is declared
when the best objective has not improved by more than 1e-8 for 100
consecutive steps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .exceptions import DataError, ParameterError
from .nn import DTYPE, adam_step

__all__ = [
    "PortfolioWeights",
    "OptimizerConfig",
    "optimize_long_short",
    "optimize_with_borrow",
    "optimize_long_only",
    "vol_match_leverage",
    "backtest",
    "BacktestResult",
    "sharpe_of_weights",
]

_VAR_FLOOR = 1e-12
_RIDGE = 1e-8


@dataclass
class OptimizerConfig:
    lr: float = 0.05
    max_steps: int = 5000
    converge_tol: float = 1e-8
    converge_steps: int = 100
    seed: int = 0


@dataclass
class PortfolioWeights:
    long_weights: np.ndarray
    short_weights: np.ndarray | None
    sharpe: float
    converged: bool

    def __post_init__(self):
        for w in (self.long_weights, self.short_weights):
            if w is None:
                continue
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
                raise ParameterError("weights must be a simplex vector")


def _sample_moments(samples):
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2:
        raise DataError(f"samples must be (paths, assets), got {samples.shape}")
    if samples.shape[0] < 2:
        raise DataError("need at least two sample paths")
    mu = samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    cov = cov + _RIDGE * np.eye(cov.shape[0])
    return mu, cov


def sharpe_of_weights(samples, long_weights, short_weights=None, borrow=None):
    """Sample-moment Sharpe of fixed books (for post-hoc cost evaluation)."""
    mu, cov = _sample_moments(samples)
    w_l = np.asarray(long_weights, dtype=float)
    w_s = np.zeros_like(w_l) if short_weights is None else np.asarray(
        short_weights, dtype=float)
    net = w_l - w_s
    cost = 0.0 if borrow is None else float(np.dot(w_s, borrow))
    return float((net @ mu - cost) / np.sqrt(net @ cov @ net + _VAR_FLOOR))


def _ascend(objective_fn, logits, config: OptimizerConfig):
    """Adam ascent with monotone best tracking; returns (best_logits, best)."""
    state = {}
    best_val = -np.inf
    best = {k: v.detach().clone() for k, v in logits.items()}
    flat_since = 0
    converged = False
    for _ in range(config.max_steps):
        obj = objective_fn(logits)
        grads = torch.autograd.grad(-obj, list(logits.values()))
        val = float(obj.detach())
        if val > best_val + config.converge_tol:
            best_val = val
            best = {k: v.detach().clone() for k, v in logits.items()}
            flat_since = 0
        else:
            flat_since += 1
            if flat_since >= config.converge_steps:
                converged = True
                break
        adam_step(logits, dict(zip(logits.keys(), grads)), lr=config.lr,
                  weight_decay=0.0, state=state)
    if not converged:
        warnings.warn("portfolio optimizer hit max_steps before converging; "
                      "returning best iterate")
    return best, best_val, converged


def _long_short_objective(mu_t, cov_t, borrow_t):
    def objective(logits):
        w_l = torch.softmax(logits["long"], dim=0)
        w_s = torch.softmax(logits["short"], dim=0)
        net = w_l - w_s
        gain = net @ mu_t - w_s @ borrow_t
        var = net @ cov_t @ net
        return gain / torch.sqrt(var + _VAR_FLOOR)
    return objective


def optimize_with_borrow(samples, borrow_vec, config=None) -> PortfolioWeights:
    """Long-short Sharpe optimum with borrow cost charged to the short book.

    The short logits start tilted toward the lowest-mean assets, which
    breaks the w_L = w_S degeneracy of the raw objective.
    """
    config = config or OptimizerConfig()
    mu, cov = _sample_moments(samples)
    n = mu.size
    borrow = np.broadcast_to(np.asarray(borrow_vec, dtype=float), (n,)).copy()
    mu_t = torch.as_tensor(mu, dtype=DTYPE)
    cov_t = torch.as_tensor(cov, dtype=DTYPE)
    borrow_t = torch.as_tensor(borrow, dtype=DTYPE)
    spread = mu.std() + 1e-12
    short_init = -2.0 * (mu - mu.mean()) / spread
    logits = {
        "long": torch.zeros(n, dtype=DTYPE, requires_grad=True),
        "short": torch.as_tensor(short_init, dtype=DTYPE).requires_grad_(True),
    }
    best, best_val, converged = _ascend(
        _long_short_objective(mu_t, cov_t, borrow_t), logits, config)
    w_l = torch.softmax(best["long"], dim=0).numpy()
    w_s = torch.softmax(best["short"], dim=0).numpy()
    return PortfolioWeights(long_weights=w_l, short_weights=w_s,
                            sharpe=best_val, converged=converged)


def optimize_long_short(samples, config=None) -> PortfolioWeights:
    """Long-short Sharpe optimum without costs."""
    n = np.asarray(samples).shape[1]
    return optimize_with_borrow(samples, np.zeros(n), config=config)


def optimize_long_only(samples, config=None) -> PortfolioWeights:
    """Long-only Sharpe optimum (equal weight is in the feasible set).

    If every expected return is nonpositive the Sharpe objective has no
    useful ascent direction; a warning is issued and the minimum-variance
    direction is returned instead.
    """
    config = config or OptimizerConfig()
    mu, cov = _sample_moments(samples)
    n = mu.size
    mu_t = torch.as_tensor(mu, dtype=DTYPE)
    cov_t = torch.as_tensor(cov, dtype=DTYPE)
    fallback = bool((mu <= 0).all())
    if fallback:
        warnings.warn("all expected returns <= 0; returning the "
                      "minimum-variance direction")

    def objective(logits):
        w = torch.softmax(logits["long"], dim=0)
        if fallback:
            return -(w @ cov_t @ w)
        return (w @ mu_t) / torch.sqrt(w @ cov_t @ w + _VAR_FLOOR)

    logits = {"long": torch.zeros(n, dtype=DTYPE, requires_grad=True)}
    best, best_val, converged = _ascend(objective, logits, config)
    w_l = torch.softmax(best["long"], dim=0).numpy()
    sharpe = sharpe_of_weights(samples, w_l)
    return PortfolioWeights(long_weights=w_l, short_weights=None,
                            sharpe=sharpe, converged=converged)


def vol_match_leverage(strategy_returns, benchmark_returns) -> float:
    """Scale factor std(benchmark)/std(strategy) for volatility matching."""
    s = np.asarray(strategy_returns, dtype=float)
    b = np.asarray(benchmark_returns, dtype=float)
    if len(s) < 20 or len(b) < 20:
        raise DataError("need at least 20 observations in both series")
    s_std = s.std(ddof=1)
    if s_std < 1e-15:
        raise DataError("strategy volatility is zero; cannot lever")
    return float(b.std(ddof=1) / s_std)


@dataclass
class BacktestResult:
    dates: list
    returns: np.ndarray
    equity_curve: np.ndarray
    sharpe: float
    max_drawdown: float
    note: str = ""


def backtest(daily_weights, panel, borrow=None) -> BacktestResult:
    """Apply dated weights to the next day's realized returns.

    ``daily_weights`` maps a decision date to PortfolioWeights over the full
    panel ticker list; the weights dated d earn the returns of the next panel
    date after d.  A decision date missing from the panel, or with no
    following date, is a misalignment error (the no-lookahead guard).
    """
    date_index = {d: i for i, d in enumerate(panel.dates)}
    rows = []
    for date in sorted(daily_weights):
        if date not in date_index:
            raise DataError(f"weight date {date!r} not a panel date")
        t = date_index[date]
        if t + 1 >= len(panel.dates):
            raise DataError(f"no realized returns after weight date {date!r}")
        w = daily_weights[date]
        w_l = np.asarray(w.long_weights, dtype=float)
        w_s = None if w.short_weights is None else np.asarray(w.short_weights,
                                                              dtype=float)
        if w_l.size != len(panel.tickers):
            raise DataError("weights must cover the panel ticker list")
        realized = panel.returns[t + 1]
        active = w_l > 1e-12
        if w_s is not None:
            active |= w_s > 1e-12
        if not panel.mask[t + 1][active].all():
            missing = [tk for tk, a, m in zip(panel.tickers, active,
                                              panel.mask[t + 1]) if a and not m]
            raise DataError(
                f"weighted tickers {missing} have no realized return on "
                f"{panel.dates[t + 1]}"
            )
        ret = float(np.nansum(w_l * realized))
        if w_s is not None:
            ret -= float(np.nansum(w_s * realized))
            if borrow is not None:
                ret -= float(np.dot(w_s, np.broadcast_to(borrow, w_s.shape)))
        rows.append((panel.dates[t + 1], ret))
    if not rows:
        raise DataError("no weights supplied")
    dates = [d for d, _ in rows]
    rets = np.asarray([r for _, r in rows])
    curve = np.cumprod(1.0 + rets)
    peak = np.maximum.accumulate(curve)
    max_dd = float(np.max(1.0 - curve / peak))
    if rets.std(ddof=1) < 1e-15:
        return BacktestResult(dates, rets, curve, float("nan"), max_dd,
                              note="zero-variance strategy; Sharpe undefined")
    sharpe = float(rets.mean() / rets.std(ddof=1) * np.sqrt(252.0))
    return BacktestResult(dates, rets, curve, sharpe, max_dd)
