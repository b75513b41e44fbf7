"""Classical baselines: GARCH(1,1)/GJR-GARCH and the linear factor model.

GARCH variance recursion (leverage term active only for the GJR variant):

    sig2_t = omega + alpha * eps_{t-1}^2 + gamma_lev * eps_{t-1}^2 * 1[eps_{t-1} < 0]
             + beta * sig2_{t-1}

with eps_t = x_t - mu and sig2_0 set to the sample variance.  Fitting is
maximum likelihood over a reparameterized unconstrained space (stationarity
alpha + beta + gamma_lev/2 < 1 enforced by construction) with multiple
random restarts, since the likelihood surface is multimodal.

Noise distributions are standardized to zero mean and unit variance:
normal, generalized error (GED; shape 2 recovers the normal exactly), and
Hansen's skew Student-t.

The classical factor model is per-security OLS of returns on the PCA
factors, with the factor distribution given by the EMA multivariate
Gaussian; its joint density has the closed form N(a + B mu, B Sigma B^T + D).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special, stats
from scipy.signal import lfilter

from .distributions import MVNParams, mvn_logpdf
from .exceptions import DataError, NumericalError, ParameterError
from .factors import EMAState

__all__ = [
    "GarchParams",
    "garch_fit",
    "garch_filter",
    "garch_logpdf",
    "garch_cdf",
    "garch_nll",
    "garch_simulate",
    "noise_logpdf",
    "noise_cdf",
    "LinearFactorModel",
    "classical_factor_fit",
]

NOISES = ("normal", "ged", "skewt")


@dataclass
class GarchParams:
    omega: float
    alpha: float
    beta: float
    gamma_lev: float = 0.0
    mu: float = 0.0
    noise: str = "normal"
    noise_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.omega <= 0:
            raise ParameterError(f"omega must be > 0, got {self.omega}")
        if self.alpha < 0 or self.beta < 0 or self.gamma_lev < 0:
            raise ParameterError("alpha, beta, gamma_lev must be >= 0")
        if self.persistence >= 1.0:
            raise ParameterError(
                f"alpha + beta + gamma_lev/2 must be < 1 for stationarity, "
                f"got {self.persistence}"
            )
        if self.noise not in NOISES:
            raise ParameterError(f"unknown noise {self.noise!r}")
        if self.noise == "ged" and self.noise_params.get("shape", 2.0) <= 0.3:
            raise ParameterError("GED shape must exceed 0.3")
        if self.noise == "skewt":
            if self.noise_params.get("df", 8.0) <= 2.0:
                raise ParameterError("skew-t df must exceed 2")
            if abs(self.noise_params.get("skew", 0.0)) >= 1.0:
                raise ParameterError("skew-t skew must lie in (-1, 1)")

    @property
    def persistence(self) -> float:
        return self.alpha + self.beta + self.gamma_lev / 2.0

    @property
    def stationary_variance(self) -> float:
        return self.omega / (1.0 - self.persistence)


# ---------------------------------------------------------------------------
# standardized noise families


def _ged_lambda(shape):
    return np.sqrt(2.0 ** (-2.0 / shape) * special.gamma(1.0 / shape)
                   / special.gamma(3.0 / shape))


def _hansen_constants(df, skew):
    c = special.gamma((df + 1) / 2.0) / (
        np.sqrt(np.pi * (df - 2.0)) * special.gamma(df / 2.0)
    )
    a = 4.0 * skew * c * (df - 2.0) / (df - 1.0)
    b = np.sqrt(1.0 + 3.0 * skew**2 - a**2)
    return a, b, c


def noise_logpdf(e, noise, noise_params):
    """Log-density of the standardized innovation family."""
    e = np.asarray(e, dtype=float)
    if noise == "normal":
        return -0.5 * np.log(2 * np.pi) - 0.5 * e**2
    if noise == "ged":
        shape = noise_params["shape"]
        lam = _ged_lambda(shape)
        return (np.log(shape) - np.log(lam) - (1.0 + 1.0 / shape) * np.log(2.0)
                - special.gammaln(1.0 / shape) - 0.5 * np.abs(e / lam) ** shape)
    if noise == "skewt":
        df, skew = noise_params["df"], noise_params["skew"]
        a, b, c = _hansen_constants(df, skew)
        w = b * e + a
        denom = np.where(e < -a / b, 1.0 - skew, 1.0 + skew)
        s = w / denom
        return (np.log(b) + np.log(c)
                - 0.5 * (df + 1.0) * np.log1p(s**2 / (df - 2.0)))
    raise ParameterError(f"unknown noise {noise!r}")


def noise_cdf(e, noise, noise_params):
    """CDF of the standardized innovation family."""
    e = np.asarray(e, dtype=float)
    if noise == "normal":
        return stats.norm.cdf(e)
    if noise == "ged":
        shape = noise_params["shape"]
        lam = _ged_lambda(shape)
        tail = special.gammainc(1.0 / shape, 0.5 * np.abs(e / lam) ** shape)
        return 0.5 + 0.5 * np.sign(e) * tail
    if noise == "skewt":
        df, skew = noise_params["df"], noise_params["skew"]
        a, b, c = _hansen_constants(df, skew)
        scale = np.sqrt(df / (df - 2.0))
        w = b * e + a
        left = (1.0 - skew) * stats.t.cdf(scale * w / (1.0 - skew), df)
        right = (1.0 - skew) / 2.0 + (1.0 + skew) * (
            stats.t.cdf(scale * w / (1.0 + skew), df) - 0.5
        )
        return np.where(e < -a / b, left, right)
    raise ParameterError(f"unknown noise {noise!r}")


def noise_sample(count, noise, noise_params, rng):
    if noise == "normal":
        return rng.standard_normal(count)
    if noise == "ged":
        shape = noise_params["shape"]
        lam = _ged_lambda(shape)
        g = rng.gamma(1.0 / shape, 1.0, size=count)
        return np.where(rng.random(count) < 0.5, -1.0, 1.0) * lam * (
            2.0 * g
        ) ** (1.0 / shape)
    if noise == "skewt":
        df, skew = noise_params["df"], noise_params["skew"]
        a, b, _ = _hansen_constants(df, skew)
        scale = np.sqrt(df / (df - 2.0))
        u = rng.random(count)
        lo = u < (1.0 - skew) / 2.0
        z = np.empty(count)
        z[lo] = ((1.0 - skew) * stats.t.ppf(u[lo] / (1.0 - skew), df) / scale
                 - a) / b
        hi = ~lo
        z[hi] = ((1.0 + skew) * stats.t.ppf(
            (u[hi] - (1.0 - skew) / 2.0) / (1.0 + skew) + 0.5, df)
            / scale - a) / b
        return z
    raise ParameterError(f"unknown noise {noise!r}")


# ---------------------------------------------------------------------------
# GARCH filter, likelihood, fitting


def garch_filter(params: GarchParams, series) -> np.ndarray:
    """Conditional variances sig2_0..sig2_{T-1}; sig2_0 is the sample variance."""
    x = np.asarray(series, dtype=float)
    eps = x - params.mu
    sig2_0 = float(np.var(x, ddof=1))
    if len(x) < 2:
        raise DataError("series too short for the GARCH filter")
    lag2 = eps[:-1] ** 2
    drive = params.omega + params.alpha * lag2 \
        + params.gamma_lev * lag2 * (eps[:-1] < 0.0)
    tail, _ = lfilter([1.0], [1.0, -params.beta], drive,
                      zi=np.asarray([params.beta * sig2_0]))
    return np.concatenate([[sig2_0], tail])


def garch_logpdf(params: GarchParams, series, t) -> float:
    """One-step-ahead conditional log-density of series[t] given the past."""
    x = np.asarray(series, dtype=float)
    if not 1 <= t < len(x):
        raise ParameterError(f"t must be in [1, {len(x)}), got {t}")
    sig = np.sqrt(garch_filter(params, x)[t])
    e = (x[t] - params.mu) / sig
    return float(noise_logpdf(e, params.noise, params.noise_params)
                 - np.log(sig))


def garch_cdf(params: GarchParams, series, t) -> float:
    x = np.asarray(series, dtype=float)
    if not 1 <= t < len(x):
        raise ParameterError(f"t must be in [1, {len(x)}), got {t}")
    sig = np.sqrt(garch_filter(params, x)[t])
    return float(noise_cdf((x[t] - params.mu) / sig, params.noise,
                           params.noise_params))


def garch_nll(params: GarchParams, series, start=1, stop=None) -> float:
    """Mean conditional NLL of series[start:stop]."""
    x = np.asarray(series, dtype=float)
    stop = len(x) if stop is None else stop
    sig2 = garch_filter(params, x)[start:stop]
    sig = np.sqrt(sig2)
    e = (x[start:stop] - params.mu) / sig
    ll = noise_logpdf(e, params.noise, params.noise_params) - np.log(sig)
    return float(-np.mean(ll))


def garch_simulate(params: GarchParams, t_len, seed=None, burn=500):
    """Simulate a GARCH path (with burn-in) for recovery tests and synthetics."""
    rng = np.random.default_rng(seed)
    z = noise_sample(t_len + burn, params.noise, params.noise_params, rng)
    x = np.empty(t_len + burn)
    sig2 = params.stationary_variance
    for t in range(t_len + burn):
        eps = np.sqrt(sig2) * z[t]
        x[t] = params.mu + eps
        sig2 = params.omega + params.alpha * eps**2 \
            + params.gamma_lev * eps**2 * (eps < 0.0) + params.beta * sig2
    return x[burn:]


class _GarchParameterization:
    """Unconstrained vector <-> GarchParams with stationarity built in."""

    def __init__(self, variant, noise, var_scale):
        if variant not in ("garch", "gjr"):
            raise ParameterError(f"unknown variant {variant!r}")
        self.variant = variant
        self.noise = noise
        self.var_scale = var_scale
        self.n_split = 2 if variant == "gjr" else 1
        self.n_noise = {"normal": 0, "ged": 1, "skewt": 2}[noise]
        self.size = 3 + self.n_split + self.n_noise

    def unpack(self, raw) -> GarchParams:
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        mu = raw[0] * np.sqrt(self.var_scale)
        omega = np.exp(raw[1]) * self.var_scale
        persistence = sig(raw[2]) * (1.0 - 1e-6)
        if self.variant == "garch":
            frac = sig(raw[3])
            alpha = persistence * frac
            beta = persistence * (1.0 - frac)
            gamma_lev = 0.0
            k = 4
        else:
            logits = np.concatenate([raw[3:5], [0.0]])
            fracs = np.exp(logits - logits.max())
            fracs /= fracs.sum()
            alpha = persistence * fracs[0]
            gamma_lev = 2.0 * persistence * fracs[1]
            beta = persistence * fracs[2]
            k = 5
        noise_params = {}
        if self.noise == "ged":
            noise_params["shape"] = 0.31 + np.exp(raw[k])
        elif self.noise == "skewt":
            noise_params["df"] = 2.05 + np.exp(raw[k])
            noise_params["skew"] = float(np.tanh(raw[k + 1]))
        return GarchParams(omega=omega, alpha=alpha, beta=beta,
                           gamma_lev=gamma_lev, mu=mu, noise=self.noise,
                           noise_params=noise_params)

    def default_raw(self):
        raw = np.zeros(self.size)
        raw[1] = np.log(0.05)      # omega ~ 5% of sample variance
        raw[2] = 2.2               # persistence ~ 0.9
        raw[3] = -2.0 if self.variant == "garch" else -1.0
        if self.variant == "gjr":
            raw[4] = -1.0
        if self.noise == "ged":
            raw[-1] = np.log(2.0 - 0.31)
        elif self.noise == "skewt":
            raw[-2] = np.log(8.0 - 2.05)
        return raw


def garch_fit(series, variant="garch", noise="normal", n_restarts=10,
              seed=0, max_iter=300) -> GarchParams:
    """Quasi-Newton MLE with random restarts.

    Raises NumericalError if every start fails; otherwise returns the best
    optimum found (never worse than the default initialization).
    """
    x = np.asarray(series, dtype=float)
    if len(x) < 250:
        raise DataError(f"need at least 250 observations, got {len(x)}")
    par = _GarchParameterization(variant, noise, float(np.var(x, ddof=1)))

    def objective(raw):
        try:
            params = par.unpack(raw)
            val = garch_nll(params, x)
        except (ParameterError, FloatingPointError):
            return 1e12
        return val if np.isfinite(val) else 1e12

    rng = np.random.default_rng(seed)
    starts = [par.default_raw()]
    for _ in range(n_restarts - 1):
        starts.append(par.default_raw() + rng.standard_normal(par.size))
    best_raw, best_val = None, np.inf
    for raw0 in starts:
        res = optimize.minimize(objective, raw0, method="L-BFGS-B",
                                options={"maxiter": max_iter})
        if res.fun < best_val and np.isfinite(res.fun):
            best_raw, best_val = res.x, res.fun
    if best_raw is None:
        raise NumericalError("GARCH optimization failed from every start")
    return par.unpack(best_raw)


# ---------------------------------------------------------------------------
# classical factor model


@dataclass
class LinearFactorModel:
    tickers: list
    intercepts: np.ndarray    # (N,)
    loadings: np.ndarray      # (N, d)
    resid_std: np.ndarray     # (N,)
    ridge_flagged: list = field(default_factory=list)

    def conditional_logpdf(self, r, f_next, ticker_idx):
        mu = self.intercepts[ticker_idx] + self.loadings[ticker_idx] @ f_next
        s = self.resid_std[ticker_idx]
        return -0.5 * np.log(2 * np.pi) - np.log(s) - 0.5 * ((r - mu) / s) ** 2

    def joint_logpdf(self, r, state: EMAState, ticker_idx=None) -> float:
        """Closed-form log N(r; a + B mu, B Sigma B^T + D) for one day."""
        idx = np.arange(len(self.tickers)) if ticker_idx is None else ticker_idx
        b = self.loadings[idx]
        a = self.intercepts[idx]
        d = np.diag(self.resid_std[idx] ** 2)
        mean = a + b @ state.mean
        cov = b @ state.cov @ b.T + d
        return float(mvn_logpdf(np.asarray(r, dtype=float),
                                MVNParams(mean, cov)))

    def marginal_logpdf(self, r, state: EMAState, ticker_idx) -> float:
        b = self.loadings[ticker_idx]
        mu = self.intercepts[ticker_idx] + b @ state.mean
        var = b @ state.cov @ b + self.resid_std[ticker_idx] ** 2
        return float(-0.5 * np.log(2 * np.pi * var)
                     - 0.5 * (r - mu) ** 2 / var)

    def sample(self, state: EMAState, count, seed=None, ticker_idx=None):
        idx = np.arange(len(self.tickers)) if ticker_idx is None else ticker_idx
        rng = np.random.default_rng(seed)
        chol = np.linalg.cholesky(state.cov)
        f = rng.standard_normal((count, state.mean.size)) @ chol.T + state.mean
        eps = rng.standard_normal((count, len(idx))) * self.resid_std[idx]
        return self.intercepts[idx] + f @ self.loadings[idx].T + eps

    def conditional_sample(self, f_next, count, seed=None, ticker_idx=None):
        idx = np.arange(len(self.tickers)) if ticker_idx is None else ticker_idx
        rng = np.random.default_rng(seed)
        mu = self.intercepts[idx] + self.loadings[idx] @ np.asarray(f_next)
        eps = rng.standard_normal((count, len(idx))) * self.resid_std[idx]
        return mu + eps


def classical_factor_fit(returns, mask, f_pca, tickers, min_obs=60,
                         ridge=1e-6) -> LinearFactorModel:
    """Per-security OLS of returns on the PCA factors.

    Securities need at least ``min_obs`` aligned observations.  Rank-deficient
    designs fall back to ridge (lambda=1e-6) and are flagged.
    """
    r = np.asarray(returns, dtype=float)
    m = np.asarray(mask, dtype=bool)
    f = np.asarray(f_pca, dtype=float)
    t_len, n = r.shape
    d = f.shape[1]
    intercepts = np.zeros(n)
    loadings = np.zeros((n, d))
    resid_std = np.zeros(n)
    flagged = []
    for i in range(n):
        rows = m[:, i] & np.isfinite(r[:, i])
        if rows.sum() < min_obs:
            raise DataError(
                f"security {tickers[i]!r} has {int(rows.sum())} aligned "
                f"observations, need {min_obs}"
            )
        design = np.column_stack([np.ones(rows.sum()), f[rows]])
        target = r[rows, i]
        gram = design.T @ design
        if np.linalg.matrix_rank(gram) < gram.shape[0]:
            gram = gram + ridge * np.eye(gram.shape[0])
            flagged.append(tickers[i])
        coef = np.linalg.solve(gram, design.T @ target)
        resid = target - design @ coef
        dof = max(rows.sum() - (d + 1), 1)
        intercepts[i] = coef[0]
        loadings[i] = coef[1:]
        resid_std[i] = max(np.sqrt(resid @ resid / dof), 1e-12)
    return LinearFactorModel(tickers=list(tickers), intercepts=intercepts,
                             loadings=loadings, resid_std=resid_std,
                             ridge_flagged=flagged)
