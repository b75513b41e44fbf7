"""Factor preprocessing pipeline.

PCA reduction of raw factor returns, learned exponential-moving-average
mean/covariance with shrinkage, the whitening transform used to condition the
factor generative model (with its change-of-variables correction), and the
EMA multivariate-Gaussian baseline.

The EMA layer carries, per component, a decay, a shrinkage factor and a
shrink target for the mean and again for the variance, plus a single decay,
shrinkage factor and target matrix for the correlation.  The shrunk estimate
on each day is ``(1 - s) * ema + s * target``; the covariance is assembled
from the shrunk variances and the shrunk correlation matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.signal import lfilter

from .distributions import MVNParams, mvn_logpdf
from .exceptions import DataError, NumericalError, ParameterError

JITTER = 1e-8
_VAR_FLOOR = 1e-300

__all__ = [
    "PCAModel",
    "EMAParams",
    "EMAState",
    "EMARecursion",
    "pca_fit",
    "ema_scan",
    "ema_scan_full",
    "ema_fit",
    "whiten",
    "unwhiten",
    "ema_gaussian_logpdf",
    "global_moments",
]


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PCAModel:
    mean: np.ndarray                      # (d_raw,)
    components: np.ndarray                # (k, d_raw), orthonormal rows
    explained_variance_ratio: np.ndarray  # (k,), nonincreasing

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x - self.mean) @ self.components.T

    def inverse(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        return f @ self.components + self.mean

    def to_arrays(self) -> dict:
        return {
            "mean": self.mean,
            "components": self.components,
            "explained_variance_ratio": self.explained_variance_ratio,
        }

    @classmethod
    def from_arrays(cls, arrays) -> "PCAModel":
        return cls(
            mean=np.asarray(arrays["mean"], dtype=float),
            components=np.asarray(arrays["components"], dtype=float),
            explained_variance_ratio=np.asarray(
                arrays["explained_variance_ratio"], dtype=float
            ),
        )


def pca_fit(train_matrix, target_explained_variance: float) -> PCAModel:
    """Fit PCA and keep the fewest components reaching the variance target."""
    if not 0.0 < target_explained_variance <= 1.0:
        raise ParameterError(
            f"target explained variance must be in (0,1], got "
            f"{target_explained_variance}"
        )
    x = np.asarray(train_matrix, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError(f"need a (rows >= 2, cols) matrix, got {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    var = svals**2 / (x.shape[0] - 1)
    total = var.sum()
    if total <= 0:
        raise DataError("input has zero variance; PCA undefined")
    ratios = var / total
    cumulative = np.cumsum(ratios)
    k = int(np.searchsorted(cumulative, target_explained_variance - 1e-12) + 1)
    k = min(k, len(ratios))
    # drop numerically-null directions unless needed for the target
    nonnull = int((ratios > 1e-12).sum())
    k = min(k, max(nonnull, 1))
    return PCAModel(mean=mean, components=vt[:k], explained_variance_ratio=ratios[:k])


# ---------------------------------------------------------------------------
# EMA with shrinkage


@dataclass
class EMAParams:
    mean_decay: np.ndarray    # (d,) in (0,1)
    mean_shrink: np.ndarray   # (d,) in [0,1]
    mean_target: np.ndarray   # (d,)
    var_decay: np.ndarray     # (d,) in (0,1)
    var_shrink: np.ndarray    # (d,) in [0,1]
    var_target: np.ndarray    # (d,) > 0
    corr_decay: float
    corr_shrink: float
    corr_target: np.ndarray   # (d,d) correlation matrix

    def __post_init__(self):
        for name in ("mean_decay", "mean_shrink", "mean_target", "var_decay",
                     "var_shrink", "var_target"):
            object.__setattr__(self, name, np.asarray(getattr(self, name),
                                                      dtype=float))
        object.__setattr__(self, "corr_target",
                           np.asarray(self.corr_target, dtype=float))
        d = self.mean_decay.size
        for name in ("mean_decay", "var_decay"):
            v = getattr(self, name)
            if np.any(v <= 0) or np.any(v >= 1):
                raise ParameterError(f"{name} must lie in (0,1)")
        for name in ("mean_shrink", "var_shrink"):
            v = getattr(self, name)
            if np.any(v < 0) or np.any(v > 1):
                raise ParameterError(f"{name} must lie in [0,1]")
        if not 0.0 < self.corr_decay < 1.0:
            raise ParameterError("corr_decay must lie in (0,1)")
        if not 0.0 <= self.corr_shrink <= 1.0:
            raise ParameterError("corr_shrink must lie in [0,1]")
        r = self.corr_target
        if r.shape != (d, d) or not np.allclose(r, r.T, atol=1e-10):
            raise ParameterError("corr_target must be a symmetric (d,d) matrix")
        if not np.allclose(np.diag(r), 1.0, atol=1e-8):
            raise ParameterError("corr_target must have unit diagonal")
        if np.linalg.eigvalsh(r).min() < -1e-8:
            raise ParameterError("corr_target must be positive semidefinite")

    @property
    def dim(self) -> int:
        return self.mean_decay.size

    def to_arrays(self) -> dict:
        return {
            "mean_decay": self.mean_decay, "mean_shrink": self.mean_shrink,
            "mean_target": self.mean_target, "var_decay": self.var_decay,
            "var_shrink": self.var_shrink, "var_target": self.var_target,
            "corr_decay": np.array(self.corr_decay),
            "corr_shrink": np.array(self.corr_shrink),
            "corr_target": self.corr_target,
        }

    @classmethod
    def from_arrays(cls, arrays) -> "EMAParams":
        return cls(
            mean_decay=arrays["mean_decay"], mean_shrink=arrays["mean_shrink"],
            mean_target=arrays["mean_target"], var_decay=arrays["var_decay"],
            var_shrink=arrays["var_shrink"], var_target=arrays["var_target"],
            corr_decay=float(arrays["corr_decay"]),
            corr_shrink=float(arrays["corr_shrink"]),
            corr_target=arrays["corr_target"],
        )

    @classmethod
    def default(cls, train_series) -> "EMAParams":
        """Plain-EMA initialization anchored at the global training moments."""
        mean, cov = global_moments(train_series)
        d = mean.size
        std = np.sqrt(np.diag(cov))
        corr = cov / np.outer(std, std)
        np.fill_diagonal(corr, 1.0)
        return cls(
            mean_decay=np.full(d, 0.97), mean_shrink=np.full(d, 0.05),
            mean_target=mean.copy(), var_decay=np.full(d, 0.94),
            var_shrink=np.full(d, 0.05), var_target=np.diag(cov).copy(),
            corr_decay=0.97, corr_shrink=0.05, corr_target=corr,
        )


@dataclass
class EMAState:
    mean: np.ndarray  # (d,)
    cov: np.ndarray   # (d,d) symmetric PSD

    def to_arrays(self) -> dict:
        return {"mean": self.mean, "cov": self.cov}


def global_moments(series):
    x = np.asarray(series, dtype=float)
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return mean, cov


def _ema_filter(x, decay, init):
    """y_t = decay * y_{t-1} + (1 - decay) * x_t along axis 0."""
    zi = np.asarray([decay * init], dtype=float)
    y, _ = lfilter([1.0 - decay], [1.0, -decay], x, zi=zi)
    return y


def _raw_scan(series, params: EMAParams, init_mean, init_var, init_corr):
    x = np.asarray(series, dtype=float)
    t_len, d = x.shape
    means = np.empty_like(x)
    variances = np.empty_like(x)
    for j in range(d):
        means[:, j] = _ema_filter(x[:, j], params.mean_decay[j], init_mean[j])
        resid_sq = (x[:, j] - means[:, j]) ** 2
        variances[:, j] = _ema_filter(resid_sq, params.var_decay[j], init_var[j])
    std = np.sqrt(np.maximum(variances, _VAR_FLOOR))
    u = (x - means) / std
    prods = u[:, :, None] * u[:, None, :]
    corr_flat = np.empty((t_len, d * d))
    flat_init = init_corr.reshape(-1)
    flat_prods = prods.reshape(t_len, d * d)
    for idx in range(d * d):
        corr_flat[:, idx] = _ema_filter(
            flat_prods[:, idx], params.corr_decay, flat_init[idx]
        )
    return means, variances, corr_flat.reshape(t_len, d, d)


def _assemble(params, means, variances, corrs):
    m = (1.0 - params.mean_shrink) * means + params.mean_shrink * params.mean_target
    v = (1.0 - params.var_shrink) * variances + params.var_shrink * params.var_target
    diag = np.sqrt(np.maximum(np.einsum("tii->ti", corrs), _VAR_FLOOR))
    r = corrs / (diag[:, :, None] * diag[:, None, :])
    r = (1.0 - params.corr_shrink) * r + params.corr_shrink * params.corr_target
    std = np.sqrt(np.maximum(v, 0.0))
    cov = r * (std[:, :, None] * std[:, None, :])
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return m, cov


def _init_raw(init: EMAState):
    var0 = np.diag(init.cov).copy()
    std0 = np.sqrt(np.maximum(var0, _VAR_FLOOR))
    corr0 = init.cov / np.outer(std0, std0)
    np.fill_diagonal(corr0, 1.0)
    return init.mean.copy(), var0, corr0


def ema_scan_full(series, params: EMAParams, init: EMAState | None = None):
    """EMA scan returning both the shrunk states and the raw EMA internals.

    The raw (mean, variance, correlation) arrays let callers continue the
    recursion incrementally from any step via :class:`EMARecursion`.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError(f"series must be (T >= 2, d), got {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("series contains non-finite values")
    if init is None:
        mean0, cov0 = global_moments(x)
        init = EMAState(mean0, cov0)
    mean0, var0, corr0 = _init_raw(init)
    means, variances, corrs = _raw_scan(x, params, mean0, var0, corr0)
    m, cov = _assemble(params, means, variances, corrs)
    states = [EMAState(m[t], cov[t]) for t in range(x.shape[0])]
    return states, means, variances, corrs


def ema_scan(series, params: EMAParams, init: EMAState | None = None):
    """Run the EMA recursion over a series and return per-step states.

    ``states[t]`` is the shrunk (mean, covariance) estimate after observing
    ``series[t]``; it is the conditional Gaussian for day t+1.  The state at
    t=0 is seeded with ``init`` (global training moments when omitted).
    """
    states, _, _, _ = ema_scan_full(series, params, init=init)
    return states


class EMARecursion:
    """Stateful, batched continuation of the EMA recursion.

    Carries the raw EMA internals for ``n_paths`` independent trajectories
    and advances them one observation at a time, reproducing exactly what a
    fresh scan over the extended series would compute.
    """

    def __init__(self, params: EMAParams, raw_mean, raw_var, raw_corr,
                 n_paths=1):
        self.params = params
        raw_mean = np.asarray(raw_mean, dtype=float)
        raw_var = np.asarray(raw_var, dtype=float)
        raw_corr = np.asarray(raw_corr, dtype=float)
        if raw_mean.ndim == 1:
            raw_mean = np.tile(raw_mean, (n_paths, 1))
            raw_var = np.tile(raw_var, (n_paths, 1))
            raw_corr = np.tile(raw_corr, (n_paths, 1, 1))
        self.mean = raw_mean.copy()
        self.var = raw_var.copy()
        self.corr = raw_corr.copy()

    @classmethod
    def from_state(cls, params, state: EMAState, n_paths=1):
        mean0, var0, corr0 = _init_raw(state)
        return cls(params, mean0, var0, corr0, n_paths=n_paths)

    def update(self, x):
        """Advance with observations x (n_paths, d); returns shrunk states.

        Output: (means (n_paths, d), covs (n_paths, d, d)).
        """
        p = self.params
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self.mean = p.mean_decay * self.mean + (1 - p.mean_decay) * x
        resid = x - self.mean
        self.var = p.var_decay * self.var + (1 - p.var_decay) * resid**2
        u = resid / np.sqrt(np.maximum(self.var, _VAR_FLOOR))
        self.corr = p.corr_decay * self.corr + (1 - p.corr_decay) * (
            u[:, :, None] * u[:, None, :]
        )
        return _assemble_batch(p, self.mean, self.var, self.corr)

    def state(self):
        means, covs = _assemble_batch(self.params, self.mean, self.var,
                                      self.corr)
        return means, covs


_assemble_batch = _assemble  # same shrink-and-assemble math, (n, d) leading axis


def _scan_arrays(series, params, init_mean, init_cov):
    var0 = np.diag(init_cov).copy()
    std0 = np.sqrt(np.maximum(var0, _VAR_FLOOR))
    corr0 = init_cov / np.outer(std0, std0)
    np.fill_diagonal(corr0, 1.0)
    means, variances, corrs = _raw_scan(series, params, init_mean, var0, corr0)
    return _assemble(params, means, variances, corrs)


# ---------------------------------------------------------------------------
# EMA parameter fitting


def _batched_gaussian_nll(x, means, covs, jitter=1e-10):
    """Per-row -log N(x_t; means_t, covs_t) with batched Cholesky."""
    d = x.shape[1]
    covs = covs + jitter * np.eye(d)
    try:
        chol = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        return None
    dev = (x - means)[:, :, None]
    z = np.linalg.solve(chol, dev)[:, :, 0]
    maha = np.sum(z**2, axis=1)
    logdet = 2.0 * np.sum(np.log(np.einsum("tii->ti", chol)), axis=1)
    return 0.5 * (d * np.log(2 * np.pi) + logdet + maha)


def _batched_kl_to_global(means, covs, g_mean, g_cov, jitter=1e-10):
    """KL( N(means_t, covs_t) || N(g_mean, g_cov) ) per row."""
    d = means.shape[1]
    g_chol = np.linalg.cholesky(g_cov + jitter * np.eye(d))
    g_inv = np.linalg.inv(g_cov + jitter * np.eye(d))
    g_logdet = 2.0 * np.sum(np.log(np.diag(g_chol)))
    covs_j = covs + jitter * np.eye(d)
    sign, logdets = np.linalg.slogdet(covs_j)
    trace = np.einsum("ij,tji->t", g_inv, covs_j)
    dev = means - g_mean
    maha = np.einsum("ti,ij,tj->t", dev, g_inv, dev)
    return 0.5 * (trace + maha - d + g_logdet - logdets)


class _EMAParameterization:
    """Maps an unconstrained vector to EMAParams via sigmoid/exp/Cholesky."""

    def __init__(self, d, mean_scale, var_scale):
        self.d = d
        self.mean_scale = mean_scale  # scale for the mean-target coordinates
        self.var_scale = var_scale    # log-space center for variance targets
        self.n_params = 6 * d + 2 + d * (d - 1) // 2

    def pack(self, p: EMAParams) -> np.ndarray:
        logit = lambda v: np.log(v / (1.0 - v))
        tril = np.linalg.cholesky(p.corr_target + 1e-10 * np.eye(self.d))
        rows = []
        for i in range(1, self.d):
            rows.extend(tril[i, :i] / max(tril[i, i], 1e-12))
        return np.concatenate([
            logit(np.clip(p.mean_decay, 1e-6, 1 - 1e-6)),
            logit(np.clip(p.mean_shrink, 1e-6, 1 - 1e-6)),
            p.mean_target / self.mean_scale,
            logit(np.clip(p.var_decay, 1e-6, 1 - 1e-6)),
            logit(np.clip(p.var_shrink, 1e-6, 1 - 1e-6)),
            np.log(p.var_target) - self.var_scale,
            [logit(np.clip(p.corr_decay, 1e-6, 1 - 1e-6))],
            [logit(np.clip(p.corr_shrink, 1e-6, 1 - 1e-6))],
            np.asarray(rows, dtype=float),
        ])

    def unpack(self, raw: np.ndarray) -> EMAParams:
        d = self.d
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        i = 0
        mean_decay = sig(raw[i:i + d]); i += d
        mean_shrink = sig(raw[i:i + d]); i += d
        mean_target = raw[i:i + d] * self.mean_scale; i += d
        var_decay = sig(raw[i:i + d]); i += d
        var_shrink = sig(raw[i:i + d]); i += d
        var_target = np.exp(raw[i:i + d] + self.var_scale); i += d
        corr_decay = float(sig(raw[i])); i += 1
        corr_shrink = float(sig(raw[i])); i += 1
        ell = np.eye(d)
        for r in range(1, d):
            ell[r, :r] = raw[i:i + r]
            i += r
        norms = np.linalg.norm(ell, axis=1, keepdims=True)
        ell = ell / norms
        corr_target = ell @ ell.T
        np.fill_diagonal(corr_target, 1.0)
        return EMAParams(
            mean_decay=np.clip(mean_decay, 1e-9, 1 - 1e-9),
            mean_shrink=mean_shrink, mean_target=mean_target,
            var_decay=np.clip(var_decay, 1e-9, 1 - 1e-9),
            var_shrink=var_shrink, var_target=var_target,
            corr_decay=float(np.clip(corr_decay, 1e-9, 1 - 1e-9)),
            corr_shrink=corr_shrink, corr_target=corr_target,
        )


def _predictive_nll(series, params, init_mean, init_cov, kl_weight, g_mean,
                    g_cov, start=0):
    """Mean next-day NLL (+ KL penalty) of series[start:] under the scan."""
    x = np.asarray(series, dtype=float)
    means, covs = _scan_arrays(x, params, init_mean, init_cov)
    # state after day t predicts day t+1; day `start` is predicted by init
    pred_means = np.concatenate([[init_mean], means[:-1]])[start:]
    pred_covs = np.concatenate([[init_cov], covs[:-1]])[start:]
    nll = _batched_gaussian_nll(x[start:], pred_means, pred_covs)
    if nll is None or not np.isfinite(nll).all():
        return None, None
    penalty = 0.0
    if kl_weight > 0:
        kl = _batched_kl_to_global(means[start:], covs[start:], g_mean, g_cov)
        if not np.isfinite(kl).all():
            return None, None
        penalty = kl_weight * float(np.mean(kl))
    return float(np.mean(nll)), penalty


def ema_fit(train_series, val_series, kl_weight_grid=(0.0, 0.01, 0.1),
            max_iter=200) -> EMAParams:
    """Optimize EMA parameters by penalized maximum likelihood.

    Minimizes the mean next-day Gaussian NLL of the training series plus a
    KL(state || global-Gaussian) penalty; the penalty weight is chosen from
    ``kl_weight_grid`` by validation NLL.  Decays and shrink factors move
    through sigmoid reparameterizations, variance targets through log-space,
    and the correlation shrink target through a normalized Cholesky factor,
    so the search is unconstrained.

    The returned parameters never validate worse than the plain-EMA
    initialization.
    """
    train = np.asarray(train_series, dtype=float)
    val = np.asarray(val_series, dtype=float)
    if train.ndim != 2 or train.shape[0] < 10:
        raise DataError(f"train series too short: {train.shape}")
    g_mean, g_cov = global_moments(train)
    init_params = EMAParams.default(train)
    par = _EMAParameterization(
        train.shape[1],
        mean_scale=max(float(np.abs(g_mean).max()), 1e-4),
        var_scale=np.log(np.diag(g_cov)).mean(),
    )

    def val_nll_of(params):
        joint = np.concatenate([train, val], axis=0)
        nll, _ = _predictive_nll(joint, params, g_mean, g_cov, 0.0, g_mean,
                                 g_cov, start=train.shape[0])
        return np.inf if nll is None else nll

    best = (val_nll_of(init_params), init_params, "init")
    x0 = par.pack(init_params)
    for lam in kl_weight_grid:
        def objective(raw):
            params = par.unpack(raw)
            nll, penalty = _predictive_nll(train, params, g_mean, g_cov, lam,
                                           g_mean, g_cov)
            if nll is None:
                return 1e12
            return nll + penalty

        res = optimize.minimize(
            objective, x0, method="L-BFGS-B", options={"maxiter": max_iter}
        )
        if not np.isfinite(res.fun):
            raise NumericalError(
                f"EMA optimization diverged for kl_weight={lam}: {res.message}"
            )
        fitted = par.unpack(res.x)
        score = val_nll_of(fitted)
        if score < best[0]:
            best = (score, fitted, f"kl_weight={lam}")
    return best[1]


# ---------------------------------------------------------------------------
# whitening and the EMA-Gaussian baseline


def _stabilized_cov(cov, jitter=JITTER):
    d = cov.shape[0]
    try:
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        pass
    cov = cov + jitter * np.eye(d)
    try:
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        raise NumericalError("EMA covariance singular even after jitter")


def whiten(f_next, state: EMAState):
    """Apply the full inverse-covariance whitening.

    Returns (whitened, logdet_correction).  The whitened value is
    ``cov^{-1} (f - mean)`` (the verbatim transform, not a symmetric square
    root).  The correction ``-log|det cov|`` converts a log-density on the
    whitened variable into one on the raw variable, because the inverse map
    is ``f = cov @ whitened + mean``.
    """
    f = np.asarray(f_next, dtype=float)
    cov = _stabilized_cov(np.asarray(state.cov, dtype=float))
    whitened = np.linalg.solve(cov, (f - state.mean).T).T
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericalError("EMA covariance has non-positive determinant")
    return whitened, -logdet


def unwhiten(f_whitened, state: EMAState):
    """Exact inverse of :func:`whiten`: ``cov @ w + mean``."""
    w = np.asarray(f_whitened, dtype=float)
    return w @ np.asarray(state.cov, dtype=float).T + state.mean


def ema_gaussian_logpdf(f_next, state: EMAState):
    """Log-density of the EMA-Gaussian baseline factor model."""
    return mvn_logpdf(f_next, MVNParams(state.mean, state.cov))


class EMAGaussianFactorModel:
    """The no-VAE baseline behind the factor-sampler interface.

    Draws next-day factors directly from the EMA state's Gaussian, ignoring
    the conditioning window.  Exposes the same ``config`` attributes and
    ``sample_batch`` signature as the learned factor model so the joint
    sampler and evaluators accept it unchanged.
    """

    class _Config:
        def __init__(self, factor_dim, window):
            self.factor_dim = factor_dim
            self.window = window
            self.latent = factor_dim
            self.use_ema_whitening = True

    def __init__(self, factor_dim, window=256):
        self.config = self._Config(factor_dim, window)

    def eval(self):
        return self

    def sample_batch(self, windows, state_means, state_covs, latent_normals,
                     nig_variates):
        chol = np.linalg.cholesky(
            state_covs + JITTER * np.eye(state_covs.shape[-1]))
        z = np.asarray(latent_normals)[:, :self.config.factor_dim]
        return state_means + np.einsum("nij,nj->ni", chol, z)
