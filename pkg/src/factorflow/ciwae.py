"""Conditional importance-weighted autoencoder over whitened factor returns.

The history window is summarized by a per-step MLP feeding two LSTM layers
(first bidirectional).  A Gaussian inference network proposes latents given
the summary and the next-day target; the generator maps a latent plus the
summary to per-dimension NIG parameters.  Training maximizes the k-sample
importance-weighted bound; evaluation likelihood uses a larger k with
replicates averaged in log space.

Targets are EMA-whitened by default ("w/o EMA" conditioning is a config
flag); every reported log-likelihood adds the stored change-of-variables
correction so values refer to the PCA-factor space.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view
from torch import nn

from .distributions import nig_sample, NIGParams
from .exceptions import DataError, NumericalError, ParameterError
from .factors import EMAState, unwhiten, whiten
from .nn import (
    DTYPE,
    MLP,
    SequenceEncoder,
    check_finite_grads,
    logmeanexp,
    module_arrays,
    load_module_arrays,
    nig_log_prob,
)

__all__ = [
    "CIWAEConfig",
    "CIWAEModel",
    "FactorDataset",
    "build_factor_dataset",
    "iwae_loss",
    "train_ciwae",
    "sample_factors",
    "factor_logpdf_is",
]

_POS_FLOOR = 1e-8


@dataclass
class CIWAEConfig:
    factor_dim: int
    window: int = 256
    hidden: int = 128
    latent: int = 64
    dropout: float = 0.5
    k: int = 64
    lr: float = 2e-4
    weight_decay: float = 2e-3
    batch_size: int = 64
    epochs: int = 50
    patience: int = 10
    eval_k: int = 1024
    eval_replicates: int = 8
    use_ema_whitening: bool = True
    seed: int = 0

    def to_dict(self):
        return dict(self.__dict__)


class CIWAEModel(nn.Module):
    """Encoder/decoder pair with an LSTM history summarizer.

    Conditioning windows and targets are standardized internally by
    persistent per-dimension scale buffers (set from training data), keeping
    the softplus NIG heads at O(1); reported log-densities include the exact
    affine correction, and samples come back in raw units.
    """

    def __init__(self, config: CIWAEConfig):
        super().__init__()
        self.config = config
        d, h, latent = config.factor_dim, config.hidden, config.latent
        self.register_buffer("target_scale", torch.ones(d, dtype=DTYPE))
        self.register_buffer("window_scale", torch.ones(d, dtype=DTYPE))
        self.history = SequenceEncoder(d, h, dropout=config.dropout)
        self.inference = MLP(d + h, [h], h, dropout=config.dropout,
                             final_activation=True)
        self.latent_mu = nn.Linear(h, latent, dtype=DTYPE)
        self.latent_sigma = nn.Linear(h, latent, dtype=DTYPE)
        self.generator = MLP(latent + h, [h], h, dropout=config.dropout,
                             final_activation=True)
        self.out_mu = nn.Linear(h, d, dtype=DTYPE)
        self.out_gamma = nn.Linear(h, d, dtype=DTYPE)
        self.out_beta = nn.Linear(h, d, dtype=DTYPE)
        self.out_delta = nn.Linear(h, d, dtype=DTYPE)

    def set_scales(self, target_scale, window_scale):
        with torch.no_grad():
            self.target_scale.copy_(torch.as_tensor(
                np.maximum(target_scale, 1e-12), dtype=DTYPE))
            self.window_scale.copy_(torch.as_tensor(
                np.maximum(window_scale, 1e-12), dtype=DTYPE))

    def summarize(self, windows):
        return self.history(windows / self.window_scale)

    def encode(self, windows, targets, summary=None):
        """Gaussian posterior parameters (mu_z, sigma_z), sigma_z > 0."""
        if summary is None:
            summary = self.summarize(windows)
        scaled = targets / self.target_scale
        h3 = self.inference(torch.cat([scaled, summary], dim=-1))
        mu = self.latent_mu(h3)
        sigma = F.softplus(self.latent_sigma(h3)) + _POS_FLOOR
        return mu, sigma

    def decode(self, z, summary):
        """Per-dimension NIG parameters (mu, delta, gamma, beta) given z.

        Parameters refer to the internally standardized target space.
        """
        h4 = self.generator(torch.cat([z, summary], dim=-1))
        mu = self.out_mu(h4)
        gamma = F.softplus(self.out_gamma(h4)) + _POS_FLOOR
        beta = self.out_beta(h4)
        delta = F.softplus(self.out_delta(h4)) + _POS_FLOOR
        return mu, delta, gamma, beta

    def decoder_log_prob(self, targets, z, summary):
        """log p(target | z, history): independent NIG across dimensions."""
        mu, delta, gamma, beta = self.decode(z, summary)
        scaled = targets / self.target_scale
        per_dim = nig_log_prob(scaled, mu, delta, gamma, beta) \
            - torch.log(self.target_scale)
        return per_dim.sum(dim=-1)

    def sample_batch(self, windows, state_means, state_covs, latent_normals,
                     nig_variates):
        """One prior-driven factor draw per conditioning window.

        Row i consumes row i of the variate arrays and is unwhitened with
        (state_means[i], state_covs[i]); None states skip unwhitening.
        """
        self.eval()
        windows_t = torch.as_tensor(np.ascontiguousarray(windows),
                                    dtype=DTYPE)
        with torch.no_grad():
            summary = self.summarize(windows_t)
            z = torch.as_tensor(latent_normals, dtype=DTYPE)
            mu, delta, gamma, beta = self.decode(z, summary)
        mu, delta = mu.numpy(), delta.numpy()
        gamma, beta = gamma.numpy(), beta.numpy()
        w = _inverse_gaussian_from_variates(delta / gamma, delta**2,
                                            nig_variates[..., 0],
                                            nig_variates[..., 1])
        scaled = mu + beta * w + np.sqrt(w) * nig_variates[..., 2]
        whitened = scaled * self.target_scale.numpy()
        if state_means is None:
            return whitened
        return np.einsum("nij,nj->ni", state_covs, whitened) + state_means


def _standard_normal_log_prob(z):
    return (-0.5 * np.log(2 * np.pi) - 0.5 * z**2).sum(dim=-1)


def _gaussian_log_prob(z, mu, sigma):
    return (-0.5 * np.log(2 * np.pi) - torch.log(sigma)
            - 0.5 * ((z - mu) / sigma) ** 2).sum(dim=-1)


def importance_log_weights(model, windows, targets, k, noise=None):
    """(k, batch) matrix of log p(y|x,z) + log p(z) - log q(z|y,x).

    Latents are reparameterized as z = mu + sigma * eps so gradients flow to
    the encoder; ``noise`` fixes eps for deterministic checks.
    """
    summary = model.summarize(windows)
    mu, sigma = model.encode(windows, targets, summary=summary)
    batch, latent = mu.shape
    if noise is None:
        noise = torch.randn(k, batch, latent, dtype=DTYPE)
    elif noise.shape != (k, batch, latent):
        raise ParameterError(
            f"noise must have shape {(k, batch, latent)}, got {tuple(noise.shape)}"
        )
    z = mu.unsqueeze(0) + sigma.unsqueeze(0) * noise
    flat_z = z.reshape(k * batch, latent)
    flat_summary = summary.unsqueeze(0).expand(k, batch, -1).reshape(k * batch, -1)
    flat_targets = targets.unsqueeze(0).expand(k, batch, -1).reshape(k * batch, -1)
    dec = model.decoder_log_prob(flat_targets, flat_z, flat_summary)
    dec = dec.reshape(k, batch)
    prior = _standard_normal_log_prob(z)
    posterior = _gaussian_log_prob(z, mu.unsqueeze(0), sigma.unsqueeze(0))
    return dec + prior - posterior


def iwae_loss(model, windows, targets, k, noise=None):
    """Negative importance-weighted bound, averaged over the batch.

    With k=1 this is exactly the negative conditional ELBO for the same
    latent draws.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    log_w = importance_log_weights(model, windows, targets, k, noise=noise)
    if not torch.isfinite(log_w).all():
        bad = torch.nonzero(~torch.isfinite(log_w))
        raise NumericalError(
            f"non-finite importance weight at (sample, item) indices "
            f"{bad[:5].tolist()} (of {log_w.shape})"
        )
    return -logmeanexp(log_w, dim=0).mean()


# ---------------------------------------------------------------------------
# dataset


@dataclass
class FactorDataset:
    """Aligned history windows, targets and change-of-variables corrections.

    ``windows[i]`` holds the ``window`` days preceding target ``i`` in the
    conditioning space (whitened by default), ``targets[i]`` the next-day
    value in the same space, ``corrections[i]`` the additive term converting
    a log-density on the conditioning space to PCA-factor space.
    """

    windows: np.ndarray      # (n, window, d)
    targets: np.ndarray      # (n, d)
    corrections: np.ndarray  # (n,)
    indices: np.ndarray      # (n,) positions of the targets in the source series

    def __len__(self):
        return self.targets.shape[0]

    def torch_batch(self, idx):
        w = torch.as_tensor(np.ascontiguousarray(self.windows[idx]), dtype=DTYPE)
        t = torch.as_tensor(self.targets[idx], dtype=DTYPE)
        return w, t


def build_factor_dataset(f_pca, states, window, use_whitening=True,
                         start=None, stop=None):
    """Construct training samples from a PCA-factor series and EMA states.

    ``states[t]`` must be the EMA state after observing ``f_pca[t]``; the
    target at position t is conditioned on the state at t-1.  Positions
    before ``window + 1`` are skipped so every sample has a full window.
    """
    f = np.asarray(f_pca, dtype=float)
    t_len, d = f.shape
    if len(states) != t_len:
        raise DataError(f"need one EMA state per row, got {len(states)} for {t_len}")
    if use_whitening:
        series = np.empty_like(f)
        corrections = np.empty(t_len)
        series[0], corrections[0] = f[0], 0.0  # no prior state; never a target
        for t in range(1, t_len):
            series[t], corrections[t] = whiten(f[t], states[t - 1])
    else:
        series = f
        corrections = np.zeros(t_len)
    lo = max(window + 1, start if start is not None else 0)
    hi = min(t_len, stop if stop is not None else t_len)
    if hi <= lo:
        raise DataError(f"no usable targets in [{lo}, {hi})")
    all_windows = sliding_window_view(series, window, axis=0)  # (T-w+1, d, w)
    idx = np.arange(lo, hi)
    windows = all_windows[idx - window].swapaxes(1, 2)
    return FactorDataset(
        windows=windows,
        targets=series[idx],
        corrections=corrections[idx],
        indices=idx,
    )


# ---------------------------------------------------------------------------
# training


def train_ciwae(train_set: FactorDataset, val_set: FactorDataset,
                config: CIWAEConfig, log=None):
    """Train by Adam with decoupled weight decay; early-stop on val NLL.

    Returns (model, curve) where curve rows are (epoch, train_loss, val_nll).
    Aborts with the last good parameters if the loss goes non-finite.
    """
    torch.manual_seed(config.seed)
    model = CIWAEModel(config)
    model.set_scales(np.std(train_set.targets, axis=0),
                     np.std(train_set.windows.reshape(-1, config.factor_dim),
                            axis=0))
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr,
                                  weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n = len(train_set)
    best_state = copy.deepcopy(model.state_dict())
    best_val = np.inf
    since_best = 0
    curve = []
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(n)
        epoch_losses = []
        aborted = False
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            windows, targets = train_set.torch_batch(idx)
            optimizer.zero_grad()
            try:
                loss = iwae_loss(model, windows, targets, config.k)
            except NumericalError:
                aborted = True
                break
            if not torch.isfinite(loss):
                aborted = True
                break
            loss.backward()
            check_finite_grads(model)
            optimizer.step()
            epoch_losses.append(loss.item())
        if aborted:
            model.load_state_dict(best_state)
            if log:
                log(f"epoch {epoch}: non-finite loss, reverting to best checkpoint")
            break
        val_nll = validation_nll(model, val_set, k=min(config.k, 64),
                                 seed=config.seed + 1)
        curve.append((epoch, float(np.mean(epoch_losses)), val_nll))
        if log:
            log(f"epoch {epoch}: train {curve[-1][1]:.4f}  val {val_nll:.4f}")
        if val_nll < best_val - 1e-6:
            best_val = val_nll
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model, curve


def validation_nll(model, dataset: FactorDataset, k=64, seed=0,
                   batch_size=256):
    """Mean importance-sampled NLL over a dataset, in PCA-factor space."""
    model.eval()
    torch.manual_seed(seed)
    total = 0.0
    n = len(dataset)
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            idx = np.arange(lo, min(lo + batch_size, n))
            windows, targets = dataset.torch_batch(idx)
            log_w = importance_log_weights(model, windows, targets, k)
            est = logmeanexp(log_w, dim=0).numpy() + dataset.corrections[idx]
            total += float(-est.sum())
    return total / n


# ---------------------------------------------------------------------------
# sampling and evaluation likelihood


def sample_factors(model, window, state: EMAState | None, count, seed=None,
                   latent_normals=None, nig_variates=None):
    """Draw next-day factor samples in PCA-factor space.

    Sampling uses the prior N(0, I) and never consults the encoder.  Each
    sample consumes ``latent`` normals plus three NIG variates per dimension,
    so callers may pass pre-drawn arrays for substream control.  ``state``
    unwhitens the draws; passing None (for a model conditioned on raw
    factors) skips unwhitening.
    """
    config = model.config
    model.eval()
    rng = np.random.default_rng(seed)
    if latent_normals is None:
        latent_normals = rng.standard_normal((count, config.latent))
    if nig_variates is None:
        nig_variates = np.stack(
            [rng.standard_normal((count, config.factor_dim)),
             rng.random((count, config.factor_dim)),
             rng.standard_normal((count, config.factor_dim))], axis=-1,
        )
    window_t = torch.as_tensor(np.ascontiguousarray(window), dtype=DTYPE)
    if window_t.ndim == 2:
        window_t = window_t.unsqueeze(0)
    with torch.no_grad():
        summary = model.summarize(window_t)
        summary = summary.expand(count, -1)
        z = torch.as_tensor(latent_normals, dtype=DTYPE)
        mu, delta, gamma, beta = model.decode(z, summary)
    mu = mu.numpy()
    delta = delta.numpy()
    gamma = gamma.numpy()
    beta = beta.numpy()
    w = _inverse_gaussian_from_variates(delta / gamma, delta**2,
                                        nig_variates[..., 0],
                                        nig_variates[..., 1])
    scaled = mu + beta * w + np.sqrt(w) * nig_variates[..., 2]
    whitened = scaled * model.target_scale.numpy()
    if state is None:
        return whitened
    return unwhiten(whitened, state)


def _inverse_gaussian_from_variates(mean, shape, normals, uniforms):
    nu = normals**2
    root = mean + mean**2 * nu / (2 * shape) - (mean / (2 * shape)) * np.sqrt(
        4 * mean * shape * nu + mean**2 * nu**2
    )
    return np.where(uniforms <= mean / (mean + root), root, mean**2 / root)


def sample_factors_batch(model, windows, state_means, state_covs,
                         latent_normals, nig_variates):
    """One factor draw per conditioning window (batched rollout helper).

    ``windows`` is (n, window, d); row i is sampled once using row i of the
    variate arrays and unwhitened with (state_means[i], state_covs[i]).
    Passing None for the states skips unwhitening.
    """
    return model.sample_batch(windows, state_means, state_covs,
                              latent_normals, nig_variates)


def factor_logpdf_is(model, window, target, correction=0.0, k=1024,
                     replicates=1, seed=None):
    """Importance-sampled log p(next-day factors | history).

    Uses the encoder as the proposal; the estimate is nondecreasing in k in
    expectation.  ``replicates`` independent estimates are averaged in log
    space (arithmetic mean of the log estimates).
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    model.eval()
    gen = torch.Generator().manual_seed(seed if seed is not None else 0)
    window_t = torch.as_tensor(np.ascontiguousarray(window), dtype=DTYPE)
    if window_t.ndim == 2:
        window_t = window_t.unsqueeze(0)
    target_t = torch.as_tensor(np.asarray(target, dtype=float),
                               dtype=DTYPE).reshape(1, -1)
    estimates = []
    with torch.no_grad():
        mu, sigma = model.encode(window_t, target_t)
        if float(sigma.min()) < 1e-7:
            raise NumericalError("degenerate encoder proposal (sigma ~ 0)")
        for _ in range(replicates):
            noise = torch.randn(k, 1, model.config.latent, dtype=DTYPE,
                                generator=gen)
            log_w = importance_log_weights(model, window_t, target_t, k,
                                           noise=noise)
            estimates.append(float(logmeanexp(log_w, dim=0)))
    return float(np.mean(estimates) + correction)


def save_ciwae(path, model: CIWAEModel):
    from .nn import module_arrays, save_checkpoint

    save_checkpoint(path, module_arrays(model),
                    {"kind": "ciwae", "config": model.config.to_dict()})


def load_ciwae(path) -> CIWAEModel:
    from .nn import load_checkpoint, load_module_arrays

    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "ciwae":
        raise DataError(f"{path!r} is not a factor-model checkpoint")
    config = CIWAEConfig(**meta["config"])
    model = CIWAEModel(config)
    load_module_arrays(model, arrays)
    model.eval()
    return model
