"""Per-stock conditional residual normalizing flow with a NIG base.

One shared network models every stock's next-day return given its own return
window, the factor-return window, optional stock features, and the next-day
factor values (teacher-forced during training).  The history LSTM summary is
independent of the next-day factors, so it can be precomputed and reused
across factor draws.

The flow is a composition of residual blocks ``y = x + F([x || c])`` whose
linear layers are spectrally normalized, keeping each block's Lipschitz
constant below one; the map is therefore strictly increasing and invertible
by fixed-point iteration.  The scalar log-determinant is the sum of
``log(1 + dF/dx)`` terms, obtained by automatic differentiation -- no matrix
determinant code path exists.

Architecture variants used by the ablation harness: ``flow`` (full model),
``nig`` (no blocks, conditional NIG), ``normal`` (no blocks, conditional
Gaussian), ``linear`` (affine heads on the next-day factors, Gaussian).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .distributions import NIGParams, nig_cdf, nig_cdf_grid
from .exceptions import DataError, NumericalError, ParameterError
from .nn import (
    DTYPE,
    SequenceEncoder,
    SpectralLinear,
    check_finite_grads,
    nig_log_prob,
    normal_log_prob,
)

__all__ = [
    "StockFlowConfig",
    "StockFlowModel",
    "StockConditioning",
    "BaseParams",
    "flow_inverse",
    "train_stock_model",
    "StockDataset",
]

_POS_FLOOR = 1e-8
ARCHITECTURES = ("flow", "nig", "normal", "linear")


@dataclass
class StockFlowConfig:
    factor_dim: int
    feature_dim: int = 0
    window: int = 256
    hidden: int = 256
    block_hidden: int = 128
    cond_dim: int = 32
    n_blocks: int = 4
    spectral_coeff: float = 0.97
    dropout: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 2e-2
    batch_size: int = 128
    max_steps: int = 200_000
    val_interval: int = 500
    patience: int = 10
    architecture: str = "flow"
    include_stock_history: bool = True
    include_factor_history: bool = True
    include_next_factors: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ParameterError(f"unknown architecture {self.architecture!r}")
        if self.architecture in ("nig", "normal"):
            self.n_blocks = 0
        if self.architecture == "linear":
            self.n_blocks = 0
            self.include_stock_history = False
            self.include_factor_history = False

    @property
    def history_dim(self) -> int:
        d = 0
        if self.include_stock_history:
            d += 1
        if self.include_factor_history:
            d += self.factor_dim
        return d

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class StockConditioning:
    """Inputs for one (stock, day) density/sampling query.

    ``stock_window`` (window,), ``factor_window`` (window, d) and ``f_next``
    (d,) must be date-aligned; ``features`` is the optional per-stock vector.
    """

    stock_window: np.ndarray
    factor_window: np.ndarray
    f_next: np.ndarray
    features: np.ndarray | None = None

    def validate(self, config: StockFlowConfig):
        sw = np.asarray(self.stock_window, dtype=float)
        fw = np.asarray(self.factor_window, dtype=float)
        fn = np.asarray(self.f_next, dtype=float)
        if sw.shape != (config.window,):
            raise DataError(
                f"stock window must have length {config.window}, got {sw.shape}"
            )
        if fw.shape != (config.window, config.factor_dim):
            raise DataError(
                f"factor window must be ({config.window}, {config.factor_dim}),"
                f" got {fw.shape}"
            )
        if fn.shape != (config.factor_dim,):
            raise DataError(f"f_next must have length {config.factor_dim}")
        if not (np.isfinite(sw).all() and np.isfinite(fw).all()
                and np.isfinite(fn).all()):
            raise DataError("conditioning contains non-finite values")


class BaseParams:
    """Per-item base-distribution parameters (NIG or normal)."""

    def __init__(self, kind, **tensors):
        self.kind = kind
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def log_prob(self, z):
        if self.kind == "nig":
            return nig_log_prob(z, self["mu"], self["delta"], self["gamma"],
                                self["beta"])
        return normal_log_prob(z, self["mu"], self["sigma"])

    def nig_params(self, i) -> NIGParams:
        if self.kind != "nig":
            raise ParameterError("base distribution is not NIG")
        mu = float(self["mu"][i].detach())
        delta = float(self["delta"][i].detach())
        gamma = float(self["gamma"][i].detach())
        beta = float(self["beta"][i].detach())
        return NIGParams(mu, delta, float(np.hypot(gamma, beta)), beta)

    def detach(self):
        return BaseParams(self.kind,
                          **{k: v.detach() for k, v in self.tensors.items()})


class ResidualBlock(nn.Module):
    """x -> x + F([x || c]) with all linear maps spectrally capped."""

    def __init__(self, cond_dim, hidden, coeff):
        super().__init__()
        self.lin1 = SpectralLinear(1 + cond_dim, hidden, coeff=coeff)
        self.lin2 = SpectralLinear(hidden, hidden, coeff=coeff)
        self.lin3 = SpectralLinear(hidden, 1, coeff=coeff)

    def residual(self, x, cond):
        h = torch.cat([x.unsqueeze(-1), cond], dim=-1)
        h = F.elu(self.lin1(h))
        h = F.elu(self.lin2(h))
        return self.lin3(h).squeeze(-1)

    def forward(self, x, cond):
        return x + self.residual(x, cond)


class StockFlowModel(nn.Module):
    """Shared conditional flow over all (stock, day) pairs.

    Inputs and targets are standardized internally by persistent scale
    buffers (set from training data) so the positive softplus heads operate
    at O(1); log-densities, CDFs and samples are reported in raw return
    units with the exact affine correction.
    """

    def __init__(self, config: StockFlowConfig):
        super().__init__()
        self.config = config
        h = config.hidden
        self.register_buffer("return_scale", torch.ones((), dtype=DTYPE))
        self.register_buffer("factor_scale",
                             torch.ones(config.factor_dim, dtype=DTYPE))
        if config.feature_dim:
            self.register_buffer("feature_scale",
                                 torch.ones(config.feature_dim, dtype=DTYPE))
        if config.history_dim > 0:
            self.history = SequenceEncoder(config.history_dim, h,
                                           dropout=config.dropout)
        else:
            self.history_const = nn.Parameter(torch.zeros(h, dtype=DTYPE))
        cond_in = self._conditioner_input_dim()
        if config.architecture == "linear":
            head_in = max(cond_in, 1)
        else:
            self.conditioner = nn.Sequential(
                nn.Linear(cond_in, h, dtype=DTYPE), nn.ReLU(),
                nn.Dropout(config.dropout),
                nn.Linear(h, h, dtype=DTYPE), nn.ReLU(),
                nn.Dropout(config.dropout),
            )
            head_in = h
        self.base_mu = nn.Linear(head_in, 1, dtype=DTYPE)
        self.base_scale = nn.Linear(head_in, 1, dtype=DTYPE)
        if self._base_kind() == "nig":
            self.base_beta = nn.Linear(head_in, 1, dtype=DTYPE)
            self.base_delta = nn.Linear(head_in, 1, dtype=DTYPE)
        self.block_conditioners = nn.ModuleList(
            nn.Linear(head_in, config.cond_dim, dtype=DTYPE)
            for _ in range(config.n_blocks)
        )
        self.blocks = nn.ModuleList(
            ResidualBlock(config.cond_dim, config.block_hidden,
                          config.spectral_coeff)
            for _ in range(config.n_blocks)
        )

    def _base_kind(self):
        return "normal" if self.config.architecture in ("normal", "linear") \
            else "nig"

    def _conditioner_input_dim(self):
        c = self.config
        d = 0 if c.architecture == "linear" else c.hidden
        if c.include_next_factors:
            d += c.factor_dim
        if c.feature_dim:
            d += c.feature_dim + 1  # presence flag
        return d

    # -- conditioning ------------------------------------------------------

    def set_scales(self, return_scale, factor_scale=None, feature_scale=None):
        with torch.no_grad():
            self.return_scale.fill_(float(max(return_scale, 1e-12)))
            if factor_scale is not None:
                self.factor_scale.copy_(torch.as_tensor(
                    np.maximum(factor_scale, 1e-12), dtype=DTYPE))
            if feature_scale is not None and self.config.feature_dim:
                self.feature_scale.copy_(torch.as_tensor(
                    np.maximum(feature_scale, 1e-12), dtype=DTYPE))

    def _scale_windows(self, windows):
        c = self.config
        cols = []
        k = 0
        if c.include_stock_history:
            cols.append(windows[:, :, :1] / self.return_scale)
            k = 1
        if c.include_factor_history:
            cols.append(windows[:, :, k:] / self.factor_scale)
        return torch.cat(cols, dim=-1) if len(cols) > 1 else cols[0]

    def summarize_history(self, windows):
        """LSTM summary of the (batch, window, history_dim) tensor.

        Independent of next-day factors, so one summary per (stock, day) can
        be shared across any number of factor draws.
        """
        if self.config.history_dim == 0:
            batch = windows.shape[0] if windows is not None else 1
            return self.history_const.unsqueeze(0).expand(batch, -1)
        return self.history(self._scale_windows(windows))

    def condition_from_summary(self, summary, f_next, features=None):
        c = self.config
        parts = []
        if c.architecture != "linear":
            parts.append(summary)
        if c.include_next_factors:
            parts.append(f_next / self.factor_scale)
        if c.feature_dim:
            if features is None:
                batch = f_next.shape[0]
                features = torch.zeros(batch, c.feature_dim, dtype=DTYPE)
                flag = torch.zeros(batch, 1, dtype=DTYPE)
            else:
                features = features / self.feature_scale
                flag = torch.ones(features.shape[0], 1, dtype=DTYPE)
            parts.append(features)
            parts.append(flag)
        if not parts:
            batch = summary.shape[0]
            h3 = torch.ones(batch, 1, dtype=DTYPE)
        elif c.architecture == "linear":
            h3 = torch.cat(parts, dim=-1)
        else:
            h3 = self.conditioner(torch.cat(parts, dim=-1))
        conds = [proj(h3) for proj in self.block_conditioners]
        base = self._base_from(h3)
        return conds, base

    def _base_from(self, h3):
        mu = self.base_mu(h3).squeeze(-1)
        scale = F.softplus(self.base_scale(h3)).squeeze(-1) + _POS_FLOOR
        if self._base_kind() == "normal":
            return BaseParams("normal", mu=mu, sigma=scale)
        beta = self.base_beta(h3).squeeze(-1)
        delta = F.softplus(self.base_delta(h3)).squeeze(-1) + _POS_FLOOR
        return BaseParams("nig", mu=mu, delta=delta, gamma=scale, beta=beta)

    def condition(self, conditioning: StockConditioning):
        """Single-query conditioning: (block conditioners, base params)."""
        conditioning.validate(self.config)
        windows, f_next, feats = self._tensors_from(conditioning)
        summary = self.summarize_history(windows)
        return self.condition_from_summary(summary, f_next, feats)

    def _tensors_from(self, conditioning: StockConditioning):
        c = self.config
        cols = []
        if c.include_stock_history:
            cols.append(np.asarray(conditioning.stock_window,
                                   dtype=float)[:, None])
        if c.include_factor_history:
            cols.append(np.asarray(conditioning.factor_window, dtype=float))
        windows = None
        if cols:
            windows = torch.as_tensor(np.concatenate(cols, axis=1),
                                      dtype=DTYPE).unsqueeze(0)
        f_next = torch.as_tensor(np.asarray(conditioning.f_next, dtype=float),
                                 dtype=DTYPE).unsqueeze(0)
        feats = None
        if c.feature_dim and conditioning.features is not None:
            feats = torch.as_tensor(
                np.asarray(conditioning.features, dtype=float), dtype=DTYPE
            ).unsqueeze(0)
        return windows, f_next, feats

    # -- flow --------------------------------------------------------------

    def flow_forward(self, r, conds):
        """Map returns to base space: (z, log|dz/dr|).

        The per-block derivative comes from autograd on the scalar input;
        each block is a contraction plus identity, so 1 + dF/dx > 0 and the
        log uses log1p.
        """
        grad_mode = torch.is_grad_enabled()
        with torch.enable_grad():
            x = r.clone().requires_grad_(True)
            out = x
            log_det = torch.zeros_like(r)
            for block, cond in zip(self.blocks, conds):
                f_val = block.residual(out, cond)
                df = torch.autograd.grad(f_val.sum(), out, create_graph=True,
                                         retain_graph=True)[0]
                log_det = log_det + torch.log1p(df)
                out = out + f_val
        if not grad_mode:
            return out.detach(), log_det.detach()
        return out, log_det

    def log_prob(self, r, conds, base: BaseParams):
        """Log-density in raw return units (scale correction included)."""
        scaled = r / self.return_scale
        z, log_det = self.flow_forward(scaled, conds)
        return base.log_prob(z) + log_det - torch.log(self.return_scale)

    def stock_logpdf(self, r, conditioning: StockConditioning) -> float:
        conds, base = self.condition(conditioning)
        r_t = torch.as_tensor([float(r)], dtype=DTYPE)
        with torch.no_grad():
            return float(self.log_prob(r_t, conds, base))

    def base_values(self, r, conds):
        """Map raw returns through scaling and the flow to base space."""
        scaled = torch.as_tensor(np.atleast_1d(r), dtype=DTYPE) / self.return_scale
        if conds and conds[0].shape[0] == 1 and scaled.shape[0] > 1:
            conds = [c.expand(scaled.shape[0], -1) for c in conds]
        with torch.no_grad():
            z, _ = self.flow_forward(scaled, conds)
        return z.numpy()

    def stock_cdf(self, r, conditioning: StockConditioning) -> float:
        conds, base = self.condition(conditioning)
        z = self.base_values([float(r)], conds)
        return self._base_cdf(z, base)[0]

    def _base_cdf(self, z_values, base: BaseParams):
        if base.kind == "normal":
            from scipy.stats import norm

            mu = base["mu"].detach().numpy()
            sigma = base["sigma"].detach().numpy()
            return norm.cdf(z_values, loc=mu, scale=sigma)
        if len(z_values) > 4 and len(np.atleast_1d(
                base["mu"].detach().numpy())) == 1:
            return nig_cdf_grid(z_values, base.nig_params(0))
        return np.array([
            nig_cdf(z, base.nig_params(i if base["mu"].numel() > 1 else 0))
            for i, z in enumerate(np.atleast_1d(z_values))
        ])

    def sample(self, conditioning: StockConditioning, count, seed=None,
               variates=None, n_iter=100):
        """Draw returns: base draws pushed through the inverse flow.

        Three variates are consumed per draw (normal, uniform, normal)
        regardless of the base family, keeping substream layouts stable.
        """
        conds, base = self.condition(conditioning)
        return self.sample_from_conditioners(conds, base, count, seed=seed,
                                             variates=variates, n_iter=n_iter)

    def sample_from_conditioners(self, conds, base, count, seed=None,
                                 variates=None, n_iter=100):
        if variates is None:
            rng = np.random.default_rng(seed)
            variates = np.column_stack([
                rng.standard_normal(count), rng.random(count),
                rng.standard_normal(count),
            ])
        variates = np.asarray(variates, dtype=float)
        z = self._base_sample(base, count, variates)
        z_t = torch.as_tensor(z, dtype=DTYPE)
        conds = [c.expand(count, -1) if c.shape[0] == 1 else c for c in conds]
        with torch.no_grad():
            r = flow_inverse(self, z_t, conds, n_iter=n_iter)
        return r.numpy() * float(self.return_scale)

    def _base_sample(self, base: BaseParams, count, variates):
        mu = base["mu"].detach().numpy()
        mu = np.broadcast_to(mu, (count,)) if mu.size == 1 else mu
        if base.kind == "normal":
            sigma = base["sigma"].detach().numpy()
            sigma = np.broadcast_to(sigma, (count,)) if sigma.size == 1 else sigma
            return mu + sigma * variates[:, 2]
        gamma = base["gamma"].detach().numpy()
        beta = base["beta"].detach().numpy()
        delta = base["delta"].detach().numpy()
        if gamma.size == 1:
            gamma = np.broadcast_to(gamma, (count,))
            beta = np.broadcast_to(beta, (count,))
            delta = np.broadcast_to(delta, (count,))
        # the gamma head is sqrt(alpha^2 - beta^2), exactly the IG mixing rate
        ig_mean = delta / gamma
        ig_shape = delta**2
        nu = variates[:, 0] ** 2
        root = ig_mean + ig_mean**2 * nu / (2 * ig_shape) - (
            ig_mean / (2 * ig_shape)
        ) * np.sqrt(4 * ig_mean * ig_shape * nu + ig_mean**2 * nu**2)
        w = np.where(variates[:, 1] <= ig_mean / (ig_mean + root), root,
                     ig_mean**2 / root)
        return mu + beta * w + np.sqrt(w) * variates[:, 2]


def flow_inverse(model: StockFlowModel, z, conds, n_iter=100, tol=1e-10):
    """Invert the composed flow by per-block fixed-point iteration.

    Blocks are inverted in reverse order; each solves y = x + F(x) with the
    iteration x_i = y - F(x_{i-1}), x_0 = y, exiting early once the update
    falls below ``tol``.
    """
    if n_iter < 1:
        raise ParameterError(f"n_iter must be >= 1, got {n_iter}")
    x = z
    for block, cond in reversed(list(zip(model.blocks, conds))):
        y = x
        x = y.clone()
        converged = False
        for _ in range(n_iter):
            new_x = y - block.residual(x, cond)
            delta = (new_x - x).abs().max()
            x = new_x
            if delta < tol:
                converged = True
                break
        if not converged:
            residual = (x + block.residual(x, cond) - y).abs().max()
            if residual > 1e-9:
                raise NumericalError(
                    f"fixed-point inversion did not converge in {n_iter} "
                    f"iterations (residual {float(residual):.3e})"
                )
    return x


# ---------------------------------------------------------------------------
# dataset over (stock, date) pairs


class StockDataset:
    """(stock, date) training pairs over a panel with teacher-forced factors.

    A pair (i, t) is usable when stock i is in the universe for the full
    window [t - window, t] (new entrants wait until their window fills).
    Windows are gathered lazily per batch; nothing big is materialized.
    """

    def __init__(self, returns, mask, factors, config: StockFlowConfig,
                 features=None, start=None, stop=None):
        self.returns = np.asarray(returns, dtype=float)
        self.mask = np.asarray(mask, dtype=bool)
        self.factors = np.asarray(factors, dtype=float)
        self.features = None if features is None else np.asarray(features,
                                                                 dtype=float)
        self.config = config
        t_len, n = self.returns.shape
        if self.factors.shape != (t_len, config.factor_dim):
            raise DataError(
                f"factors must be ({t_len}, {config.factor_dim}), got "
                f"{self.factors.shape}"
            )
        w = config.window
        lo = max(w, start if start is not None else 0)
        hi = min(t_len, stop if stop is not None else t_len)
        pairs = []
        ok = np.isfinite(self.returns) & self.mask
        run = np.zeros(n, dtype=int)
        runs = np.zeros((t_len, n), dtype=int)
        for t in range(t_len):
            run = np.where(ok[t], run + 1, 0)
            runs[t] = run
        for t in range(lo, hi):
            valid = runs[t] >= w + 1
            for i in np.nonzero(valid)[0]:
                pairs.append((i, t))
        if not pairs:
            raise DataError("no usable (stock, date) pairs")
        self.pairs = np.asarray(pairs, dtype=int)

    def __len__(self):
        return len(self.pairs)

    def batch(self, idx):
        """Tensors for pair indices: (windows, f_next, features, targets)."""
        c = self.config
        w = c.window
        stocks = self.pairs[idx, 0]
        dates = self.pairs[idx, 1]
        cols = []
        if c.include_stock_history:
            stock_wins = np.stack([
                self.returns[t - w:t, i] for i, t in zip(stocks, dates)
            ])
            cols.append(stock_wins[:, :, None])
        if c.include_factor_history:
            factor_wins = np.stack([self.factors[t - w:t] for t in dates])
            cols.append(factor_wins)
        windows = None
        if cols:
            windows = torch.as_tensor(np.concatenate(cols, axis=2), dtype=DTYPE)
        f_next = torch.as_tensor(self.factors[dates], dtype=DTYPE)
        feats = None
        if c.feature_dim and self.features is not None:
            feats = torch.as_tensor(
                np.stack([self.features[t, i] for i, t in zip(stocks, dates)]),
                dtype=DTYPE,
            )
        targets = torch.as_tensor(self.returns[dates, stocks], dtype=DTYPE)
        return windows, f_next, feats, targets


def _dataset_nll(model, dataset, batch_size=512, limit=None):
    model.eval()
    n = len(dataset) if limit is None else min(limit, len(dataset))
    total = 0.0
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            idx = np.arange(lo, min(lo + batch_size, n))
            windows, f_next, feats, targets = dataset.batch(idx)
            summary = model.summarize_history(windows)
            conds, base = model.condition_from_summary(summary, f_next, feats)
            total += float(-model.log_prob(targets, conds, base).sum())
    return total / n


def train_stock_model(train_set: StockDataset, val_set: StockDataset,
                      config: StockFlowConfig, log=None):
    """Train the shared stock model by minibatch NLL descent.

    Minibatches sample uniformly over (stock, date) pairs with observed
    next-day factors (teacher forcing).  Validation NLL is checked every
    ``val_interval`` steps with early stopping; a non-finite loss aborts and
    returns the best checkpoint so far.
    """
    torch.manual_seed(config.seed)
    model = StockFlowModel(config)
    pairs = train_set.pairs
    target_std = float(np.std(train_set.returns[pairs[:, 1], pairs[:, 0]]))
    factor_std = np.std(train_set.factors[pairs[:, 1].min():
                                          pairs[:, 1].max() + 1], axis=0)
    feature_std = None
    if config.feature_dim and train_set.features is not None:
        feature_std = np.std(
            train_set.features.reshape(-1, config.feature_dim), axis=0)
    model.set_scales(target_std, factor_std, feature_std)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr,
                                  weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    best_state = copy.deepcopy(model.state_dict())
    best_val = np.inf
    bad_checks = 0
    curve = []
    running = []
    step = 0
    while step < config.max_steps:
        model.train()
        idx = rng.integers(0, len(train_set), size=config.batch_size)
        windows, f_next, feats, targets = train_set.batch(idx)
        optimizer.zero_grad()
        summary = model.summarize_history(windows)
        conds, base = model.condition_from_summary(summary, f_next, feats)
        loss = -model.log_prob(targets, conds, base).mean()
        if not torch.isfinite(loss):
            model.load_state_dict(best_state)
            if log:
                log(f"step {step}: non-finite loss, reverting to best checkpoint")
            break
        loss.backward()
        check_finite_grads(model)
        optimizer.step()
        running.append(loss.item())
        step += 1
        if step % config.val_interval == 0 or step == config.max_steps:
            val_nll = _dataset_nll(model, val_set)
            curve.append((step, float(np.mean(running)), val_nll))
            running = []
            if log:
                log(f"step {step}: train {curve[-1][1]:.4f}  val {val_nll:.4f}")
            if val_nll < best_val - 1e-6:
                best_val = val_nll
                best_state = copy.deepcopy(model.state_dict())
                bad_checks = 0
            else:
                bad_checks += 1
                if bad_checks > config.patience:
                    break
    model.load_state_dict(best_state)
    model.eval()
    return model, curve


def save_stock_model(path, model: StockFlowModel):
    from .nn import module_arrays, save_checkpoint

    save_checkpoint(path, module_arrays(model),
                    {"kind": "stockflow", "config": model.config.to_dict()})


def load_stock_model(path) -> StockFlowModel:
    from .nn import load_checkpoint, load_module_arrays

    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "stockflow":
        raise DataError(f"{path!r} is not a stock-model checkpoint")
    config = StockFlowConfig(**meta["config"])
    model = StockFlowModel(config)
    load_module_arrays(model, arrays)
    model.eval()
    return model
