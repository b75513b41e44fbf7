"""Differentiable-computation substrate on top of PyTorch.

Provides the layers the generative models are built from (dense stacks, a
bidirectional-then-unidirectional LSTM summarizer, spectrally normalized
linear maps), a decoupled-weight-decay Adam step, a finite-difference
gradient checker, differentiable NIG / normal log-densities, and a
self-describing checkpoint container.

Everything runs in float64 on CPU; forward passes are deterministic given
parameters, inputs and seeds.
"""

from __future__ import annotations

import hashlib
import io
import json
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import NumericalError, ParameterError

DTYPE = torch.float64

__all__ = [
    "MLP",
    "SequenceEncoder",
    "SpectralLinear",
    "spectral_normalize",
    "adam_step",
    "grad_check",
    "GradCheckReport",
    "log_bessel_k1",
    "nig_log_prob",
    "normal_log_prob",
    "logmeanexp",
    "set_seed",
    "save_checkpoint",
    "load_checkpoint",
    "config_hash",
]


def set_seed(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


# ---------------------------------------------------------------------------
# layers


class MLP(nn.Module):
    """Stack of Linear layers with a configurable activation and dropout.

    Dropout is applied after each hidden activation and only when the module
    is in training mode; survivors are scaled by 1/(1-rate).
    """

    def __init__(self, in_dim, hidden_dims, out_dim, activation="relu",
                 dropout=0.0, final_activation=False):
        super().__init__()
        dims = [in_dim] + list(hidden_dims) + [out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], dtype=DTYPE) for i in range(len(dims) - 1)
        )
        self.activation = _resolve_activation(activation)
        self.dropout = nn.Dropout(dropout)
        self.final_activation = final_activation

    def forward(self, x):
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_activation:
                x = self.activation(x)
                x = self.dropout(x)
        return x


def _resolve_activation(name):
    table = {
        "relu": torch.relu,
        "tanh": torch.tanh,
        "elu": F.elu,
        "identity": lambda t: t,
    }
    if name not in table:
        raise ParameterError(f"unknown activation {name!r}")
    return table[name]


class SequenceEncoder(nn.Module):
    """Per-step MLP followed by two LSTM layers, the first bidirectional.

    Summarizes a (batch, time, features) tensor into the final-step hidden
    state of the second LSTM.  The bidirectional outputs of the first layer
    are concatenated before the second layer sees them.
    """

    def __init__(self, in_dim, hidden, dropout=0.0, first_bidirectional=True):
        super().__init__()
        self.embed = nn.Linear(in_dim, hidden, dtype=DTYPE)
        self.lstm1 = nn.LSTM(
            hidden, hidden, batch_first=True,
            bidirectional=first_bidirectional, dtype=DTYPE,
        )
        lstm2_in = hidden * (2 if first_bidirectional else 1)
        self.lstm2 = nn.LSTM(lstm2_in, hidden, batch_first=True, dtype=DTYPE)
        self.dropout = nn.Dropout(dropout)
        self.hidden = hidden

    def forward(self, seq):
        if seq.ndim != 3:
            raise ParameterError(f"expected (batch, time, feat), got {tuple(seq.shape)}")
        h = self.dropout(torch.relu(self.embed(seq)))
        h, _ = self.lstm1(h)
        h = self.dropout(h)
        h, _ = self.lstm2(h)
        return h[:, -1, :]


def spectral_normalize(weight, coeff, n_iter=20):
    """Rescale a matrix so its largest singular value is at most ``coeff``.

    Power iteration estimates sigma_max; if it exceeds ``coeff`` the matrix
    is scaled by coeff/sigma_max, otherwise returned unchanged.  Accepts
    numpy arrays or torch tensors and returns the same kind.
    """
    if not 0.0 < coeff < 1.0:
        raise ParameterError(f"coeff must be in (0,1), got {coeff}")
    if n_iter < 5:
        raise ParameterError("power iteration needs at least 5 steps")
    is_torch = isinstance(weight, torch.Tensor)
    w = weight.detach().cpu().numpy() if is_torch else np.asarray(weight, dtype=float)
    sigma = _power_iteration_sigma(w, n_iter)
    if sigma > coeff:
        w = w * (coeff / sigma)
    if is_torch:
        return torch.as_tensor(w, dtype=weight.dtype)
    return w


def _power_iteration_sigma(w, n_iter):
    rng = np.random.default_rng(0)
    u = rng.standard_normal(w.shape[0])
    u /= np.linalg.norm(u)
    for _ in range(n_iter):
        v = w.T @ u
        v /= max(np.linalg.norm(v), 1e-30)
        u = w @ v
        u /= max(np.linalg.norm(u), 1e-30)
    return float(u @ w @ v)


class SpectralLinear(nn.Module):
    """Linear layer whose weight is spectrally rescaled on every forward.

    The persistent power-iteration vector is refreshed (5 steps) at each
    training-mode forward, so the Lipschitz bound tracks the weights as they
    move.  In eval mode the stored vector is used without mutation, which
    keeps the layer a pure function of its state; forward and fixed-point
    inversion then see the identical map.  The rescale factor
    min(1, coeff/sigma) keeps sigma_max <= coeff.
    """

    def __init__(self, in_dim, out_dim, coeff=0.97, n_power_iterations=5):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim, dtype=DTYPE)
        self.coeff = coeff
        self.n_power_iterations = n_power_iterations
        u = torch.randn(out_dim, dtype=DTYPE)
        u = u / u.norm()
        with torch.no_grad():
            for _ in range(50):
                v = F.normalize(self.linear.weight.t() @ u, dim=0, eps=1e-30)
                u = F.normalize(self.linear.weight @ v, dim=0, eps=1e-30)
        self.register_buffer("u", u)

    def forward(self, x):
        w = self.linear.weight
        if self.training:
            with torch.no_grad():
                u = self.u
                for _ in range(self.n_power_iterations):
                    v = F.normalize(w.t() @ u, dim=0, eps=1e-30)
                    u = F.normalize(w @ v, dim=0, eps=1e-30)
                self.u.copy_(u)
        u = self.u
        v = F.normalize((w.t() @ u).detach(), dim=0, eps=1e-30)
        sigma = torch.dot(u, w @ v)
        scale = torch.clamp(self.coeff / sigma, max=1.0)
        return F.linear(x, w * scale, self.linear.bias)


# ---------------------------------------------------------------------------
# optimization


def adam_step(params, grads, lr, weight_decay, state, beta1=0.9, beta2=0.999,
              eps=1e-8):
    """One Adam update with decoupled weight decay, in place.

    ``params``/``grads`` are dicts of same-shaped arrays or tensors; ``state``
    is a dict that starts empty and carries the moment estimates and step
    counter.  Raises NumericalError on non-finite gradients without touching
    the parameters.
    """
    for name, g in grads.items():
        g = _as_array(g)
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name!r}")
    if not state:
        state["step"] = 0
        state["m"] = {k: np.zeros_like(_as_array(v)) for k, v in params.items()}
        state["v"] = {k: np.zeros_like(_as_array(v)) for k, v in params.items()}
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = _as_array(grads[name])
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g**2
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        arr = _as_array(p)
        arr -= update
        if weight_decay:
            arr -= lr * weight_decay * arr
    return params, state


def _as_array(x):
    if isinstance(x, torch.Tensor):
        return x.detach().numpy()
    return np.asarray(x)


class GradCheckReport:
    def __init__(self, max_rel_error, per_param, tol):
        self.max_rel_error = max_rel_error
        self.per_param = per_param
        self.tol = tol
        self.passed = max_rel_error < tol

    def __repr__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"GradCheckReport({status}, max_rel_error="
                f"{self.max_rel_error:.3e}, tol={self.tol:g})")


def grad_check(loss_fn, params, tol=1e-3, h=1e-4, max_coords=None, seed=0):
    """Compare autograd gradients against central finite differences.

    ``loss_fn(params) -> scalar tensor`` must be deterministic (dropout off,
    any sampling noise fixed).  ``params`` is a dict of tensors with
    ``requires_grad=True``.  Relative error uses a symmetric denominator with
    an absolute floor so zero-gradient coordinates compare cleanly.
    """
    loss = loss_fn(params)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    analytic = {
        k: (g if g is not None else torch.zeros_like(p))
        for (k, p), g in zip(params.items(), grads)
    }
    rng = np.random.default_rng(seed)
    per_param = {}
    worst = 0.0
    for name, p in params.items():
        flat = p.detach().reshape(-1)
        n = flat.numel()
        idx = np.arange(n)
        if max_coords is not None and n > max_coords:
            idx = rng.choice(n, size=max_coords, replace=False)
        errs = []
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
            up = loss_fn(params).item()
            with torch.no_grad():
                flat[i] = orig - h
            down = loss_fn(params).item()
            with torch.no_grad():
                flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            exact = analytic[name].reshape(-1)[i].item()
            denom = max(abs(numeric) + abs(exact), 1e-6)
            errs.append(abs(numeric - exact) / denom)
        per_param[name] = max(errs) if errs else 0.0
        worst = max(worst, per_param[name])
    return GradCheckReport(worst, per_param, tol)


def check_finite_grads(module):
    for name, p in module.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient in {name!r}")


# ---------------------------------------------------------------------------
# differentiable densities


class _LogBesselK1(torch.autograd.Function):
    """log K1(x) with the derivative -(K0(x)/K1(x) + 1/x), in scaled form."""

    @staticmethod
    def forward(ctx, x):
        k1e_x = torch.special.scaled_modified_bessel_k1(x)
        ctx.save_for_backward(x, k1e_x)
        return torch.log(k1e_x) - x

    @staticmethod
    def backward(ctx, grad_out):
        x, k1e_x = ctx.saved_tensors
        k0e_x = torch.special.scaled_modified_bessel_k0(x)
        return grad_out * (-(k0e_x / k1e_x) - 1.0 / x)


def log_bessel_k1(x):
    return _LogBesselK1.apply(x)


def nig_log_prob(x, mu, delta, gamma, beta):
    """Differentiable NIG log-density in the (mu, delta, gamma, beta) form.

    gamma = sqrt(alpha^2 - beta^2) is the positive head output, so
    alpha = sqrt(gamma^2 + beta^2) is always a valid tail parameter.
    """
    alpha = torch.sqrt(gamma**2 + beta**2)
    dev = x - mu
    s = torch.sqrt(delta**2 + dev**2)
    return (
        torch.log(alpha)
        + torch.log(delta)
        + log_bessel_k1(alpha * s)
        - math.log(math.pi)
        - torch.log(s)
        + delta * gamma
        + beta * dev
    )


def normal_log_prob(x, mu, sigma):
    return -0.5 * math.log(2.0 * math.pi) - torch.log(sigma) \
        - 0.5 * ((x - mu) / sigma) ** 2


def logmeanexp(x, dim=-1):
    """log(mean(exp(x))) along ``dim``, stabilized by max subtraction."""
    if isinstance(x, torch.Tensor):
        m = torch.amax(x, dim=dim, keepdim=True)
        return (m + torch.log(torch.mean(torch.exp(x - m), dim=dim,
                                         keepdim=True))).squeeze(dim)
    x = np.asarray(x, dtype=float)
    m = np.max(x, axis=dim, keepdims=True)
    return np.squeeze(m + np.log(np.mean(np.exp(x - m), axis=dim,
                                         keepdims=True)), axis=dim)


# ---------------------------------------------------------------------------
# checkpoint container


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(path, arrays: dict, meta: dict):
    """Persist named arrays plus JSON metadata in one npz container."""
    payload = {}
    for name, arr in arrays.items():
        payload[f"arr::{name}"] = np.asarray(arr)
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta, default=str).encode(), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **payload)


def load_checkpoint(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {
            key[5:]: data[key] for key in data.files if key.startswith("arr::")
        }
    return arrays, meta


def module_arrays(module: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict):
    state = {k: torch.as_tensor(v) for k, v in arrays.items()}
    module.load_state_dict(state)


def save_module(path, module: nn.Module, meta: dict):
    save_checkpoint(path, module_arrays(module), meta)


def serialize_module(module: nn.Module, meta: dict) -> bytes:
    buf = io.BytesIO()
    payload = {f"arr::{k}": v for k, v in module_arrays(module).items()}
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta, default=str).encode(), dtype=np.uint8
    )
    np.savez_compressed(buf, **payload)
    return buf.getvalue()
