"""Conditional densities of a scalar action given ``(c, z)``.

Every density exposes its per-row Gaussian mixture parameters through
``mixture_params``; sampling, log-density and means are derived from them,
so learned models and closed-form oracles are interchangeable downstream.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import DensityConfig
from .nets import Normalizer, _as_tensor, check_xy, glorot_uniform_, seeded, torch_dtype, train_minibatch, trunk

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def sample_mixture(weights, means, stds, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` actions per row from row-wise mixtures -> ``(n, count)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    weights = np.asarray(weights, dtype=float)
    n, k = weights.shape
    if k == 1:
        comp = np.zeros((n, count), dtype=np.intp)
    else:
        cdf = np.cumsum(weights, axis=1)
        cdf[:, -1] = 1.0
        u = rng.random((n, count))
        comp = (u[:, :, None] > cdf[:, None, :]).sum(axis=2)
    rows = np.arange(n)[:, None]
    mu = np.asarray(means)[rows, comp]
    sd = np.asarray(stds)[rows, comp]
    return mu + sd * rng.standard_normal((n, count))


def mixture_logpdf(weights, means, stds, a) -> np.ndarray:
    a = np.reshape(a, (-1, 1))
    z = (a - means) / stds
    comp = np.log(np.maximum(weights, 1e-300)) - 0.5 * z**2 - np.log(stds) - LOG_SQRT_2PI
    top = comp.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(comp - top).sum(axis=1, keepdims=True)))[:, 0]


class ConditionalDensity:
    """Base class: subclasses implement ``mixture_params(inputs)``."""

    def mixture_params(self, inputs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def log_density(self, inputs, actions) -> np.ndarray:
        return mixture_logpdf(*self.mixture_params(inputs), actions)

    def mean(self, inputs) -> np.ndarray:
        w, mu, _ = self.mixture_params(inputs)
        return np.sum(w * mu, axis=1)

    def sample(self, inputs, count: int, rng: np.random.Generator) -> np.ndarray:
        return sample_mixture(*self.mixture_params(inputs), count, rng)

    def nll(self, inputs, actions) -> float:
        return float(-np.mean(self.log_density(inputs, actions)))


class FixedMixture(ConditionalDensity):
    """The same mixture for every input row (tests and baselines)."""

    def __init__(self, weights, means, stds):
        self.weights = np.asarray(weights, dtype=float).reshape(-1)
        self.means = np.asarray(means, dtype=float).reshape(-1)
        self.stds = np.asarray(stds, dtype=float).reshape(-1)

    def mixture_params(self, inputs):
        n = np.atleast_2d(np.asarray(inputs, dtype=float)).shape[0]
        tile = lambda v: np.broadcast_to(v, (n, v.size)).copy()  # noqa: E731
        return tile(self.weights), tile(self.means), tile(self.stds)


class MixtureNet(nn.Module):
    """Trunk with three heads: mixture logits, means and stds."""

    def __init__(self, in_dim: int, widths, dropout: float, k: int, std_floor: float):
        super().__init__()
        self.norm = Normalizer(in_dim)
        self.body, last = trunk(in_dim, widths, dropout)
        self.logits = nn.Linear(last, k)
        self.mu = nn.Linear(last, k)
        self.raw_sd = nn.Linear(last, k)
        self.std_floor = std_floor
        self.register_buffer("a_mean", torch.zeros(()))
        self.register_buffer("a_std", torch.ones(()))

    def forward(self, x):
        """Parameters in normalized action units: (log_w, mu, sd)."""
        h = self.body(self.norm(x))
        log_w = F.log_softmax(self.logits(h), dim=-1)
        sd = F.softplus(self.raw_sd(h)) + self.std_floor
        return log_w, self.mu(h), sd


def mixture_nll(params, a):
    log_w, mu, sd = params
    z = (a[:, None] - mu) / sd
    comp = log_w - 0.5 * z**2 - torch.log(sd) - LOG_SQRT_2PI
    return -torch.logsumexp(comp, dim=1).mean()


class MixtureOfGaussians(ConditionalDensity):
    """Mixture density network for ``P(A | c, z)``.

    ``degenerate`` is set when the training actions have zero variance; the
    fitted stds then sit at ``std_floor``.
    """

    def __init__(self, net: MixtureNet, cfg: DensityConfig, trace=None, degenerate: bool = False):
        self.net = net
        self.cfg = cfg
        self.training_trace = list(trace or [])
        self.degenerate = degenerate

    @property
    def n_components(self) -> int:
        return self.cfg.n_components

    @classmethod
    def fit(cls, inputs, actions, cfg: DensityConfig, seed: int = 0) -> "MixtureOfGaussians":
        x, a = check_xy(inputs, actions)
        if x.shape[0] < cfg.n_components:
            raise ValueError("need at least n_components rows")
        dtype = torch_dtype(cfg.dtype)
        with seeded(seed):
            net = MixtureNet(
                x.shape[1], cfg.layer_widths, cfg.resolved_dropout(x.shape[0]), cfg.n_components, cfg.std_floor
            ).to(dtype)
            glorot_uniform_(net)
        net.norm.set_stats(x)
        a_std = float(a.std())
        degenerate = not a_std > 0
        if degenerate:
            warnings.warn("actions have zero variance; mixture stds clamp at std_floor", RuntimeWarning)
        net.a_mean.fill_(float(a.mean()))
        net.a_std.fill_(a_std if not degenerate else 1.0)
        a_norm = (a - float(net.a_mean)) / float(net.a_std)
        trace = train_minibatch(net, mixture_nll, x, a_norm, cfg, seed)
        return cls(net, cfg, trace, degenerate)

    def mixture_params(self, inputs):
        x, _ = check_xy(inputs)
        self.net.eval()
        with torch.no_grad():
            log_w, mu, sd = self.net(_as_tensor(x, self.net.a_mean.dtype))
        m, s = float(self.net.a_mean), float(self.net.a_std)
        w = torch.exp(log_w.double()).numpy()
        w /= w.sum(axis=1, keepdims=True)
        return w, mu.double().numpy() * s + m, sd.double().numpy() * s


class GaussianRegressionDensity(ConditionalDensity):
    """``A | x ~ N(mean_model(x), sigma^2)`` with a pooled residual std.

    Used with tree regressors, which have no natural density head.
    """

    def __init__(self, mean_model, sigma: float, std_floor: float = 1e-3):
        self.mean_model = mean_model
        self.sigma = max(float(sigma), std_floor)

    @classmethod
    def fit(cls, inputs, actions, cfg: DensityConfig, seed: int = 0) -> "GaussianRegressionDensity":
        from . import fit_regressor

        x, a = check_xy(inputs, actions)
        model = fit_regressor(x, a, cfg, seed=seed)
        resid = a - model.predict(x)
        return cls(model, float(np.sqrt(np.mean(resid**2))), cfg.std_floor)

    def mixture_params(self, inputs):
        mu = self.mean_model.predict(inputs)
        n = mu.shape[0]
        return np.ones((n, 1)), mu[:, None], np.full((n, 1), self.sigma)
