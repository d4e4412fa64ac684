"""Feed-forward networks trained with AdamW."""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .config import RegressorConfig

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def torch_dtype(name: str) -> torch.dtype:
    return _DTYPES[name]


@contextmanager
def seeded(seed: int):
    """Run a block under a private torch RNG state (dropout, init, shuffles)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) % (2**63 - 1))
        yield


def glorot_uniform_(module: nn.Module) -> None:
    """Weights ~ U(+-sqrt(6 / (fan_in + fan_out))), biases zero."""
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            bound = math.sqrt(6.0 / (layer.in_features + layer.out_features))
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound)
                layer.bias.zero_()


class Normalizer(nn.Module):
    """Fixed affine input map ``(x - mean) / std`` stored as buffers."""

    def __init__(self, dim: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("std", torch.ones(dim))

    def set_stats(self, x: np.ndarray) -> None:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        self.mean.copy_(torch.as_tensor(mean, dtype=self.mean.dtype))
        self.std.copy_(torch.as_tensor(std, dtype=self.std.dtype))

    def forward(self, x):
        return (x - self.mean) / self.std


def trunk(in_dim: int, widths, dropout: float) -> tuple[nn.Sequential, int]:
    """``FC + ReLU + Dropout`` blocks; returns the module and its output width."""
    layers: list[nn.Module] = []
    prev = in_dim
    for w in widths:
        layers += [nn.Linear(prev, w), nn.ReLU()]
        if dropout > 0:
            layers.append(nn.Dropout(dropout))
        prev = w
    return nn.Sequential(*layers), prev


class MLP(nn.Module):
    """Normalized inputs -> hidden trunk -> linear scalar output."""

    def __init__(self, in_dim: int, widths, dropout: float):
        super().__init__()
        self.norm = Normalizer(in_dim)
        self.body, last = trunk(in_dim, widths, dropout)
        self.head = nn.Linear(last, 1)
        self.register_buffer("out_mean", torch.zeros(()))
        self.register_buffer("out_std", torch.ones(()))

    def forward(self, x):
        return self.head(self.body(self.norm(x)))[..., 0] * self.out_std + self.out_mean


def make_optimizer(params, cfg: RegressorConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        params,
        lr=cfg.learning_rate,
        betas=cfg.betas,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )


def _as_tensor(x, dtype):
    return torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)


def train_minibatch(
    module: nn.Module,
    loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    x: np.ndarray,
    y: np.ndarray,
    cfg: RegressorConfig,
    seed: int,
) -> list[float]:
    """Minimize ``loss_fn(module(x_batch), y_batch)`` with AdamW.

    Returns the mean training loss of every epoch.  With
    ``cfg.validation_fraction > 0`` a random slice is held out, training
    stops after ``cfg.patience`` epochs without validation improvement and
    the best weights are restored.
    """
    dtype = torch_dtype(cfg.dtype)
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    idx = rng.permutation(n)
    n_val = int(round(cfg.validation_fraction * n)) if cfg.validation_fraction > 0 else 0
    val_idx, tr_idx = idx[:n_val], idx[n_val:]
    xt, yt = _as_tensor(x[tr_idx], dtype), _as_tensor(y[tr_idx], dtype)
    xv, yv = _as_tensor(x[val_idx], dtype), _as_tensor(y[val_idx], dtype)
    n_tr = xt.shape[0]
    bs = min(cfg.batch_size, n_tr)
    opt = make_optimizer(module.parameters(), cfg)
    trace: list[float] = []
    best, best_state, stale = math.inf, None, 0
    with seeded(seed):
        for _ in range(cfg.epochs):
            module.train()
            perm = torch.as_tensor(rng.permutation(n_tr))
            total = 0.0
            for start in range(0, n_tr, bs):
                b = perm[start : start + bs]
                opt.zero_grad()
                loss = loss_fn(module(xt[b]), yt[b])
                loss.backward()
                opt.step()
                total += loss.item() * b.shape[0]
            epoch_loss = total / n_tr
            if not math.isfinite(epoch_loss):
                raise FloatingPointError(f"non-finite training loss after {len(trace)} epochs")
            trace.append(epoch_loss)
            if n_val:
                module.eval()
                with torch.no_grad():
                    v = float(loss_fn(module(xv), yv))
                if v < best - 1e-12:
                    best, stale = v, 0
                    best_state = {k: t.detach().clone() for k, t in module.state_dict().items()}
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
    if best_state is not None:
        module.load_state_dict(best_state)
    module.eval()
    return trace


def mse_loss(pred, target):
    return torch.mean((pred - target) ** 2)


def check_xy(inputs, targets=None) -> tuple[np.ndarray, Optional[np.ndarray]]:
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("inputs must be a matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs contain NaN or infinite values")
    if targets is None:
        return x, None
    y = np.asarray(targets, dtype=float).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {x.shape[0]} input rows vs {y.shape[0]} targets")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain NaN or infinite values")
    return x, y


class FeedForwardRegressor:
    """Fitted MLP regressor; ``predict`` runs in eval mode (no dropout)."""

    def __init__(self, net: MLP, cfg: RegressorConfig, trace: list[float] | None = None):
        self.net = net
        self.cfg = cfg
        self.training_trace = list(trace or [])

    @classmethod
    def fit(cls, inputs, targets, cfg: RegressorConfig, seed: int = 0) -> "FeedForwardRegressor":
        x, y = check_xy(inputs, targets)
        if x.shape[0] < 2:
            raise ValueError("need at least two rows to fit")
        dtype = torch_dtype(cfg.dtype)
        with seeded(seed):
            net = MLP(x.shape[1], cfg.layer_widths, cfg.resolved_dropout(x.shape[0])).to(dtype)
            glorot_uniform_(net)
        net.norm.set_stats(x)
        y_std = float(y.std())
        net.out_mean.fill_(float(y.mean()))
        # a zero scale pins a constant target exactly
        net.out_std.fill_(y_std)
        trace = train_minibatch(net, mse_loss, x, y, cfg, seed)
        return cls(net, cfg, trace)

    def predict(self, inputs) -> np.ndarray:
        x, _ = check_xy(inputs)
        self.net.eval()
        with torch.no_grad():
            out = self.net(_as_tensor(x, next(self.net.parameters()).dtype))
        return out.double().numpy()
