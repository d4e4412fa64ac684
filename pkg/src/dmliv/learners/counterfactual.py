"""Parameterized counterfactual prediction functions ``h(c, a)``."""

from __future__ import annotations

import copy

import numpy as np
import torch
from torch.func import functional_call, jacrev, vmap
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from .config import BOOSTED_TREES, RegressorConfig
from .nets import MLP, _as_tensor, glorot_uniform_, seeded, torch_dtype
from .trees import FlatTree, feature_columns


def _ca(context, action) -> np.ndarray:
    c = np.atleast_2d(np.asarray(context, dtype=float))
    a = np.asarray(action, dtype=float).reshape(c.shape[0], -1)
    return np.hstack([c, a])


class CounterfactualModel:
    """``h_theta(c, a)`` as an MLP over the concatenated ``(c, a)`` input.

    ``theta`` is the flat vector of trainable weights in ``parameters()``
    order.  The input normalization is fixed at construction and is not part
    of ``theta``.
    """

    def __init__(self, net: MLP, cfg: RegressorConfig, context_dim: int):
        self.net = net
        self.cfg = cfg
        self.context_dim = context_dim

    @property
    def dtype(self) -> torch.dtype:
        return self.net.out_mean.dtype

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    @property
    def theta(self) -> np.ndarray:
        return parameters_to_vector(self.net.parameters()).detach().double().numpy()

    @theta.setter
    def theta(self, value) -> None:
        vec = torch.as_tensor(np.asarray(value, dtype=float), dtype=self.dtype)
        with torch.no_grad():
            vector_to_parameters(vec, self.net.parameters())

    def copy(self) -> "CounterfactualModel":
        return CounterfactualModel(copy.deepcopy(self.net), self.cfg, self.context_dim)

    def to(self, dtype: str) -> "CounterfactualModel":
        twin = self.copy()
        twin.net = twin.net.to(torch_dtype(dtype))
        return twin

    def forward(self, ca: torch.Tensor) -> torch.Tensor:
        return self.net(ca)

    def value(self, context, action) -> np.ndarray:
        self.net.eval()
        with torch.no_grad():
            out = self.net(_as_tensor(_ca(context, action), self.dtype))
        return out.double().numpy()

    def grad_theta(self, context, action) -> np.ndarray:
        """Jacobian ``d h_theta(c_i, a_i) / d theta`` with shape ``(n, n_params)``."""
        self.net.eval()
        names = [n for n, _ in self.net.named_parameters()]
        params = {n: p.detach() for n, p in self.net.named_parameters()}
        buffers = {n: b for n, b in self.net.named_buffers()}

        def h_single(p, x):
            return functional_call(self.net, (p, buffers), (x[None, :],))[0]

        x = _as_tensor(_ca(context, action), self.dtype)
        jac = vmap(jacrev(h_single), in_dims=(None, 0))(params, x)
        flat = [jac[n].reshape(x.shape[0], -1) for n in names]
        return torch.cat(flat, dim=1).double().numpy()


def build_counterfactual_net(cfg: RegressorConfig, context_dim: int, action_dim: int, n: int, seed: int) -> MLP:
    with seeded(seed):
        net = MLP(context_dim + action_dim, cfg.layer_widths, cfg.resolved_dropout(n)).to(torch_dtype(cfg.dtype))
        glorot_uniform_(net)
    return net


class TreeCounterfactual:
    """Additive tree ensemble over ``(c, a)`` built by functional boosting."""

    def __init__(self, init: float, trees: list[FlatTree], leaf_values: list[np.ndarray], context_dim: int):
        self.init = float(init)
        self.trees = trees
        self.leaf_values = leaf_values
        self.context_dim = context_dim

    def value(self, context, action) -> np.ndarray:
        x = _ca(context, action)
        cols, out = feature_columns(x), np.full(x.shape[0], self.init)
        for tree, vals in zip(self.trees, self.leaf_values):
            out += vals[tree.apply_columns(cols)]
        return out


def new_counterfactual_model(
    cfg: RegressorConfig,
    context_dim: int,
    action_dim: int = 1,
    seed: int = 0,
    n: int = 5000,
    input_sample: np.ndarray | None = None,
) -> CounterfactualModel:
    """Freshly initialized ``h_theta`` (Glorot-uniform weights, zero biases).

    ``input_sample`` (rows of ``(c, a)``) sets the fixed input normalization;
    ``n`` resolves the data-dependent dropout default.
    """
    if cfg.kind == BOOSTED_TREES:
        raise ValueError(
            "gradient-based stage 2 needs a differentiable model; "
            "boosted-tree stage 2 is fit with fit_stage2_trees"
        )
    net = build_counterfactual_net(cfg, context_dim, action_dim, n, seed)
    if input_sample is not None:
        net.norm.set_stats(np.asarray(input_sample, dtype=float))
    return CounterfactualModel(net, cfg, context_dim)
