"""Supervised learners for nuisance estimation and stage-2 fitting."""

from __future__ import annotations

import json
from typing import Any

import numpy as np
import torch

from .config import BOOSTED_TREES, FEEDFORWARD, DensityConfig, RegressorConfig
from .counterfactual import CounterfactualModel, TreeCounterfactual, new_counterfactual_model
from .density import (
    ConditionalDensity,
    FixedMixture,
    GaussianRegressionDensity,
    MixtureNet,
    MixtureOfGaussians,
    sample_mixture,
)
from .nets import MLP, FeedForwardRegressor, torch_dtype
from .trees import BoostedTrees, FlatTree

__all__ = [
    "BOOSTED_TREES",
    "FEEDFORWARD",
    "RegressorConfig",
    "DensityConfig",
    "FeedForwardRegressor",
    "BoostedTrees",
    "ConditionalDensity",
    "MixtureOfGaussians",
    "GaussianRegressionDensity",
    "FixedMixture",
    "CounterfactualModel",
    "TreeCounterfactual",
    "fit_regressor",
    "fit_conditional_density",
    "sample_actions",
    "new_counterfactual_model",
    "to_blob",
    "from_blob",
    "dumps",
    "loads",
]

BLOB_FORMAT = "dmliv.model"
BLOB_VERSION = 1


def fit_regressor(inputs, targets, cfg: RegressorConfig, seed: int = 0):
    """Fit a regressor of the kind named by ``cfg.kind``."""
    if cfg.kind == BOOSTED_TREES:
        return BoostedTrees.fit(inputs, targets, cfg, seed=seed)
    return FeedForwardRegressor.fit(inputs, targets, cfg, seed=seed)


def fit_conditional_density(inputs, actions, cfg: DensityConfig, seed: int = 0) -> ConditionalDensity:
    """Conditional density of ``actions`` given ``inputs``.

    Feedforward configs give a mixture density network trained on the
    negative log-likelihood; tree configs give a boosted-tree location model
    with Gaussian residuals.
    """
    if not isinstance(cfg, DensityConfig):
        cfg = DensityConfig(**{k: v for k, v in cfg.to_dict().items() if k != "config_class"})
    if cfg.kind == BOOSTED_TREES:
        return GaussianRegressionDensity.fit(inputs, actions, cfg, seed=seed)
    return MixtureOfGaussians.fit(inputs, actions, cfg, seed=seed)


def sample_actions(model: ConditionalDensity, c, z, count: int, seed: int) -> np.ndarray:
    """``count`` i.i.d. draws from the fitted ``P(A | c, z)`` at a single point."""
    if count < 1:
        raise ValueError("count must be >= 1")
    x = np.concatenate([np.ravel(c), np.ravel(z)])[None, :]
    return model.sample(x, count, np.random.default_rng(seed))[0]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _state(module: torch.nn.Module) -> dict[str, Any]:
    return {
        name: {"shape": list(t.shape), "data": t.detach().double().reshape(-1).tolist()}
        for name, t in module.state_dict().items()
    }


def _load_state(module: torch.nn.Module, state: dict[str, Any]) -> None:
    dtype = module.out_mean.dtype if hasattr(module, "out_mean") else module.a_mean.dtype
    module.load_state_dict(
        {k: torch.tensor(v["data"], dtype=dtype).reshape(v["shape"]) for k, v in state.items()}
    )
    module.eval()


def _mlp_arch(net: MLP) -> dict[str, Any]:
    linears = [m for m in net.body if isinstance(m, torch.nn.Linear)]
    drops = [m.p for m in net.body if isinstance(m, torch.nn.Dropout)]
    return {
        "in_dim": linears[0].in_features if linears else net.head.in_features,
        "widths": [m.out_features for m in linears],
        "dropout": drops[0] if drops else 0.0,
    }


def to_blob(model) -> dict[str, Any]:
    """JSON-ready description of a fitted model, tagged with format and version."""
    blob: dict[str, Any] = {"format": BLOB_FORMAT, "version": BLOB_VERSION, "class": type(model).__name__}
    if isinstance(model, (FeedForwardRegressor, CounterfactualModel)):
        blob.update(config=model.cfg.to_dict(), arch=_mlp_arch(model.net), state=_state(model.net))
        if isinstance(model, CounterfactualModel):
            blob["context_dim"] = model.context_dim
    elif isinstance(model, MixtureOfGaussians):
        arch = _mlp_arch(model.net)
        arch.update(k=model.cfg.n_components, std_floor=model.net.std_floor)
        blob.update(config=model.cfg.to_dict(), arch=arch, state=_state(model.net), degenerate=model.degenerate)
    elif isinstance(model, BoostedTrees):
        blob.update(config=model.cfg.to_dict(), init=model.init, trees=[t.to_dict() for t in model.trees])
    elif isinstance(model, GaussianRegressionDensity):
        blob.update(mean_model=to_blob(model.mean_model), sigma=model.sigma)
    elif isinstance(model, TreeCounterfactual):
        blob.update(
            init=model.init,
            trees=[t.to_dict() for t in model.trees],
            leaf_values=[v.tolist() for v in model.leaf_values],
            context_dim=model.context_dim,
        )
    elif isinstance(model, FixedMixture):
        blob.update(weights=model.weights.tolist(), means=model.means.tolist(), stds=model.stds.tolist())
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return blob


def from_blob(blob: dict[str, Any]):
    if blob.get("format") != BLOB_FORMAT:
        raise ValueError("not a dmliv model blob")
    if blob.get("version") != BLOB_VERSION:
        raise ValueError(f"unsupported blob version {blob.get('version')}")
    cls = blob["class"]
    if cls in ("FeedForwardRegressor", "CounterfactualModel"):
        cfg = RegressorConfig.from_dict(blob["config"])
        arch = blob["arch"]
        net = MLP(arch["in_dim"], arch["widths"], arch["dropout"]).to(torch_dtype(cfg.dtype))
        _load_state(net, blob["state"])
        if cls == "CounterfactualModel":
            return CounterfactualModel(net, cfg, blob["context_dim"])
        return FeedForwardRegressor(net, cfg)
    if cls == "MixtureOfGaussians":
        cfg = RegressorConfig.from_dict(blob["config"])
        arch = blob["arch"]
        net = MixtureNet(arch["in_dim"], arch["widths"], arch["dropout"], arch["k"], arch["std_floor"])
        net = net.to(torch_dtype(cfg.dtype))
        _load_state(net, blob["state"])
        return MixtureOfGaussians(net, cfg, degenerate=blob.get("degenerate", False))
    if cls == "BoostedTrees":
        cfg = RegressorConfig.from_dict(blob["config"])
        return BoostedTrees(blob["init"], [FlatTree.from_dict(t) for t in blob["trees"]], cfg)
    if cls == "GaussianRegressionDensity":
        return GaussianRegressionDensity(from_blob(blob["mean_model"]), blob["sigma"], std_floor=1e-300)
    if cls == "TreeCounterfactual":
        return TreeCounterfactual(
            blob["init"],
            [FlatTree.from_dict(t) for t in blob["trees"]],
            [np.asarray(v, dtype=float) for v in blob["leaf_values"]],
            blob["context_dim"],
        )
    if cls == "FixedMixture":
        return FixedMixture(blob["weights"], blob["means"], blob["stds"])
    raise ValueError(f"unknown model class {cls!r}")


def dumps(model) -> str:
    return json.dumps(to_blob(model))


def loads(text: str):
    return from_blob(json.loads(text))
