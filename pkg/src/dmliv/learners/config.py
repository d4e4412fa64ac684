from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Any, Optional

FEEDFORWARD = "feedforward"
BOOSTED_TREES = "boosted_trees"


@dataclass(frozen=True)
class RegressorConfig:
    """Hyperparameters for every in-repo learner.

    Feedforward fields follow the AdamW setup (betas 0.9/0.999, eps 1e-8);
    tree fields follow least-squares boosting.  ``dropout_rate=None`` means
    ``1000 / (5000 + N)`` resolved at fit time.
    """

    kind: str = FEEDFORWARD
    layer_widths: tuple[int, ...] = (128, 64, 32)
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    dropout_rate: Optional[float] = None
    epochs: int = 100
    batch_size: int = 128
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    validation_fraction: float = 0.0
    patience: int = 10
    dtype: str = "float32"
    # boosted trees
    n_trees: int = 500
    min_leaf: int = 100
    max_depth: int = 3
    shrinkage: float = 0.1

    def __post_init__(self):
        if self.kind not in (FEEDFORWARD, BOOSTED_TREES):
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.kind == FEEDFORWARD:
            if not self.learning_rate > 0:
                raise ValueError("learning_rate must be > 0 for feedforward learners")
            if any(int(w) < 1 for w in self.layer_widths):
                raise ValueError("layer widths must be positive")
            if self.epochs < 1 or self.batch_size < 1:
                raise ValueError("epochs and batch_size must be positive")
        if self.kind == BOOSTED_TREES and self.n_trees < 1:
            raise ValueError("n_trees must be >= 1 for boosted trees")
        if self.weight_decay < 0 or (self.dropout_rate is not None and not 0 <= self.dropout_rate < 1):
            raise ValueError("weight_decay must be >= 0 and dropout in [0, 1)")
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def resolved_dropout(self, n: int) -> float:
        if self.dropout_rate is None:
            return 1000.0 / (5000.0 + n)
        return float(self.dropout_rate)

    def with_(self, **changes) -> "RegressorConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["layer_widths"] = list(d["layer_widths"])
        d["betas"] = list(d["betas"])
        d["config_class"] = type(self).__name__
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RegressorConfig":
        d = dict(d)
        name = d.pop("config_class", cls.__name__)
        target = DensityConfig if name == "DensityConfig" else RegressorConfig
        d["layer_widths"] = tuple(d["layer_widths"])
        d["betas"] = tuple(d["betas"])
        return target(**d)


@dataclass(frozen=True)
class DensityConfig(RegressorConfig):
    """Adds the mixture head: component count and the std floor (model units)."""

    n_components: int = 10
    std_floor: float = 1e-3

    def __post_init__(self):
        super().__post_init__()
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if not self.std_floor > 0:
            raise ValueError("std_floor must be > 0")


def config_field_names(cls=DensityConfig) -> list[str]:
    return [f.name for f in cls.__dataclass_fields__.values()]  # type: ignore[attr-defined]


__all__ = [
    "FEEDFORWARD",
    "BOOSTED_TREES",
    "RegressorConfig",
    "DensityConfig",
    "config_field_names",
]
