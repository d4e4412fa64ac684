"""Least-squares gradient boosting over CART trees.

Tree structure is grown by scikit-learn's ``DecisionTreeRegressor`` and
copied into flat arrays; prediction and serialization use those arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.tree import DecisionTreeRegressor

from .config import RegressorConfig
from .nets import check_xy


def feature_columns(x: np.ndarray) -> np.ndarray:
    """Column-major float32 copy of ``x``; sklearn splits on float32 features."""
    return np.ascontiguousarray(np.asarray(x, dtype=np.float32).T)


@dataclass
class FlatTree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @classmethod
    def from_sklearn(cls, tree: DecisionTreeRegressor) -> "FlatTree":
        t = tree.tree_
        feature = np.where(t.children_left == -1, -1, t.feature).astype(np.int64)
        return cls(
            feature=feature,
            threshold=t.threshold.astype(float),
            left=t.children_left.astype(np.int64),
            right=t.children_right.astype(np.int64),
            value=t.value[:, 0, 0].astype(float),
        )

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row."""
        return self.apply_columns(feature_columns(x))

    def apply_columns(self, cols: np.ndarray) -> np.ndarray:
        """``apply`` on the output of ``feature_columns``, shared across an ensemble."""
        n = cols.shape[1]
        flat, rows = cols.ravel(), np.arange(n)  # flat gather is cheaper than 2-D fancy indexing
        node = np.zeros(n, dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            go_left = flat[np.maximum(f, 0) * n + rows] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.value[self.apply(x)]

    def predict_columns(self, cols: np.ndarray) -> np.ndarray:
        return self.value[self.apply_columns(cols)]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "FlatTree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=float),
        )


def grow_tree(x, target, cfg: RegressorConfig, seed: int) -> FlatTree:
    tree = DecisionTreeRegressor(
        max_depth=cfg.max_depth,
        min_samples_leaf=cfg.min_leaf,
        random_state=seed,
    )
    tree.fit(x, target)
    return FlatTree.from_sklearn(tree)


class BoostedTrees:
    """``f(x) = init + shrinkage * sum_m tree_m(x)``.

    Each tree is fit to the current residuals, which makes the training MSE
    non-increasing in the number of trees.
    """

    def __init__(self, init: float, trees: list[FlatTree], cfg: RegressorConfig, trace=None):
        self.init = float(init)
        self.trees = trees
        self.cfg = cfg
        self.training_trace = list(trace or [])

    @classmethod
    def fit(cls, inputs, targets, cfg: RegressorConfig, seed: int = 0) -> "BoostedTrees":
        x, y = check_xy(inputs, targets)
        if x.shape[0] < 2:
            raise ValueError("need at least two rows to fit")
        init = float(y.mean())
        pred = np.full_like(y, init)
        trees, trace = [], [float(np.mean((y - pred) ** 2))]
        rng = np.random.default_rng(seed)
        for _ in range(cfg.n_trees):
            tree = grow_tree(x, y - pred, cfg, int(rng.integers(2**31 - 1)))
            pred = pred + cfg.shrinkage * tree.predict(x)
            trees.append(tree)
            trace.append(float(np.mean((y - pred) ** 2)))
        return cls(init, trees, cfg, trace)

    def predict(self, inputs) -> np.ndarray:
        x, _ = check_xy(inputs)
        cols, out = feature_columns(x), np.full(x.shape[0], self.init)
        for tree in self.trees:
            out += self.cfg.shrinkage * tree.predict_columns(cols)
        return out

    def staged_predict(self, inputs):
        x, _ = check_xy(inputs)
        cols, out = feature_columns(x), np.full(x.shape[0], self.init)
        yield out.copy()
        for tree in self.trees:
            out += self.cfg.shrinkage * tree.predict_columns(cols)
            yield out.copy()
