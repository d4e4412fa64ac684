"""Greedy policies from fitted counterfactual models, and their evaluation.

A policy picks, for every context, the candidate action with the highest
predicted outcome.  Candidates are shared by all decisions.  Values are
scored against the closed-form ``h0`` of the generating model.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Optional

import numpy as np

from .datagen import DemandTruth, ObservationSet, true_h0_demand

__all__ = [
    "Policy",
    "RandomPolicy",
    "OraclePolicy",
    "PolicyEvaluation",
    "default_action_bounds",
    "optimal_action_demand",
    "optimal_action",
    "evaluate_policy",
    "DEFAULT_OOD_SHIFT",
    "ORACLE_GRID",
]

DEFAULT_OOD_SHIFT = 1.0
ORACLE_GRID = 4097
_CHUNK_ROWS = 1 << 20


def default_action_bounds(data: ObservationSet, margin: float = 0.1) -> tuple[float, float]:
    """Training action range widened by ``margin`` of its width on each side (model units)."""
    a = np.asarray(data.action[:, 0], dtype=float)
    lo, hi = float(a.min()), float(a.max())
    pad = margin * (hi - lo)
    return lo - pad, hi + pad


def _candidates(bounds, grid: int, sampling: str, seed) -> np.ndarray:
    lo, hi = bounds
    if sampling == "grid":
        return np.linspace(lo, hi, grid)
    if sampling == "uniform":
        return np.sort(np.random.default_rng(seed).uniform(lo, hi, grid))
    raise ValueError(f"unknown sampling {sampling!r}")


def _argmax_over(score_fn, context: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Per-row index of the best candidate; ``argmax`` returns the first, i.e. lowest, on ties."""
    n, g = context.shape[0], cand.size
    out = np.empty(n, dtype=np.int64)
    step = max(1, _CHUNK_ROWS // g)
    for start in range(0, n, step):
        c = context[start : start + step]
        vals = score_fn(np.repeat(c, g, axis=0), np.tile(cand, c.shape[0]))
        out[start : start + step] = np.asarray(vals).reshape(c.shape[0], g).argmax(axis=1)
    return out


@dataclass(frozen=True, eq=False)
class Policy:
    """Greedy policy ``pi(c) = argmax_a h_hat(c, a)`` over shared candidates.

    ``action_bounds`` are in model units.  With ``sampling="grid"`` the
    candidates are evenly spaced, including both bounds; ``"uniform"`` draws
    them once from ``seed``.  Ties go to the lowest action.
    """

    model: Any
    action_grid: int = 1024
    action_bounds: tuple[float, float] = (-3.0, 3.0)
    seed: int = 0
    sampling: str = "grid"

    def __post_init__(self):
        if self.action_grid < 2:
            raise ValueError("action_grid must be >= 2")
        lo, hi = self.action_bounds
        if not lo < hi:
            raise ValueError("action_bounds must satisfy low < high")
        object.__setattr__(
            self, "_cand", _candidates(self.action_bounds, self.action_grid, self.sampling, self.seed)
        )

    @property
    def candidates(self) -> np.ndarray:
        return self._cand

    def act_batch(self, context) -> np.ndarray:
        c = np.atleast_2d(np.asarray(context, dtype=float))
        return self._cand[_argmax_over(self.model.value, c, self._cand)]

    def act(self, c) -> float:
        return float(self.act_batch(np.atleast_2d(np.asarray(c, dtype=float)))[0])


@dataclass(frozen=True)
class RandomPolicy:
    """Uniform action in ``action_bounds``, drawn independently per context."""

    action_bounds: tuple[float, float]
    seed: int = 0

    def act_batch(self, context) -> np.ndarray:
        n = np.atleast_2d(context).shape[0]
        return np.random.default_rng(self.seed).uniform(*self.action_bounds, n)


@dataclass(frozen=True)
class OraclePolicy:
    """``argmax_a h0(c, a)`` over a dense grid of the bounds (model units)."""

    data: ObservationSet
    action_bounds: tuple[float, float]
    grid: int = ORACLE_GRID

    def act_batch(self, context) -> np.ndarray:
        raw_bounds = tuple(self.data.action_to_raw(np.asarray(self.action_bounds)))
        raw = optimal_action(self.data.truth, context, raw_bounds, self.grid)
        return self.data.action_to_model(raw)


def optimal_action(truth, context, bounds, grid: int = ORACLE_GRID) -> np.ndarray:
    """Oracle action per context (raw units) by brute force over ``grid`` points."""
    if truth is None:
        raise ValueError("no ground-truth handle; the oracle policy is undefined")
    c = np.atleast_2d(np.asarray(context, dtype=float))
    cand = np.linspace(bounds[0], bounds[1], grid)
    return cand[_argmax_over(truth.h0, c, cand)]


def optimal_action_demand(t, s, price_bounds) -> np.ndarray | float:
    """Best price for the demand model, searched over a 4097-point grid.

    ``h0`` is linear in price with slope ``s * psi(t) - 2``, so the result is
    always one of the two bounds (the lower one when the slope is zero).
    """
    t_arr, s_arr = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(s, dtype=float))
    lo, hi = float(price_bounds[0]), float(price_bounds[1])
    if not lo < hi:
        raise ValueError("price_bounds must satisfy low < high")
    cand = np.linspace(lo, hi, ORACLE_GRID)
    vals = true_h0_demand(t_arr.reshape(-1, 1), s_arr.reshape(-1, 1), cand[None, :])
    best = cand[np.argmax(vals, axis=1)].reshape(t_arr.shape)
    return float(best) if best.ndim == 0 else best


@dataclass(frozen=True)
class PolicyEvaluation:
    """Policy value against the oracle, in raw reward units.

    ``se`` is the standard error of the paired per-context gap; the
    ``*_model`` fields repeat the values in standardized outcome units.
    """

    value: float
    optimal_value: float
    suboptimality: float
    se: float
    n_eval: int
    context_shift: float
    value_model: float = math.nan
    optimal_value_model: float = math.nan
    suboptimality_model: float = math.nan
    units: str = "raw"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def evaluate_policy(
    policy,
    data: ObservationSet,
    n_eval: int = 10_000,
    context_shift: float = 0.0,
    seed=0,
    oracle_bounds: Optional[tuple[float, float]] = None,
) -> PolicyEvaluation:
    """Monte Carlo ``V(pi)``, ``V(pi*)`` and their gap on fresh contexts.

    Contexts come from the generator's context law with the first feature
    (``t`` for demand) shifted by ``context_shift``.  The oracle searches
    the same action range as the policy unless ``oracle_bounds`` (model
    units) is given.
    """
    if n_eval < 1:
        raise ValueError("n_eval must be >= 1")
    truth = data.truth
    if truth is None:
        raise ValueError("no ground-truth handle; policy value is unknown")
    bounds = oracle_bounds or getattr(policy, "action_bounds", None) or default_action_bounds(data)
    ctx = truth.sample_contexts(n_eval, np.random.default_rng(seed), shift=context_shift)
    a_pi = data.action_to_raw(policy.act_batch(ctx))
    raw_bounds = tuple(data.action_to_raw(np.asarray(bounds, dtype=float)))
    if isinstance(truth, DemandTruth):
        a_star = optimal_action_demand(ctx[:, 0], ctx[:, 1], raw_bounds)
    else:
        a_star = optimal_action(truth, ctx, raw_bounds)
    v_pi = truth.h0(ctx, a_pi)
    v_star = truth.h0(ctx, a_star)
    gap = v_star - v_pi
    se = float(gap.std(ddof=1) / math.sqrt(n_eval)) if n_eval > 1 else math.nan
    value, opt = float(v_pi.mean()), float(v_star.mean())
    value_m, opt_m = (float(data.outcome_to_model(v)) for v in (value, opt))
    return PolicyEvaluation(
        value=value,
        optimal_value=opt,
        suboptimality=opt - value,
        se=se,
        n_eval=int(n_eval),
        context_shift=float(context_shift),
        value_model=value_m,
        optimal_value_model=opt_m,
        suboptimality_model=opt_m - value_m,
    )
