"""Numerical checks: Gateaux derivatives of the scores, instrument relevance, rate fits.

All checks work in the model units of the data they receive.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

from .datagen import ObservationSet
from .learners.density import sample_mixture

__all__ = [
    "ORTHOGONAL",
    "STANDARD",
    "DIRECTION_KINDS",
    "OrthogonalityReport",
    "RelevanceReport",
    "RateFit",
    "DataError",
    "oracle_nuisances",
    "random_directions",
    "check_orthogonality",
    "relevance_check",
    "fit_rate",
    "verdict_from",
]

ORTHOGONAL = "orthogonal"
STANDARD = "standard"
DIRECTION_KINDS = ("joint", "s_only", "g_only")
WEAK_IV_THRESHOLD = 10.0


class DataError(ValueError):
    """Inputs cannot be analysed (for instance, non-positive metrics on a log scale)."""


# ---------------------------------------------------------------------------
# orthogonality
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OrthogonalityReport:
    score_kind: str
    direction_kind: str
    directions: int
    derivative_estimates: np.ndarray
    standard_errors: np.ndarray
    r_step: float
    verdict: str
    stable_under_halving: Optional[bool] = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["derivative_estimates"] = self.derivative_estimates.tolist()
        d["standard_errors"] = self.standard_errors.tolist()
        return d


def verdict_from(estimates, ses) -> str:
    """``orthogonal`` iff every ``|est| < 3 SE``; ``not_orthogonal`` iff some ``|est| > 5 SE``.

    An estimate of exactly zero with zero spread counts as orthogonal, and a
    nonzero estimate with zero spread as not orthogonal.
    """
    est = np.abs(np.asarray(estimates, dtype=float))
    se = np.asarray(ses, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(est == 0.0, 0.0, est / se)
    if np.all(z < 3.0):
        return "orthogonal"
    if np.any(z > 5.0):
        return "not_orthogonal"
    return "inconclusive"


def oracle_nuisances(data: ObservationSet, mc_samples: int = 512, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """``(s0, g0(h0))`` per row from the true action law, in model units.

    Both are the same Monte Carlo average of ``h0(c, A)`` over ``mc_samples``
    draws of ``A | c, z`` (``s0 = E[h0(C, A) | c, z]`` under the model), so
    they coincide row by row.
    """
    if data.truth is None:
        raise ValueError("oracle nuisances need a ground-truth handle")
    w, mu, sd = data.truth.action_law(data.context, data.instrument)
    draws = sample_mixture(w, mu, sd, mc_samples, np.random.default_rng(seed))
    n = data.n
    h = data.truth.h0(np.repeat(np.asarray(data.context), mc_samples, axis=0), draws.reshape(-1))
    g0 = data.outcome_to_model(h.reshape(n, mc_samples).mean(axis=1))
    return g0.copy(), g0


def _random_net(in_dim: int, rng: np.random.Generator, width: int = 16) -> Callable[[np.ndarray], np.ndarray]:
    w1 = rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, width))
    b1 = rng.normal(0.0, 0.5, width)
    w2 = rng.normal(0.0, 1.0 / math.sqrt(width), width)
    b2 = rng.normal(0.0, 0.2)

    def f(x):
        return np.clip(np.tanh(x @ w1 + b1) @ w2 + b2, -1.0, 1.0)

    return f


def random_directions(
    inputs: np.ndarray, count: int, kind: str = "joint", seed=0
) -> list[tuple[np.ndarray, np.ndarray]]:
    """``count`` pairs ``(delta_s, delta_g)`` evaluated on ``inputs`` rows of ``(c, z)``.

    Each nonzero component is a random one-hidden-layer tanh network of the
    standardized inputs, clipped to ``[-1, 1]``.  ``kind`` picks which
    nuisances move: both, only ``s`` or only ``g``.
    """
    if kind not in DIRECTION_KINDS:
        raise ValueError(f"kind must be one of {DIRECTION_KINDS}")
    x = np.asarray(inputs, dtype=float)
    sd = x.std(axis=0)
    x = (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    rng = np.random.default_rng(seed)
    zero = np.zeros(x.shape[0])
    out = []
    for _ in range(count):
        ds = _random_net(x.shape[1], rng)(x) if kind != "g_only" else zero
        dg = _random_net(x.shape[1], rng)(x) if kind != "s_only" else zero
        out.append((ds, dg))
    return out


def _per_sample_derivative(score_kind, r_step, s0, g0, y, ds, dg) -> np.ndarray:
    # residual at r = 0 plus r times the direction, so an exactly zero
    # residual stays exactly zero under rounding
    if score_kind == ORTHOGONAL:
        base, move = s0 - g0, ds - dg
    else:
        base, move = y - g0, -dg

    def psi(r):
        return (base + r * move) ** 2

    return (psi(r_step) - psi(-r_step)) / (2.0 * r_step)


def check_orthogonality(
    score_kind: str,
    data: ObservationSet,
    directions: int | Sequence[tuple[np.ndarray, np.ndarray]] = 8,
    r_step: float = 1e-2,
    mc_samples: int = 512,
    seed=0,
    direction_kind: str = "joint",
    richardson: bool = True,
    nuisances: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> OrthogonalityReport:
    """Central-difference Gateaux derivatives of the expected score at the truth.

    For each direction, the per-row difference quotient
    ``(psi(r) - psi(-r)) / (2 r)`` is averaged over the sample; the standard
    error is its sample standard deviation over ``sqrt(n)``.  ``directions``
    is either a count of random directions or explicit ``(delta_s, delta_g)``
    row vectors.  With ``richardson`` the check is repeated at ``r_step / 2``
    and ``stable_under_halving`` records whether the verdict held.
    """
    if r_step <= 0:
        raise ValueError("r_step must be positive")
    if score_kind not in (ORTHOGONAL, STANDARD):
        raise ValueError(f"score_kind must be {ORTHOGONAL!r} or {STANDARD!r}")
    s0, g0 = nuisances if nuisances is not None else oracle_nuisances(data, mc_samples, seed)
    y = np.asarray(data.outcome, dtype=float)
    if isinstance(directions, (int, np.integer)):
        dirs = random_directions(data.cz, int(directions), direction_kind, seed=np.random.SeedSequence(seed).spawn(1)[0])
    else:
        dirs = [(np.asarray(a, dtype=float), np.asarray(b, dtype=float)) for a, b in directions]
        direction_kind = "custom"

    def run(step):
        est, se = [], []
        for ds, dg in dirs:
            d = _per_sample_derivative(score_kind, step, s0, g0, y, ds, dg)
            est.append(float(d.mean()))
            se.append(float(d.std(ddof=1) / math.sqrt(d.size)))
        return np.asarray(est), np.asarray(se)

    est, se = run(r_step)
    verdict = verdict_from(est, se)
    stable = None
    if richardson:
        stable = verdict_from(*run(r_step / 2.0)) == verdict
    return OrthogonalityReport(score_kind, direction_kind, len(dirs), est, se, float(r_step), verdict, stable)


# ---------------------------------------------------------------------------
# relevance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RelevanceReport:
    statistic: float
    df_num: int
    df_den: int
    threshold: float
    weak: bool

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _context_basis(c: np.ndarray) -> np.ndarray:
    cols = [np.ones(c.shape[0])]
    for j in range(c.shape[1]):
        x = c[:, j]
        if np.ptp(x) == 0:
            continue
        x = (x - x.mean()) / x.std()
        cols += [x, x**2, x**3]
    return np.column_stack(cols)


def relevance_check(data: ObservationSet, threshold: float = WEAK_IV_THRESHOLD) -> RelevanceReport:
    """F statistic for adding the instrument to a regression of the action on the context.

    The restricted design is a cubic basis of each context column; the full
    design adds every instrument column and its products with the context
    columns.  ``F = ((RSS_r - RSS_f) / q) / (RSS_f / (n - p_f))``.
    """
    n = data.n
    if n < 100:
        raise ValueError(f"relevance check needs at least 100 rows, got {n}")
    c = np.asarray(data.context, dtype=float)
    z = np.asarray(data.instrument, dtype=float)
    a = np.asarray(data.action[:, 0], dtype=float)
    if np.ptp(a) == 0:
        raise ValueError("degenerate action column")
    z_std = z.std(axis=0)
    if np.any(z_std == 0):
        raise ValueError("degenerate instrument column")
    zs = (z - z.mean(axis=0)) / z_std
    restricted = _context_basis(c)
    cs = restricted[:, 1::3] if restricted.shape[1] > 1 else np.empty((n, 0))
    extra = [zs] + [zs * cs[:, [j]] for j in range(cs.shape[1])]
    full = np.hstack([restricted] + extra)

    def rss(x):
        coef, *_ = np.linalg.lstsq(x, a, rcond=None)
        res = a - x @ coef
        return float(res @ res)

    rank_r = np.linalg.matrix_rank(restricted)
    rank_f = np.linalg.matrix_rank(full)
    q = rank_f - rank_r
    df_den = n - rank_f
    if q <= 0 or df_den <= 0:
        raise ValueError("degenerate design: the instrument adds no columns")
    rss_r, rss_f = rss(restricted), rss(full)
    stat = ((rss_r - rss_f) / q) / (rss_f / df_den) if rss_f > 0 else math.inf
    return RelevanceReport(float(stat), int(q), int(df_den), float(threshold), bool(stat < threshold))


# ---------------------------------------------------------------------------
# rates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    sample_sizes: list[int]
    metric_means: list[float]
    slope: float
    intercept: float
    r_squared: float
    seeds_per_size: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "metric_mean", "seeds"])
            for row in zip(self.sample_sizes, self.metric_means, self.seeds_per_size):
                w.writerow(row)
        return path


def fit_rate(runs: Iterable[tuple[float, float]], min_seeds: int = 5) -> RateFit:
    """OLS of ``log(mean metric)`` on ``log N`` over the distinct sample sizes."""
    groups: dict[int, list[float]] = {}
    for n, metric in runs:
        groups.setdefault(int(n), []).append(float(metric))
    bad = [m for ms in groups.values() for m in ms if not (math.isfinite(m) and m > 0)]
    if bad:
        raise DataError(f"metrics must be positive and finite for a log-log fit; got {bad[:3]}")
    if len(groups) < 3:
        raise ValueError(f"need at least 3 distinct sample sizes, got {len(groups)}")
    short = {n: len(ms) for n, ms in groups.items() if len(ms) < min_seeds}
    if short:
        raise ValueError(f"need at least {min_seeds} runs per sample size; short: {short}")
    sizes = sorted(groups)
    means = [float(np.mean(groups[n])) for n in sizes]
    x, y = np.log(sizes), np.log(means)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0 else 1.0
    return RateFit(sizes, means, float(slope), float(intercept), float(r2), [len(groups[n]) for n in sizes])
