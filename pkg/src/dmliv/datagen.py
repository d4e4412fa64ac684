"""Synthetic IV benchmarks with closed-form ground truth.

Two generators are provided:

* the ticket-demand model: context ``(t, s)``, instrument ``z`` (fuel
  price), action ``p`` (ticket price), outcome ``r`` (sales);
* a semi-synthetic model with ``d_C`` uniform covariates, a discrete
  instrument and a quadratic outcome.

Random numbers come from numpy's ``Generator`` seeded through
``SeedSequence`` (bit generator PCG64).  Identical config and seed give
bitwise-identical data on the same numpy version.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "DemandConfig",
    "SemiSynthConfig",
    "ObservationSet",
    "DemandTruth",
    "SemiSynthTruth",
    "psi_t",
    "true_h0_demand",
    "generate_demand",
    "generate_semisynth",
    "standardize",
    "destandardize",
    "save_csv",
    "load_csv",
    "truth_from_metadata",
]

RNG_ALGORITHM = "numpy.random.PCG64 via SeedSequence"


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def psi_t(t):
    """Nonlinear seasonality of ticket demand, ``t`` in [0, 10]."""
    t = np.asarray(t, dtype=float)
    out = 2.0 * ((t - 5.0) ** 4 / 600.0 + np.exp(-4.0 * (t - 5.0) ** 2) + t / 10.0 - 2.0)
    return out if out.ndim else float(out)


def true_h0_demand(t, s, p):
    """Counterfactual sales ``100 + (10 + p) s psi(t) - 2p`` in raw units."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    p = np.asarray(p, dtype=float)
    out = 100.0 + (10.0 + p) * s * psi_t(t) - 2.0 * p
    return out if np.ndim(out) else float(out)


def standardize(x: NDArray) -> tuple[NDArray, tuple[float, float]]:
    """Center and scale a column by its own sample moments (ddof=0)."""
    x = np.asarray(x, dtype=float)
    mean = float(x.mean())
    std = float(x.std())
    if not std > 0:
        raise ValueError("cannot standardize a constant column")
    return (x - mean) / std, (mean, std)


def destandardize(x, scaling: tuple[float, float]):
    """Inverse of :func:`standardize`: ``x * std + mean``."""
    mean, std = scaling
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    out = np.asarray(x, dtype=float) * std + mean
    return out if np.ndim(out) else float(out)


def _to_scaled(x, scaling):
    mean, std = scaling
    return (np.asarray(x, dtype=float) - mean) / std


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DemandConfig:
    n_samples: int
    rho: float = 0.9
    iv_strength: float = 1.0
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if int(self.n_samples) < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        # iv_strength = 0 is allowed on purpose: it builds an irrelevant instrument
        if self.iv_strength < 0:
            raise ValueError("iv_strength must be non-negative")


@dataclass(frozen=True)
class SemiSynthConfig:
    n_samples: int
    d_C: int = 6
    K_levels: int = 5
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if int(self.n_samples) < 1:
            raise ValueError("n_samples must be >= 1")
        if self.K_levels < 2:
            raise ValueError("K_levels must be >= 2 so the instrument varies")
        if self.d_C < 3:
            raise ValueError("d_C must be >= 3 (outcome uses C1, C2, C3)")


# ---------------------------------------------------------------------------
# ground truth handles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DemandTruth:
    """Closed-form structure of the ticket-demand model (raw units)."""

    rho: float = 0.9
    iv_strength: float = 1.0
    kind: str = field(default="demand", init=False)

    context_dim = 2
    instrument_dim = 1

    def h0(self, context: NDArray, action: NDArray) -> NDArray:
        context = np.atleast_2d(context)
        return true_h0_demand(context[:, 0], context[:, 1], np.reshape(action, -1))

    def action_law(self, context: NDArray, instrument: NDArray):
        """Mixture parameters of ``A | c, z``: one Gaussian, std 1."""
        context = np.atleast_2d(context)
        z = np.reshape(instrument, -1)
        mean = 25.0 + (self.iv_strength * z + 3.0) * psi_t(context[:, 0])
        n = mean.shape[0]
        return np.ones((n, 1)), mean[:, None], np.ones((n, 1))

    def s0(self, context: NDArray, instrument: NDArray) -> NDArray:
        # h0 is affine in p and eps is independent of (t, s, z), so
        # E[R | c, z] = h0(c, E[p | c, z]) exactly.
        _, mean, _ = self.action_law(context, instrument)
        return self.h0(context, mean[:, 0])

    def sample_contexts(self, n: int, rng: np.random.Generator, shift: float = 0.0) -> NDArray:
        s = rng.integers(1, 8, size=n).astype(float)
        t = rng.uniform(0.0, 10.0, size=n) + shift
        return np.column_stack([t, s])

    def sample_full(self, n: int, rng: np.random.Generator) -> dict[str, NDArray]:
        s = rng.integers(1, 8, size=n).astype(float)
        t = rng.uniform(0.0, 10.0, size=n)
        z = rng.standard_normal(n)
        omega = rng.standard_normal(n)
        eps = rng.normal(self.rho * omega, np.sqrt(1.0 - self.rho**2))
        p = 25.0 + (self.iv_strength * z + 3.0) * psi_t(t) + omega
        r = true_h0_demand(t, s, p) + eps
        return {
            "context": np.column_stack([t, s]),
            "instrument": z[:, None],
            "action": p[:, None],
            "outcome": r,
            "eps": eps,
            "omega": omega,
        }

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "rho": self.rho, "iv_strength": self.iv_strength}


def _f_z(z, k_levels):
    return np.asarray(z, dtype=float) / k_levels


@dataclass(frozen=True)
class SemiSynthTruth:
    """Structure of the semi-synthetic model; ``weights`` is d_C x K_levels."""

    d_C: int
    K_levels: int
    weights: tuple
    kind: str = field(default="semisynth", init=False)

    instrument_dim = 1
    eps_var = 0.1

    @property
    def context_dim(self) -> int:
        return self.d_C

    @property
    def w(self) -> NDArray:
        return np.asarray(self.weights, dtype=float)

    def h0(self, context: NDArray, action: NDArray) -> NDArray:
        c = np.atleast_2d(context)
        a = np.reshape(action, -1)
        return (
            9.0 * a**2
            - 1.5 * a
            + c.sum(axis=1) / self.d_C
            + np.abs(c[:, 0] * c[:, 1])
            - np.sin(10.0 + c[:, 1] * c[:, 2])
        )

    def action_law(self, context: NDArray, instrument: NDArray):
        c = np.atleast_2d(context)
        z = np.reshape(instrument, -1).astype(int)
        wz = self.w[:, z - 1].T  # (n, d_C)
        mean = np.sum(wz * (c + _f_z(z, self.K_levels)[:, None]), axis=1)
        var = (0.2 * wz.sum(axis=1)) ** 2 * self.eps_var + 1.0
        n = mean.shape[0]
        return np.ones((n, 1)), mean[:, None], np.sqrt(var)[:, None]

    def s0(self, context: NDArray, instrument: NDArray) -> NDArray:
        # eps is independent of (C, Z); E[9A^2] = 9 (m^2 + v)
        _, m, sd = self.action_law(context, instrument)
        m, v = m[:, 0], sd[:, 0] ** 2
        base = self.h0(context, np.zeros_like(m))
        return base + 9.0 * (m**2 + v) - 1.5 * m

    def sample_contexts(self, n: int, rng: np.random.Generator, shift: float = 0.0) -> NDArray:
        c = rng.uniform(-1.0, 1.0, size=(n, self.d_C))
        c[:, 0] += shift
        return c

    def sample_full(self, n: int, rng: np.random.Generator) -> dict[str, NDArray]:
        c = rng.uniform(-1.0, 1.0, size=(n, self.d_C))
        z = rng.integers(1, self.K_levels + 1, size=n)
        eps = rng.normal(0.0, np.sqrt(self.eps_var), size=n)
        delta_a = rng.standard_normal(n)
        delta_r = rng.standard_normal(n)
        wz = self.w[:, z - 1].T
        a = np.sum(wz * (c + 0.2 * eps[:, None] + _f_z(z, self.K_levels)[:, None]), axis=1) + delta_a
        r = self.h0(c, a) + 2.0 * eps + delta_r
        return {
            "context": c,
            "instrument": z.astype(float)[:, None],
            "action": a[:, None],
            "outcome": r,
            "eps": eps,
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "d_C": self.d_C,
            "K_levels": self.K_levels,
            "weights": [list(row) for row in self.weights],
        }


def truth_from_metadata(meta: Mapping[str, Any] | None):
    if not meta:
        return None
    if meta["kind"] == "demand":
        return DemandTruth(rho=meta["rho"], iv_strength=meta["iv_strength"])
    if meta["kind"] == "semisynth":
        return SemiSynthTruth(
            d_C=meta["d_C"],
            K_levels=meta["K_levels"],
            weights=tuple(tuple(float(v) for v in row) for row in meta["weights"]),
        )
    raise ValueError(f"unknown truth kind {meta['kind']!r}")


# ---------------------------------------------------------------------------
# observation container
# ---------------------------------------------------------------------------


def _frozen(x, ndim):
    arr = np.array(x, dtype=float, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr[:, None]
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Immutable columns ``(context, instrument, action, outcome)``.

    When ``scaling`` is set, ``action`` and ``outcome`` are stored in
    standardized units and ``scaling[name] = (mean, std)`` maps them back.
    ``latent`` keeps the unobserved noise draws of synthetic data so that
    generator properties can be checked; estimators never read it.
    """

    context: NDArray
    instrument: NDArray
    action: NDArray
    outcome: NDArray
    truth: Optional[Any] = None
    scaling: Optional[Mapping[str, tuple[float, float]]] = None
    latent: Optional[Mapping[str, NDArray]] = None
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "context", _frozen(self.context, 2))
        object.__setattr__(self, "instrument", _frozen(self.instrument, 2))
        object.__setattr__(self, "action", _frozen(self.action, 2))
        object.__setattr__(self, "outcome", _frozen(np.reshape(self.outcome, -1), 1))
        n = self.outcome.shape[0]
        for name in ("context", "instrument", "action"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if self.latent is not None:
            object.__setattr__(self, "latent", {k: _frozen(v, 1) for k, v in self.latent.items()})

    def __len__(self) -> int:
        return self.outcome.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    @property
    def cz(self) -> NDArray:
        """Stage-1 inputs: context and instrument side by side."""
        return np.hstack([self.context, self.instrument])

    def subset(self, idx) -> "ObservationSet":
        idx = np.asarray(idx)
        return ObservationSet(
            context=self.context[idx],
            instrument=self.instrument[idx],
            action=self.action[idx],
            outcome=self.outcome[idx],
            truth=self.truth,
            scaling=self.scaling,
            latent=None if self.latent is None else {k: v[idx] for k, v in self.latent.items()},
            meta=self.meta,
        )

    # unit conversion -------------------------------------------------------

    def _scale(self, name):
        if self.scaling is None:
            return (0.0, 1.0)
        return tuple(self.scaling[name])

    def action_to_model(self, raw):
        return _to_scaled(raw, self._scale("action"))

    def action_to_raw(self, scaled):
        return destandardize(scaled, self._scale("action"))

    def outcome_to_model(self, raw):
        return _to_scaled(raw, self._scale("outcome"))

    def outcome_to_raw(self, scaled):
        return destandardize(scaled, self._scale("outcome"))

    def h0_model_units(self, context, action_scaled):
        """Ground-truth counterfactual in the units the estimators see."""
        if self.truth is None:
            raise ValueError("observation set carries no ground truth")
        raw = self.truth.h0(context, self.action_to_raw(np.reshape(action_scaled, -1)))
        return self.outcome_to_model(raw)


def _assemble(draws, truth, cfg, do_standardize, latent_keys) -> ObservationSet:
    action = draws["action"]
    outcome = draws["outcome"]
    scaling = None
    if do_standardize:
        a_std, a_scale = standardize(action[:, 0])
        r_std, r_scale = standardize(outcome)
        action, outcome = a_std[:, None], r_std
        scaling = {"action": a_scale, "outcome": r_scale}
    return ObservationSet(
        context=draws["context"],
        instrument=draws["instrument"],
        action=action,
        outcome=outcome,
        truth=truth,
        scaling=scaling,
        latent={k: draws[k] for k in latent_keys},
        meta={"config": asdict(cfg), "generator": type(cfg).__name__, "rng": RNG_ALGORITHM},
    )


def generate_demand(cfg: DemandConfig) -> ObservationSet:
    """Draw the ticket-demand dataset with IV strength ``cfg.iv_strength``.

    ``p = 25 + (iv_strength * z + 3) psi(t) + omega`` and
    ``r = h0((t, s), p) + eps`` with ``eps ~ N(rho * omega, 1 - rho^2)``.
    """
    truth = DemandTruth(rho=float(cfg.rho), iv_strength=float(cfg.iv_strength))
    draws = truth.sample_full(int(cfg.n_samples), make_rng(cfg.seed))
    return _assemble(draws, truth, cfg, cfg.standardize, ("eps", "omega"))


def generate_semisynth(cfg: SemiSynthConfig) -> ObservationSet:
    """Semi-synthetic data over uniform contexts; ``f_z(z) = z / K_levels``."""
    rng = make_rng(cfg.seed)
    w = rng.uniform(-1.0, 1.0, size=(cfg.d_C, cfg.K_levels))
    truth = SemiSynthTruth(
        d_C=int(cfg.d_C),
        K_levels=int(cfg.K_levels),
        weights=tuple(tuple(float(v) for v in row) for row in w),
    )
    draws = truth.sample_full(int(cfg.n_samples), rng)
    return _assemble(draws, truth, cfg, cfg.standardize, ("eps",))


# ---------------------------------------------------------------------------
# CSV + sidecar JSON
# ---------------------------------------------------------------------------


def _header(obs: ObservationSet) -> list[str]:
    return (
        [f"c_{i}" for i in range(obs.context.shape[1])]
        + [f"z_{i}" for i in range(obs.instrument.shape[1])]
        + [f"a_{i}" for i in range(obs.action.shape[1])]
        + ["r"]
    )


def save_csv(obs: ObservationSet, path: str | Path) -> Path:
    """Write ``path`` (CSV) and ``path.json`` (seed, config, scaling, truth)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.hstack([obs.context, obs.instrument, obs.action, obs.outcome[:, None]])
    np.savetxt(path, table, delimiter=",", header=",".join(_header(obs)), comments="", fmt="%.17g")
    meta = dict(obs.meta)
    meta["scaling"] = None if obs.scaling is None else {k: list(v) for k, v in obs.scaling.items()}
    meta["truth"] = None if obs.truth is None else obs.truth.to_dict()
    meta["seed"] = meta.get("config", {}).get("seed")
    meta["dims"] = {
        "context": obs.context.shape[1],
        "instrument": obs.instrument.shape[1],
        "action": obs.action.shape[1],
    }
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_csv(path: str | Path) -> ObservationSet:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    sidecar = path.with_name(path.name + ".json")
    meta: dict[str, Any] = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    cols = {p: [i for i, h in enumerate(header) if h.startswith(p + "_")] for p in "cza"}
    scaling = meta.pop("scaling", None)
    truth = truth_from_metadata(meta.pop("truth", None))
    return ObservationSet(
        context=table[:, cols["c"]],
        instrument=table[:, cols["z"]],
        action=table[:, cols["a"]],
        outcome=table[:, header.index("r")],
        truth=truth,
        scaling=None if scaling is None else {k: tuple(v) for k, v in scaling.items()},
        meta=meta,
    )
