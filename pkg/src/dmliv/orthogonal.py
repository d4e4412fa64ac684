"""Score functions, K-fold cross-fitting and the two-stage IV estimators.

The orthogonal loss replaces the outcome ``r`` in the usual two-stage IV
loss with a fitted ``s(c, z) ~ E[R | c, z]``::

    psi = (s(c, z) - g(h, c, z))^2,   g(h, c, z) = E[h(C, A) | c, z]

and ``g`` is a Monte Carlo average of ``h`` over draws from a fitted
conditional density of the action.  With cross-fitting, rows of fold ``k``
only ever see nuisances trained on the other folds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import torch

from .datagen import ObservationSet
from .learners import (
    BOOSTED_TREES,
    ConditionalDensity,
    CounterfactualModel,
    DensityConfig,
    RegressorConfig,
    TreeCounterfactual,
    fit_conditional_density,
    fit_regressor,
    new_counterfactual_model,
    to_blob,
)
from .learners.density import sample_mixture
from .learners.nets import make_optimizer, seeded
from .learners.trees import grow_tree

log = logging.getLogger(__name__)

__all__ = [
    "FoldPartition",
    "NuisancePair",
    "Stage2Config",
    "DmlivConfig",
    "stage1_defaults",
    "DmlivEstimate",
    "WeakInstrumentError",
    "Stage1Error",
    "make_partition",
    "g_hat",
    "orthogonal_score",
    "standard_score",
    "orthogonal_loss",
    "fit_dmliv",
    "fit_ce_dmliv",
    "fit_naive_twostage",
    "fit_stage2_trees",
    "counterfactual_mse",
]


class WeakInstrumentError(RuntimeError):
    """The instrument fails the relevance check and no override was given."""


class Stage1Error(RuntimeError):
    def __init__(self, fold: int, cause: BaseException):
        super().__init__(f"stage-1 fit failed on fold {fold}: {cause!r}")
        self.fold = fold


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FoldPartition:
    K: int
    folds: tuple[np.ndarray, ...]

    @property
    def n(self) -> int:
        return int(sum(len(f) for f in self.folds))

    def fold_ids(self) -> np.ndarray:
        ids = np.empty(self.n, dtype=np.int64)
        for k, f in enumerate(self.folds):
            ids[f] = k
        return ids

    def complement(self, k: int) -> np.ndarray:
        return np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != k]))

    def to_dict(self) -> dict[str, Any]:
        return {"K": self.K, "folds": [f.tolist() for f in self.folds]}

    @classmethod
    def from_dict(cls, d) -> "FoldPartition":
        return cls(int(d["K"]), tuple(np.asarray(f, dtype=np.int64) for f in d["folds"]))

    @classmethod
    def whole(cls, n: int) -> "FoldPartition":
        """Single block holding every index (estimators without cross-fitting)."""
        return cls(1, (np.arange(n, dtype=np.int64),))


def make_partition(n: int, K: int, seed) -> FoldPartition:
    """Uniformly random balanced partition of ``range(n)`` into ``K`` folds."""
    if K < 2:
        raise ValueError("K must be >= 2")
    if K > n:
        raise ValueError(f"cannot split {n} indices into {K} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return FoldPartition(int(K), tuple(np.sort(chunk) for chunk in np.array_split(perm, K)))


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------


def orthogonal_score(s_val, g_val):
    """``(s - g)^2``; zero at the truth since ``s0(c, z) = g0(h0, c, z)``."""
    return (np.asarray(s_val, dtype=float) - np.asarray(g_val, dtype=float)) ** 2


def standard_score(r, g_val):
    """``(r - g)^2``, the usual two-stage IV loss."""
    return (np.asarray(r, dtype=float) - np.asarray(g_val, dtype=float)) ** 2


def _h_value(h, context, action):
    if hasattr(h, "value"):
        return h.value(context, action)
    return np.asarray(h(context, action), dtype=float) * np.ones(np.shape(action)[0])


def g_hat(h, density: ConditionalDensity, c, z, mc_samples: int, seed=0, draws=None) -> np.ndarray:
    """Monte Carlo ``E[h(c, A) | c, z]`` with ``A`` from ``density``.

    ``c`` and ``z`` are row-aligned matrices (a single point may be passed
    as vectors).  ``h`` is anything with ``value(context, action)`` or a
    plain callable.  Pass ``draws`` (shape ``(n, mc_samples)``) to reuse
    frozen draws.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    c = np.atleast_2d(np.asarray(c, dtype=float))
    z = np.asarray(z, dtype=float).reshape(c.shape[0], -1)
    if draws is None:
        draws = density.sample(np.hstack([c, z]), mc_samples, np.random.default_rng(seed))
    n, m = draws.shape
    vals = _h_value(h, np.repeat(c, m, axis=0), draws.reshape(-1))
    return vals.reshape(n, m).mean(axis=1)


def _g_torch(model: CounterfactualModel, c: torch.Tensor, draws: torch.Tensor) -> torch.Tensor:
    n, m = draws.shape
    x = torch.cat([c.repeat_interleave(m, dim=0), draws.reshape(-1, 1)], dim=1)
    return model.forward(x).reshape(n, m).mean(dim=1)


def orthogonal_loss(model: CounterfactualModel, c, targets, draws) -> tuple[float, np.ndarray]:
    """Mean ``(target - g_hat)^2`` over rows and its gradient in ``theta``.

    The draws are frozen, so the gradient flows through ``h`` only.  With
    ``targets = s_hat`` this is the orthogonal loss, with ``targets = r``
    the standard one.
    """
    model.net.eval()
    dt = model.dtype
    model.net.zero_grad()
    c_t = torch.as_tensor(np.array(np.atleast_2d(c), dtype=float), dtype=dt)
    g = _g_torch(model, c_t, torch.as_tensor(np.array(draws, dtype=float), dtype=dt))
    loss = torch.mean((torch.as_tensor(np.array(np.ravel(targets), dtype=float), dtype=dt) - g) ** 2)
    loss.backward()
    grad = torch.cat([p.grad.reshape(-1) for p in model.net.parameters()]).double().numpy()
    model.net.zero_grad()
    return loss.item(), grad


# ---------------------------------------------------------------------------
# configs and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stage2Config:
    """Stage-2 optimization settings.

    Training stops when the monitored loss (frozen draws) has not improved
    by more than ``tol`` (relative) for ``patience`` consecutive epochs, or
    after ``max_epochs``; the best weights seen are kept.  The monitored
    loss is over all rows, or over a held-out share of each fold when
    ``validation_fraction`` is positive (those rows are then not trained on).
    """

    model: RegressorConfig = field(default_factory=lambda: RegressorConfig(learning_rate=2e-3))
    mc_samples: int = 16
    batch_size: int = 256
    max_epochs: int = 100
    tol: float = 1e-5
    patience: int = 5
    validation_fraction: float = 0.0

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")


def stage1_defaults(kind: str = "feedforward") -> RegressorConfig:
    """Nuisance learner settings: no dropout and a larger step than stage 2."""
    return RegressorConfig(kind, epochs=25, batch_size=256, learning_rate=5e-3, dropout_rate=0.0)


def _density_defaults() -> DensityConfig:
    return DensityConfig(**{k: v for k, v in stage1_defaults().to_dict().items() if k != "config_class"})


@dataclass(frozen=True)
class DmlivConfig:
    outcome: RegressorConfig = field(default_factory=stage1_defaults)
    action: DensityConfig = field(default_factory=_density_defaults)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    K: int = 10
    check_relevance: bool = True
    allow_weak_iv: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "outcome": self.outcome.to_dict(),
            "action": self.action.to_dict(),
            "stage2": {**asdict(self.stage2), "model": self.stage2.model.to_dict()},
            "K": self.K,
            "check_relevance": self.check_relevance,
            "allow_weak_iv": self.allow_weak_iv,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DmlivConfig":
        st = dict(d["stage2"])
        st["model"] = RegressorConfig.from_dict(st["model"])
        return cls(
            outcome=RegressorConfig.from_dict(d["outcome"]),
            action=RegressorConfig.from_dict(d["action"]),
            stage2=Stage2Config(**st),
            K=int(d["K"]),
            check_relevance=bool(d.get("check_relevance", True)),
            allow_weak_iv=bool(d.get("allow_weak_iv", False)),
        )


@dataclass
class NuisancePair:
    """Stage-1 fits sharing one training index set (``train_index``)."""

    s_hat: Any
    density: ConditionalDensity
    mc_samples: int
    train_index: np.ndarray


@dataclass
class DmlivEstimate:
    model: Any
    nuisances: list[NuisancePair]
    partition: FoldPartition
    training_trace: list[tuple[int, int, float]]
    method: str
    config: DmlivConfig
    epoch_losses: list[float] = field(default_factory=list)
    final_loss: float = math.nan
    stage1_seconds: float = 0.0
    stage2_seconds: float = 0.0

    @property
    def K(self) -> int:
        return self.partition.K

    def predict(self, context, action) -> np.ndarray:
        return self.model.value(context, action)

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "model": to_blob(self.model),
            "partition": self.partition.to_dict(),
            "config": self.config.to_dict(),
            "config_digest": self.config.digest(),
            "final_loss": self.final_loss,
            "stage1_seconds": self.stage1_seconds,
            "stage2_seconds": self.stage2_seconds,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()))
        return path

    def write_trace(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "fold", "loss"])
            w.writerows(self.training_trace)
        return path


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


def _seed_stream(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _fit_pair(data: ObservationSet, idx, cfg: DmlivConfig, ss, with_s: bool = True) -> NuisancePair:
    s_seed, d_seed = (_int_seed(s) for s in ss.spawn(2))
    cz = data.cz[idx]
    s_hat = fit_regressor(cz, data.outcome[idx], cfg.outcome, seed=s_seed) if with_s else None
    density = fit_conditional_density(cz, data.action[idx, 0], cfg.action, seed=d_seed)
    return NuisancePair(s_hat, density, cfg.stage2.mc_samples, np.asarray(idx))


def _relevance_gate(data: ObservationSet, cfg: DmlivConfig, allow_weak_iv: Optional[bool]) -> None:
    if not cfg.check_relevance:
        return
    from .diagnostics import relevance_check

    report = relevance_check(data)
    allowed = cfg.allow_weak_iv if allow_weak_iv is None else allow_weak_iv
    if report.weak and not allowed:
        raise WeakInstrumentError(
            f"instrument looks weak (F = {report.statistic:.3g} < {report.threshold}); "
            "pass allow_weak_iv=True to fit anyway"
        )


def _crossfit_targets(data, partition, nuisances, use_s: bool):
    n = data.n
    targets = np.array(data.outcome, dtype=float) if not use_s else np.empty(n)
    params = None
    for k, fold in enumerate(partition.folds):
        pair = nuisances[k]
        cz = data.cz[fold]
        if use_s:
            targets[fold] = pair.s_hat.predict(cz)
        w, mu, sd = pair.density.mixture_params(cz)
        if params is None:
            params = tuple(np.empty((n, w.shape[1])) for _ in range(3))
        params[0][fold], params[1][fold], params[2][fold] = w, mu, sd
    return targets, params


# ---------------------------------------------------------------------------
# stage 2: gradient-based
# ---------------------------------------------------------------------------


def _stage2_sgd(data, partition, targets, params, cfg: DmlivConfig, ss, progress=None):
    st = cfg.stage2
    init_seed, loop_seed, eval_seed = (_int_seed(s) for s in ss.spawn(3))
    n = data.n
    c_all = np.array(data.context, dtype=float)
    model = new_counterfactual_model(
        st.model,
        context_dim=c_all.shape[1],
        action_dim=1,
        seed=init_seed,
        n=n,
        input_sample=np.hstack([c_all, data.action[:, :1]]),
    )
    dt = model.dtype
    c_t = torch.as_tensor(c_all, dtype=dt)
    y_t = torch.as_tensor(np.array(targets, dtype=float), dtype=dt)
    w, mu, sd = params
    rng = np.random.default_rng(loop_seed)
    eval_draws = torch.as_tensor(
        sample_mixture(w, mu, sd, st.mc_samples, np.random.default_rng(eval_seed)), dtype=dt
    )

    folds = list(partition.folds)
    monitor = np.arange(n)
    if st.validation_fraction > 0:
        split_rng = np.random.default_rng(eval_seed + 1)
        held = []
        for k, f in enumerate(folds):
            mask = split_rng.random(len(f)) < st.validation_fraction
            if mask.all() or not mask.any():
                raise ValueError(f"validation split leaves fold {k} without training or held-out rows")
            held.append(f[mask])
            folds[k] = f[~mask]
        monitor = np.sort(np.concatenate(held))

    def full_loss() -> float:
        model.net.eval()
        with torch.no_grad():
            total = 0.0
            for start in range(0, monitor.size, 4096):
                sl = torch.as_tensor(monitor[start : start + 4096])
                g = _g_torch(model, c_t[sl], eval_draws[sl])
                total += float(torch.sum((y_t[sl] - g) ** 2))
        return total / monitor.size

    opt = make_optimizer(model.net.parameters(), st.model)
    trace: list[tuple[int, int, float]] = []
    epoch_losses = [full_loss()]
    best, best_state, stale, step = epoch_losses[0], None, 0, 0
    bs = st.batch_size
    with seeded(loop_seed):
        for epoch in range(st.max_epochs):
            perms = [rng.permutation(f) for f in folds]
            rounds = max(math.ceil(len(p) / bs) for p in perms)
            for j in range(rounds):
                for k, perm in enumerate(perms):
                    b = perm[j * bs : (j + 1) * bs]
                    if len(b) == 0:
                        continue
                    draws = sample_mixture(w[b], mu[b], sd[b], st.mc_samples, rng)
                    model.net.train()
                    opt.zero_grad()
                    g = _g_torch(model, c_t[b], torch.as_tensor(draws, dtype=dt))
                    loss = torch.mean((y_t[b] - g) ** 2)
                    loss.backward()
                    opt.step()
                    lv = loss.item()
                    if not math.isfinite(lv):
                        raise FloatingPointError(f"non-finite stage-2 loss at step {step} (fold {k})")
                    trace.append((step, k, lv))
                    step += 1
            cur = full_loss()
            epoch_losses.append(cur)
            if progress is not None:
                progress(epoch, cur)
            if cur < best * (1.0 - st.tol):
                best, stale = cur, 0
                best_state = {key: t.detach().clone() for key, t in model.net.state_dict().items()}
            else:
                stale += 1
                if stale >= st.patience:
                    break
    if best_state is not None:
        model.net.load_state_dict(best_state)
    model.net.eval()
    return model, trace, epoch_losses, best


# ---------------------------------------------------------------------------
# stage 2: functional boosting with trees
# ---------------------------------------------------------------------------


def fit_stage2_trees(
    context: np.ndarray,
    targets: np.ndarray,
    params,
    tree_cfg: RegressorConfig,
    mc_samples: int,
    seed,
) -> tuple[TreeCounterfactual, list[tuple[int, int, float]], list[float]]:
    """Boost ``h(c, a)`` on ``mean_i (target_i - mean_j h(c_i, a_ij))^2``.

    Each round draws ``a_ij`` from the per-row mixtures, grows a CART tree
    on ``(c_i, a_ij)`` against the current residual of row ``i``, then sets
    the leaf values by least squares of the residuals on the pseudo-features
    ``F_il = share of row i's draws landing in leaf l`` (the loss is linear
    in ``h`` through ``g``).  Leaf values are scaled by the shrinkage.
    """
    ss = _seed_stream(seed)
    rng = np.random.default_rng(_int_seed(ss.spawn(1)[0]))
    c = np.asarray(context, dtype=float)
    y = np.asarray(targets, dtype=float)
    n, m = c.shape[0], mc_samples
    w, mu, sd = params
    init = float(y.mean())
    g = np.full(n, init)
    trees, leaf_values, trace, losses = [], [], [], [float(np.mean((y - g) ** 2))]
    for step in range(tree_cfg.n_trees):
        draws = sample_mixture(w, mu, sd, m, rng)
        x = np.hstack([np.repeat(c, m, axis=0), draws.reshape(-1, 1)])
        resid = y - g
        tree = grow_tree(x, np.repeat(resid, m), tree_cfg, int(rng.integers(2**31 - 1)))
        leaves = tree.apply(x)
        uniq, leaf_col = np.unique(leaves, return_inverse=True)
        feats = np.zeros((n, uniq.size))
        np.add.at(feats, (np.repeat(np.arange(n), m), leaf_col), 1.0 / m)
        gram = feats.T @ feats + 1e-8 * np.eye(uniq.size)
        coef = np.linalg.solve(gram, feats.T @ resid) * tree_cfg.shrinkage
        vals = np.zeros(tree.value.shape[0])
        vals[uniq] = coef
        trees.append(tree)
        leaf_values.append(vals)
        g = g + feats @ coef
        loss = float(np.mean((y - g) ** 2))
        trace.append((step, -1, loss))
        losses.append(loss)
    return TreeCounterfactual(init, trees, leaf_values, c.shape[1]), trace, losses


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def _run_stage2(data, partition, targets, params, cfg, ss, progress):
    if cfg.stage2.model.kind == BOOSTED_TREES:
        model, trace, losses = fit_stage2_trees(
            np.asarray(data.context), targets, params, cfg.stage2.model, cfg.stage2.mc_samples, ss
        )
        return model, trace, losses, losses[-1]
    return _stage2_sgd(data, partition, targets, params, cfg, ss, progress)


def _check_size(data: ObservationSet, K: int) -> None:
    if data.n < 2 * K:
        raise ValueError(f"need at least 2K = {2 * K} observations, got {data.n}")


def fit_dmliv(
    data: ObservationSet,
    cfg: DmlivConfig | None = None,
    seed=0,
    allow_weak_iv: Optional[bool] = None,
    progress: Callable | None = None,
) -> DmlivEstimate:
    """DML-IV with K-fold cross-fitting.

    Stage 1 fits ``s_hat_k`` and the action density on the complement of
    fold ``k``.  Stage 2 cycles through the folds, taking one mini-batch
    step per fold on the orthogonal loss built from that fold's nuisances.
    """
    cfg = cfg or DmlivConfig()
    _check_size(data, cfg.K)
    _relevance_gate(data, cfg, allow_weak_iv)
    ss = _seed_stream(seed)
    part_ss, stage1_ss, stage2_ss = ss.spawn(3)
    partition = make_partition(data.n, cfg.K, _int_seed(part_ss))
    t0 = time.perf_counter()
    nuisances = []
    for k, fold_ss in enumerate(stage1_ss.spawn(cfg.K)):
        try:
            nuisances.append(_fit_pair(data, partition.complement(k), cfg, fold_ss))
        except Exception as exc:  # noqa: BLE001 - re-raised with the fold id
            raise Stage1Error(k, exc) from exc
    t1 = time.perf_counter()
    targets, params = _crossfit_targets(data, partition, nuisances, use_s=True)
    model, trace, losses, final = _run_stage2(data, partition, targets, params, cfg, stage2_ss, progress)
    t2 = time.perf_counter()
    return DmlivEstimate(model, nuisances, partition, trace, "dmliv", cfg, losses, final, t1 - t0, t2 - t1)


def fit_ce_dmliv(
    data: ObservationSet,
    cfg: DmlivConfig | None = None,
    seed=0,
    allow_weak_iv: Optional[bool] = None,
    progress: Callable | None = None,
) -> DmlivEstimate:
    """Orthogonal loss with nuisances trained once on all the data (no cross-fitting)."""
    cfg = cfg or DmlivConfig()
    _check_size(data, 1)
    _relevance_gate(data, cfg, allow_weak_iv)
    ss = _seed_stream(seed)
    _, stage1_ss, stage2_ss = ss.spawn(3)
    partition = FoldPartition.whole(data.n)
    t0 = time.perf_counter()
    try:
        pair = _fit_pair(data, partition.folds[0], cfg, stage1_ss)
    except Exception as exc:  # noqa: BLE001
        raise Stage1Error(0, exc) from exc
    t1 = time.perf_counter()
    targets, params = _crossfit_targets(data, partition, [pair], use_s=True)
    model, trace, losses, final = _run_stage2(data, partition, targets, params, cfg, stage2_ss, progress)
    t2 = time.perf_counter()
    return DmlivEstimate(model, [pair], partition, trace, "ce_dmliv", cfg, losses, final, t1 - t0, t2 - t1)


def fit_naive_twostage(
    data: ObservationSet,
    cfg: DmlivConfig | None = None,
    seed=0,
    allow_weak_iv: Optional[bool] = None,
    progress: Callable | None = None,
) -> DmlivEstimate:
    """Plug-in two-stage IV: minimize ``(r - g_hat(h, c, z))^2``.

    The action density is fit once on all data; no ``s_hat``, no
    cross-fitting.  Serves as the biased control.
    """
    cfg = cfg or DmlivConfig()
    _check_size(data, 1)
    _relevance_gate(data, cfg, allow_weak_iv)
    ss = _seed_stream(seed)
    _, stage1_ss, stage2_ss = ss.spawn(3)
    partition = FoldPartition.whole(data.n)
    t0 = time.perf_counter()
    try:
        pair = _fit_pair(data, partition.folds[0], cfg, stage1_ss, with_s=False)
    except Exception as exc:  # noqa: BLE001
        raise Stage1Error(0, exc) from exc
    t1 = time.perf_counter()
    targets, params = _crossfit_targets(data, partition, [pair], use_s=False)
    model, trace, losses, final = _run_stage2(data, partition, targets, params, cfg, stage2_ss, progress)
    t2 = time.perf_counter()
    return DmlivEstimate(model, [pair], partition, trace, "naive", cfg, losses, final, t1 - t0, t2 - t1)


FITTERS: dict[str, Callable[..., DmlivEstimate]] = {
    "dmliv": fit_dmliv,
    "ce_dmliv": fit_ce_dmliv,
    "naive": fit_naive_twostage,
}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def counterfactual_mse(model, data: ObservationSet, n_eval: int = 10_000, seed=0) -> float:
    """MSE of ``h_hat`` against ``h0`` on fresh draws from the generating model.

    Both sides are expressed in the units the estimator was trained in
    (standardized when ``data.scaling`` is set).
    """
    if data.truth is None:
        raise ValueError("counterfactual MSE needs a ground-truth handle")
    fresh = data.truth.sample_full(n_eval, np.random.default_rng(seed))
    a_model = data.action_to_model(fresh["action"][:, 0])
    truth = data.h0_model_units(fresh["context"], a_model)
    pred = model.value(fresh["context"], a_model)
    return float(np.mean((pred - truth) ** 2))


def sequence_seed(*parts: Sequence | int | str) -> int:
    """Stable 63-bit seed from a tuple of ints and strings."""
    h = hashlib.sha256(json.dumps([str(p) for p in parts]).encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)
