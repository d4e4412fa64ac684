"""Seeded experiment sweeps, crash-safe CSV reports and summaries.

A sweep runs every cell of ``methods x sample_sizes x rho x iv_strength x
seeds``.  Each cell generates data, fits one method, scores the
counterfactual MSE and evaluates the greedy policy in and out of
distribution.  Rows are appended to ``report.csv`` as cells finish, so an
interrupted sweep resumes where it stopped.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import re
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .bandit import DEFAULT_OOD_SHIFT, Policy, RandomPolicy, default_action_bounds, evaluate_policy
from .datagen import DemandConfig, SemiSynthConfig, generate_demand, generate_semisynth
from .diagnostics import ORTHOGONAL, STANDARD, check_orthogonality, fit_rate, relevance_check
from .learners import BOOSTED_TREES, FEEDFORWARD, DensityConfig, RegressorConfig
from .orthogonal import FITTERS, DmlivConfig, Stage2Config, counterfactual_mse

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "ExperimentReport",
    "ConfigError",
    "OUTPUT_ROOT_ENV",
    "REPORT_COLUMNS",
    "load_config",
    "config_from_mapping",
    "dump_config",
    "cell_seeds",
    "run_cell",
    "run_experiment",
    "read_report",
    "summarize",
    "plot_data",
    "run_diagnostics",
]

OUTPUT_ROOT_ENV = "DMLIV_OUTPUT_ROOT"
METHODS = tuple(FITTERS)
DATASETS = ("demand", "semisynth")
ESTIMATORS = (FEEDFORWARD, BOOSTED_TREES)
REPORT_COLUMNS = [
    "method",
    "estimator",
    "N",
    "rho",
    "iv_strength",
    "seed",
    "mse_h",
    "reward_in_dist",
    "reward_ood",
    "subopt",
    "subopt_ood",
    "subopt_random",
    "wall_clock_s",
    "stage1_s",
    "stage2_s",
    "config_digest",
    "version",
    "status",
    "error",
]
CELL_KEY = ("method", "N", "rho", "iv_strength", "seed")
METRICS = (
    "mse_h",
    "reward_in_dist",
    "reward_ood",
    "subopt",
    "subopt_ood",
    "subopt_random",
    "wall_clock_s",
    "stage1_s",
    "stage2_s",
)


class ConfigError(ValueError):
    pass


def _key(ns: str, default, **kw):
    return field(default=default, metadata={"ns": ns}, **kw)


def _list_key(ns: str, default):
    return field(default_factory=lambda: tuple(default), metadata={"ns": ns})


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved sweep settings.

    Each field is addressed in config files as ``<namespace>.<name>``; for
    the ``stage1``, ``stage2`` and ``trees`` namespaces the field name
    carries the namespace as a prefix (``stage1.epochs`` is
    ``stage1_epochs``).
    """

    dataset: str = _key("data", "demand")
    sample_sizes: tuple[int, ...] = _list_key("data", (5000,))
    rho: tuple[float, ...] = _list_key("data", (0.9,))
    iv_strength: tuple[float, ...] = _list_key("data", (1.0,))
    d_C: int = _key("data", 6)
    K_levels: int = _key("data", 5)

    methods: tuple[str, ...] = _list_key("method", ("dmliv",))
    estimator: str = _key("method", FEEDFORWARD)
    K: int = _key("method", 10)
    mc_samples: int = _key("method", 16)
    naive_regularization: float = _key("method", 1.0)
    allow_weak_iv: bool = _key("method", False)

    stage1_epochs: int = _key("stage1", 25)
    stage1_batch_size: int = _key("stage1", 256)
    stage1_learning_rate: float = _key("stage1", 5e-3)
    stage1_weight_decay: float = _key("stage1", 1e-3)
    stage1_dropout: float = _key("stage1", 0.0)
    stage1_components: int = _key("stage1", 10)

    stage2_learning_rate: float = _key("stage2", 2e-3)
    stage2_weight_decay: float = _key("stage2", 1e-3)
    stage2_dropout: Optional[float] = _key("stage2", None)
    stage2_batch_size: int = _key("stage2", 256)
    stage2_max_epochs: int = _key("stage2", 100)
    stage2_patience: int = _key("stage2", 5)
    stage2_tol: float = _key("stage2", 1e-5)
    stage2_validation_fraction: float = _key("stage2", 0.0)

    trees_n_trees: int = _key("trees", 500)
    trees_min_leaf_nuisance: int = _key("trees", 100)
    trees_min_leaf_stage2: int = _key("trees", 10)
    trees_max_depth: int = _key("trees", 3)
    trees_shrinkage: float = _key("trees", 0.1)

    n_eval_mse: int = _key("eval", 10_000)
    n_eval_policy: int = _key("eval", 2000)
    action_grid: int = _key("eval", 1024)
    ood_shift: float = _key("eval", DEFAULT_OOD_SHIFT)

    seeds: tuple[int, ...] = _list_key("run", tuple(range(20)))
    root_seed: int = _key("run", 0)
    output_dir: str = _key("run", "")
    jobs: int = _key("run", 1)

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")
        for name in ("methods", "sample_sizes", "seeds", "rho", "iv_strength"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"{name} must not be empty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if "dmliv" in self.methods and self.K < 2:
            raise ConfigError("K must be >= 2 for dmliv")
        if any(n < 1 for n in self.sample_sizes):
            raise ConfigError("sample sizes must be positive")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    # -- keys ---------------------------------------------------------------

    @staticmethod
    def key_of(f: dataclasses.Field) -> str:
        ns = f.metadata["ns"]
        name = f.name[len(ns) + 1 :] if f.name.startswith(ns + "_") else f.name
        return f"{ns}.{name}"

    @classmethod
    def keys(cls) -> dict[str, dataclasses.Field]:
        return {cls.key_of(f): f for f in dataclasses.fields(cls)}

    def to_flat(self) -> dict[str, Any]:
        return {self.key_of(f): getattr(self, f.name) for f in dataclasses.fields(self)}

    def digest(self) -> str:
        """Stable hash of everything that affects results (not paths or parallelism)."""
        flat = {k: v for k, v in self.to_flat().items() if k not in ("run.output_dir", "run.jobs")}
        blob = json.dumps(flat, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    # -- derived ------------------------------------------------------------

    @property
    def output_path(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "dmliv-output"))

    def dmliv_config(self, method: str) -> DmlivConfig:
        wd_scale = self.naive_regularization if method == "naive" else 1.0
        if self.estimator == BOOSTED_TREES:
            nuis = RegressorConfig(
                BOOSTED_TREES,
                n_trees=self.trees_n_trees,
                min_leaf=self.trees_min_leaf_nuisance,
                max_depth=self.trees_max_depth,
                shrinkage=self.trees_shrinkage,
            )
            h = nuis.with_(min_leaf=self.trees_min_leaf_stage2)
        else:
            nuis = RegressorConfig(
                FEEDFORWARD,
                epochs=self.stage1_epochs,
                batch_size=self.stage1_batch_size,
                learning_rate=self.stage1_learning_rate,
                weight_decay=self.stage1_weight_decay * wd_scale,
                dropout_rate=self.stage1_dropout,
            )
            h = RegressorConfig(
                FEEDFORWARD,
                learning_rate=self.stage2_learning_rate,
                weight_decay=self.stage2_weight_decay,
                dropout_rate=self.stage2_dropout,
            )
        density = DensityConfig(
            **{k: v for k, v in nuis.to_dict().items() if k != "config_class"},
            n_components=self.stage1_components,
        )
        stage2 = Stage2Config(
            model=h,
            mc_samples=self.mc_samples,
            batch_size=self.stage2_batch_size,
            max_epochs=self.stage2_max_epochs,
            tol=self.stage2_tol,
            patience=self.stage2_patience,
            validation_fraction=self.stage2_validation_fraction,
        )
        return DmlivConfig(nuis, density, stage2, K=self.K, allow_weak_iv=self.allow_weak_iv)

    def cells(self) -> list[dict[str, Any]]:
        return [
            {"method": m, "N": int(n), "rho": float(r), "iv_strength": float(s), "seed": int(k)}
            for n in self.sample_sizes
            for r in self.rho
            for s in self.iv_strength
            for k in self.seeds
            for m in self.methods
        ]


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def _parse_value(f: dataclasses.Field, raw: str):
    raw = raw.strip()
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    try:
        if isinstance(default, tuple):
            elem = type(default[0]) if default else str
            return tuple(_parse_list(raw, elem))
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if default is None:
            return None if raw.lower() in ("", "none", "auto") else float(raw)
        return type(default)(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {ExperimentConfig.key_of(f)}: {raw!r}") from exc


def _parse_list(raw: str, elem) -> list:
    out: list = []
    for part in (p.strip() for p in raw.replace(";", ",").split(",")):
        if not part:
            continue
        span = re.fullmatch(r"(\d+)\s*-\s*(\d+)", part) if elem is int else None
        if span:
            out.extend(range(int(span[1]), int(span[2]) + 1))
        else:
            out.append(elem(part))
    return out


def config_from_mapping(values: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``{"ns.name": "text"}`` overrides on top of ``base``."""
    keys = ExperimentConfig.keys()
    updates = {}
    for k, raw in values.items():
        if k not in keys:
            raise ConfigError(f"unknown config key {k!r}")
        f = keys[k]
        updates[f.name] = _parse_value(f, raw)
    base = base or ExperimentConfig()
    return dataclasses.replace(base, **updates)


def _read_flat(path: str | Path) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[dmliv]\n" + Path(path).read_text())
    return dict(parser["dmliv"])


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Defaults, then the key-value file, then ``overrides`` (CLI flags)."""
    cfg = ExperimentConfig()
    if path is not None:
        cfg = config_from_mapping(_read_flat(path), cfg)
    if overrides:
        cfg = config_from_mapping(overrides, cfg)
    return cfg


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return str(v).lower() if isinstance(v, bool) else str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    buf.write(f"# resolved config, digest {cfg.digest()}, dmliv {__version__}\n")
    for k, v in cfg.to_flat().items():
        buf.write(f"{k} = {_fmt(v)}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------


def _hash_seed(*parts) -> int:
    h = hashlib.sha256(json.dumps([str(p) for p in parts]).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def cell_seeds(cfg: ExperimentConfig, cell: dict[str, Any]) -> dict[str, int]:
    """Data seed shared by all methods of a cell; fit and evaluation seeds per method."""
    base = (cfg.root_seed, cfg.dataset, cell["N"], cell["rho"], cell["iv_strength"], cell["seed"])
    return {
        "data": _hash_seed("data", *base),
        "fit": _hash_seed("fit", cell["method"], *base),
        "eval": _hash_seed("eval", *base),
    }


def _make_data(cfg: ExperimentConfig, cell: dict[str, Any], seed: int):
    if cfg.dataset == "demand":
        return generate_demand(DemandConfig(cell["N"], rho=cell["rho"], iv_strength=cell["iv_strength"], seed=seed))
    return generate_semisynth(SemiSynthConfig(cell["N"], d_C=cfg.d_C, K_levels=cfg.K_levels, seed=seed))


def run_cell(cfg: ExperimentConfig, cell: dict[str, Any]) -> dict[str, Any]:
    """One report row; failures become ``status="error"`` rows."""
    row: dict[str, Any] = {
        **cell,
        "estimator": cfg.estimator,
        "config_digest": cfg.digest(),
        "version": __version__,
    }
    t0 = time.perf_counter()
    try:
        seeds = cell_seeds(cfg, cell)
        data = _make_data(cfg, cell, seeds["data"])
        est = FITTERS[cell["method"]](data, cfg.dmliv_config(cell["method"]), seed=seeds["fit"])
        ev = np.random.SeedSequence(seeds["eval"]).spawn(4)
        row["stage1_s"], row["stage2_s"] = est.stage1_seconds, est.stage2_seconds
        row["mse_h"] = counterfactual_mse(est.model, data, cfg.n_eval_mse, seed=ev[0])
        bounds = default_action_bounds(data)
        policy = Policy(est.model, cfg.action_grid, bounds, seed=int(ev[1].generate_state(1)[0]))
        in_dist = evaluate_policy(policy, data, cfg.n_eval_policy, 0.0, seed=ev[2])
        ood = evaluate_policy(policy, data, cfg.n_eval_policy, cfg.ood_shift, seed=ev[3])
        rand = evaluate_policy(RandomPolicy(bounds, seed=seeds["eval"]), data, cfg.n_eval_policy, 0.0, seed=ev[2])
        row.update(
            reward_in_dist=in_dist.value,
            reward_ood=ood.value,
            subopt=in_dist.suboptimality,
            subopt_ood=ood.suboptimality,
            subopt_random=rand.suboptimality,
            status="ok",
            error="",
        )
    except Exception as exc:  # noqa: BLE001 - one failing cell must not stop the sweep
        log.warning("cell %s failed: %s", cell, exc)
        log.debug("%s", traceback.format_exc())
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    row["wall_clock_s"] = time.perf_counter() - t0
    return {c: row.get(c, "") for c in REPORT_COLUMNS}


def _cell_key(row) -> tuple:
    return (str(row["method"]), int(row["N"]), float(row["rho"]), float(row["iv_strength"]), int(row["seed"]))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    rows: list[dict[str, Any]]
    path: Path
    config_digest: str

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=REPORT_COLUMNS)

    def ok_rows(self) -> list[dict[str, Any]]:
        return [r for r in self.rows if r["status"] == "ok"]


def read_report(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=False, na_values=[""])


def _append_row(path: Path, row: dict[str, Any]) -> None:
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        if new:
            w.writeheader()
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        fh.flush()
        os.fsync(fh.fileno())


def _load_existing(path: Path, digest: str) -> list[dict[str, Any]]:
    """Completed rows of an earlier run of the same config; error rows are dropped for retry."""
    if not path.exists() or path.stat().st_size == 0:
        return []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    digests = {r["config_digest"] for r in rows}
    if digests - {digest}:
        raise ConfigError(
            f"{path} holds results for config digest(s) {sorted(digests - {digest})}, "
            f"not {digest}; use a fresh output directory"
        )
    done = [_typed(r) for r in rows if r["status"] == "ok"]
    if len(done) != len(rows):
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for r in rows:
                if r["status"] == "ok":
                    w.writerow(r)
        tmp.replace(path)
    return done


def _typed(r: dict[str, str]) -> dict[str, Any]:
    out: dict[str, Any] = dict(r)
    for k in ("N", "seed"):
        out[k] = int(r[k])
    for k in ("rho", "iv_strength", *METRICS):
        out[k] = float(r[k]) if r[k] not in ("", None) else math.nan
    return out


def _init_worker():
    import torch

    torch.set_num_threads(1)


def run_experiment(
    cfg: ExperimentConfig, progress: Optional[Callable[[dict[str, Any]], None]] = None
) -> ExperimentReport:
    """Run every pending cell, appending one row per cell to ``report.csv``.

    Writes the resolved config to ``config.lock`` in the output directory.
    Cells already completed under the same config digest are skipped.
    """
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.csv"
    digest = cfg.digest()
    (out / "config.lock").write_text(dump_config(cfg))
    rows = _load_existing(report_path, digest)
    done = {_cell_key(r) for r in rows}
    pending = [c for c in cfg.cells() if _cell_key(c) not in done]
    log.info("%d cells pending, %d already done", len(pending), len(done))

    def record(row):
        _append_row(report_path, row)
        rows.append(row)
        if progress is not None:
            progress(row)

    if cfg.jobs == 1 or len(pending) <= 1:
        for cell in pending:
            record(run_cell(cfg, cell))
    else:
        with ProcessPoolExecutor(max_workers=cfg.jobs, initializer=_init_worker) as pool:
            for row in pool.map(run_cell, [cfg] * len(pending), pending):
                record(row)
    order = {_cell_key(c): i for i, c in enumerate(cfg.cells())}
    rows.sort(key=lambda r: order.get(_cell_key(r), len(order)))
    return ExperimentReport(rows, report_path, digest)


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


def _as_frame(report) -> pd.DataFrame:
    if isinstance(report, ExperimentReport):
        return report.frame()
    if isinstance(report, pd.DataFrame):
        return report
    return read_report(report)


def summarize(
    report, group_keys: Sequence[str] = ("method", "N"), metrics: Sequence[str] | None = None
) -> pd.DataFrame:
    """Mean, std (ddof 1), median and 25th/75th percentiles per group.

    Percentiles use linear interpolation between order statistics (type 7).
    Error rows are left out.
    """
    df = _as_frame(report)
    if df.empty:
        raise ValueError("empty report")
    missing = [k for k in group_keys if k not in df.columns]
    if missing:
        raise KeyError(f"unknown group keys {missing}")
    if "status" in df.columns:
        df = df[df["status"] == "ok"]
    metrics = [m for m in (metrics or METRICS) if m in df.columns]
    if "config_digest" in df.columns and df["config_digest"].nunique() > 1 and "config_digest" not in group_keys:
        raise ValueError("report mixes config digests; group by config_digest or split it")
    g = df.groupby(list(group_keys), sort=True)[metrics]
    stats = {
        "mean": g.mean(),
        "std": g.std(ddof=1),
        "median": g.median(),
        "q25": g.quantile(0.25, interpolation="linear"),
        "q75": g.quantile(0.75, interpolation="linear"),
    }
    parts = [s.add_suffix(f"_{name}") for name, s in stats.items()]
    table = pd.concat(parts, axis=1)
    table.insert(0, "n_runs", g.size())
    ordered = ["n_runs"] + [f"{m}_{s}" for m in metrics for s in stats]
    return table[ordered].reset_index()


def plot_data(summary: pd.DataFrame, x: str = "N", series: str = "method") -> dict[str, Any]:
    """``{"x": x, "series": {name: {"x": [...], "<metric>_<stat>": [...]}}}``."""
    if x not in summary.columns or series not in summary.columns:
        raise KeyError(f"summary lacks {x!r} or {series!r}")
    value_cols = [c for c in summary.columns if c not in (x, series)]
    blob: dict[str, Any] = {"x": x, "series_key": series, "series": {}}
    for name, part in summary.sort_values(x).groupby(series, sort=True):
        entry = {"x": part[x].tolist()}
        for c in value_cols:
            if pd.api.types.is_numeric_dtype(part[c]):
                entry[c] = [None if pd.isna(v) else float(v) for v in part[c]]
        blob["series"][str(name)] = entry
    return blob


# ---------------------------------------------------------------------------
# diagnostics driver
# ---------------------------------------------------------------------------


def run_diagnostics(
    cfg: ExperimentConfig,
    n_samples: int = 20_000,
    directions: int = 8,
    r_step: float = 1e-2,
    rate_runs: Iterable[tuple[float, float]] | None = None,
    rate_bounds: tuple[float, float] = (-0.35, 0.8),
) -> tuple[dict[str, Any], int]:
    """Orthogonality, relevance and (given runs) rate checks; returns reports and an exit code.

    Expected outcomes: the orthogonal score is judged ``orthogonal``, the
    standard score ``not_orthogonal``, and a rate fit (when runs are given)
    has slope <= ``rate_bounds[0]`` with r^2 >= ``rate_bounds[1]``.  The
    exit code is 1 if any expectation fails, else 0.  Relevance is reported
    and never fails the run.
    """
    reports: dict[str, Any] = {"config_digest": cfg.digest(), "checks": []}
    checks = reports["checks"]
    rho, strength = cfg.rho[0], cfg.iv_strength[0]
    seed = _hash_seed("diagnostics", cfg.root_seed)

    def add(name, expected, passed, payload):
        checks.append({"name": name, "expected": expected, "passed": bool(passed), "report": payload})

    try:
        if cfg.dataset == "demand":
            data = generate_demand(DemandConfig(n_samples, rho=rho, iv_strength=strength, seed=seed))
        else:
            data = generate_semisynth(SemiSynthConfig(n_samples, d_C=cfg.d_C, K_levels=cfg.K_levels, seed=seed))
        for kind, expected in ((ORTHOGONAL, "orthogonal"), (STANDARD, "not_orthogonal")):
            for dk in ("joint", "s_only", "g_only"):
                if kind == STANDARD and dk == "s_only":
                    continue  # the standard score has no s
                rep = check_orthogonality(kind, data, directions, r_step, seed=seed, direction_kind=dk)
                add(f"orthogonality/{kind}/{dk}", expected, rep.verdict == expected, rep.to_dict())
        rel = relevance_check(data)
        add("relevance", "reported", True, rel.to_dict())
    except Exception as exc:  # noqa: BLE001 - surfaced as a structured entry
        add("diagnostics_error", "no error", False, {"error": f"{type(exc).__name__}: {exc}"})
    if rate_runs is not None:
        try:
            fit = fit_rate(rate_runs)
            ok = fit.slope <= rate_bounds[0] and fit.r_squared >= rate_bounds[1]
            add("rate", f"slope <= {rate_bounds[0]}, r2 >= {rate_bounds[1]}", ok, fit.to_dict())
        except Exception as exc:  # noqa: BLE001
            add("rate", "fit", False, {"error": f"{type(exc).__name__}: {exc}"})
    code = 0 if all(c["passed"] for c in checks) else 1
    return reports, code
