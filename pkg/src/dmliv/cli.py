"""Command-line entry point: ``dmliv <command>``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import __version__
from .datagen import DemandConfig, SemiSynthConfig, generate_demand, generate_semisynth, load_csv, save_csv
from .harness import (
    ConfigError,
    dump_config,
    load_config,
    plot_data,
    read_report,
    run_diagnostics,
    run_experiment,
    summarize,
)
from .orthogonal import FITTERS, WeakInstrumentError, counterfactual_mse


def _overrides(pairs: tuple[str, ...]) -> dict[str, str]:
    out = {}
    for p in pairs:
        if "=" not in p:
            raise click.BadParameter(f"expected key=value, got {p!r}", param_hint="--set")
        k, v = p.split("=", 1)
        out[k.strip()] = v
    return out


def _config(config_file, sets, **flags):
    mapping = _overrides(sets)
    mapping.update({k: str(v) for k, v in flags.items() if v is not None})
    try:
        return load_config(config_file, mapping)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from exc


_config_opts = [
    click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), help="key = value config file"),
    click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="override one config key (repeatable)"),
    click.option("--output-dir", default=None, help="results directory (default: $DMLIV_OUTPUT_ROOT)"),
]


def config_options(fn):
    for opt in reversed(_config_opts):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(__version__, prog_name="dmliv")
@click.option("-v", "--verbose", count=True, help="more logging")
def main(verbose: int) -> None:
    """Debiased two-stage IV regression and offline IV bandits."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--dataset", type=click.Choice(["demand", "semisynth"]), default="demand")
@click.option("-n", "--n-samples", type=int, required=True)
@click.option("--rho", type=float, default=0.9, show_default=True)
@click.option("--iv-strength", type=float, default=1.0, show_default=True)
@click.option("--d-c", "d_C", type=int, default=6, show_default=True)
@click.option("--k-levels", "K_levels", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--raw", is_flag=True, help="keep action and outcome unstandardized")
@click.option("-o", "--out", type=click.Path(dir_okay=False), required=True)
def generate(dataset, n_samples, rho, iv_strength, d_C, K_levels, seed, raw, out):
    """Draw a synthetic dataset to CSV (with a JSON sidecar)."""
    if dataset == "demand":
        obs = generate_demand(DemandConfig(n_samples, rho=rho, iv_strength=iv_strength, seed=seed, standardize=not raw))
    else:
        obs = generate_semisynth(SemiSynthConfig(n_samples, d_C=d_C, K_levels=K_levels, seed=seed, standardize=not raw))
    path = save_csv(obs, out)
    click.echo(f"wrote {obs.n} rows to {path}")


@main.command()
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--method", type=click.Choice(sorted(FITTERS)), default="dmliv", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--allow-weak-iv", is_flag=True, help="fit even if the instrument looks weak")
@click.option("-o", "--out", type=click.Path(dir_okay=False), required=True, help="model JSON")
@click.option("--trace", type=click.Path(dir_okay=False), default=None, help="training trace CSV")
@config_options
def fit(data_path, method, seed, allow_weak_iv, out, trace, config_file, sets, output_dir):
    """Fit one estimator on a CSV dataset."""
    cfg = _config(config_file, sets)
    obs = load_csv(data_path)
    try:
        est = FITTERS[method](obs, cfg.dmliv_config(method), seed=seed, allow_weak_iv=allow_weak_iv or None)
    except WeakInstrumentError as exc:
        raise click.ClickException(str(exc)) from exc
    est.save(out)
    if trace:
        est.write_trace(trace)
    summary = {"method": method, "final_loss": est.final_loss, "model": str(out)}
    if obs.truth is not None:
        summary["mse_h"] = counterfactual_mse(est.model, obs, seed=seed)
    click.echo(json.dumps(summary))


@main.command()
@config_options
def sweep(config_file, sets, output_dir):
    """Run (or resume) the experiment grid and write report.csv."""
    cfg = _config(config_file, sets, **{"run.output_dir": output_dir})

    def progress(row):
        msg = f"{row['method']} N={row['N']} rho={row['rho']} iv={row['iv_strength']} seed={row['seed']}: "
        msg += f"mse_h={row['mse_h']:.4g}" if row["status"] == "ok" else row["error"]
        click.echo(msg, err=True)

    try:
        report = run_experiment(cfg, progress=progress)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc
    n_err = sum(r["status"] != "ok" for r in report.rows)
    click.echo(f"{len(report.rows)} rows ({n_err} errors) in {report.path}")


@main.command()
@click.option("-n", "--n-samples", type=int, default=20_000, show_default=True)
@click.option("--directions", type=int, default=8, show_default=True)
@click.option("--r-step", type=float, default=1e-2, show_default=True)
@click.option("--report", "report_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="sweep report whose (N, mse_h) pairs feed the rate fit")
@click.option("-o", "--out", type=click.Path(dir_okay=False), default=None, help="JSON output")
@config_options
def diagnose(n_samples, directions, r_step, report_path, out, config_file, sets, output_dir):
    """Orthogonality, relevance and rate checks; exit code 1 if any fails."""
    cfg = _config(config_file, sets, **{"run.output_dir": output_dir})
    runs = None
    if report_path:
        df = read_report(report_path)
        df = df[(df["status"] == "ok") & (df["method"] == "dmliv")]
        runs = list(zip(df["N"], df["mse_h"] ** 0.5))
    reports, code = run_diagnostics(cfg, n_samples, directions, r_step, rate_runs=runs)
    text = json.dumps(reports, indent=2)
    if out:
        Path(out).write_text(text)
    for c in reports["checks"]:
        click.echo(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} (expected {c['expected']})")
    sys.exit(code)


@main.command("summarize")
@click.argument("report_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--group-by", default="method,N", show_default=True)
@click.option("-o", "--out", type=click.Path(dir_okay=False), default=None, help="summary CSV")
def summarize_cmd(report_path, group_by, out):
    """Per-group mean, std, median and quartiles of every metric."""
    keys = [k.strip() for k in group_by.split(",") if k.strip()]
    try:
        table = summarize(read_report(report_path), keys)
    except (KeyError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    if out:
        table.to_csv(out, index=False)
    else:
        click.echo(table.to_csv(index=False), nl=False)


@main.command("plot-data")
@click.argument("report_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--series", default="method", show_default=True)
@click.option("-o", "--out", type=click.Path(dir_okay=False), default=None)
def plot_data_cmd(report_path, series, out):
    """JSON for plotting: x = N, one series per method."""
    table = summarize(read_report(report_path), [series, "N"])
    text = json.dumps(plot_data(table, x="N", series=series), indent=2)
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text)


@main.command("show-config")
@config_options
def show_config(config_file, sets, output_dir):
    """Print the resolved configuration."""
    click.echo(dump_config(_config(config_file, sets, **{"run.output_dir": output_dir})), nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
