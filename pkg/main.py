"""
main.py
Command-line entry point: simulate benchmark data, mask outcomes, impute and fit real or
simulated series, and run the evaluation grid.

    python main.py simulate --config run.json --out out/ --seed 7
    python main.py mask     --config run.json --data out/data.csv --out masked/
    python main.py impute   --config run.json --data masked/masked.csv --method ssmimpute --out imp/
    python main.py fit      --config run.json --data out/data.csv --out fit/
    python main.py evaluate --config run.json --out grid/ [--full-scale] [--keep 5]
    python main.py settings [--threads 4] [--keep 5] [--location ~/shared/settings.json]

Exit codes: 0 success, 2 config or schema error, 3 insufficient data, 4 numerical failure.
"""

import json
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Dict, Optional

import click
import numpy as np
import pandas as pd
from colorama import Fore, Style
from colorama import init as colorama_init

from design import ModelSpec, TimeSeriesDataset, build_design
from dlm_core import ContractError, InsufficientData, ModelDegeneracy, NumericalFailure, SSMError
from imputers import (
    METHODS,
    ImputationResult,
    PooledEstimate,
    fit_with_structure,
    run_method,
    spliced_fit,
)
from missingness import apply_mechanism, missingness_report
from services.datasets import read_dataset, read_truth, write_dataset, write_truth
from services.outputs import (
    cleanup_stale_tmp,
    metadata,
    new_run_dir,
    retention_prune,
    write_csv,
    write_json,
    write_lines,
)
from services.plots import coefficient_paths_svg, grid_boxplots
from settings_manager import (
    ConfigError,
    RunConfig,
    get_default_out_dir,
    get_runs_to_keep,
    get_settings_file_path,
    get_structure_defaults,
    get_thread_cap,
    load_run_config,
    load_settings,
    set_default_out_dir,
    set_runs_to_keep,
    set_settings_file_path,
    set_structure_defaults,
    set_thread_cap,
)
from simulation import generate_scenario, run_grid
from structure import one_step_prediction_score

logger = logging.getLogger("ssmimpute")

EXIT_CONFIG = 2
EXIT_INSUFFICIENT = 3
EXIT_NUMERICAL = 4
# raw LAPACK failures surface as numerical failures too
COMMAND_ERRORS = (SSMError, np.linalg.LinAlgError)
DEFAULT_METHOD = "ssmimpute"

_LEVEL_COLORS = {
    logging.DEBUG: Style.DIM,
    logging.INFO: "",
    logging.WARNING: Fore.YELLOW,
    logging.ERROR: Fore.RED,
    logging.CRITICAL: Fore.RED + Style.BRIGHT,
}


class _ColorFormatter(logging.Formatter):
    def format(self, record):
        text = super().format(record)
        color = _LEVEL_COLORS.get(record.levelno, "")
        return f"{color}{text}{Style.RESET_ALL}" if color else text


def _install_global_excepthook(log_path: str):
    """Install a sys.excepthook that appends unhandled tracebacks to a crash log."""
    import traceback as _traceback

    previous = sys.excepthook

    def _handler(exctype, value, tb):
        msg = "".join(_traceback.format_exception(exctype, value, tb))
        try:
            with open(log_path, "a", encoding="utf-8") as _f:
                _f.write("\n=== Unhandled exception ===\n")
                _f.write(msg)
        except Exception:
            pass
        previous(exctype, value, tb)

    try:
        sys.excepthook = _handler
    except Exception:
        pass


def _enable_faulthandler(log_path: str):
    """Enable Python faulthandler to dump tracebacks on fatal errors (e.g., segfaults).

    Writes native crash backtraces for all threads to the given log file.
    """
    try:
        import faulthandler as _faulthandler

        try:
            f = open(log_path, "a", encoding="utf-8")
        except Exception:
            f = None
        if f is not None:
            _faulthandler.enable(file=f, all_threads=True)
    except Exception:
        pass


def _setup_logging(out_dir: str, verbose: bool):
    """Console handler with coloured levels plus run.log in the output directory."""
    colorama_init()
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_ssmimpute", False):
            root.removeHandler(h)
            h.close()
    level = logging.DEBUG if verbose else logging.INFO
    root.setLevel(level)
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(_ColorFormatter("%(levelname)s %(name)s: %(message)s"))
    console.setLevel(level)
    console._ssmimpute = True  # type: ignore[attr-defined]
    root.addHandler(console)
    try:
        os.makedirs(out_dir, exist_ok=True)
        fh = logging.FileHandler(os.path.join(out_dir, "run.log"), mode="a", encoding="utf-8")
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        fh.setLevel(logging.DEBUG)
        fh._ssmimpute = True  # type: ignore[attr-defined]
        root.addHandler(fh)
    except Exception:
        pass
    # Prepare crash/diagnostic logs
    try:
        _install_global_excepthook(os.path.join(out_dir, "crash.log"))
        _enable_faulthandler(os.path.join(out_dir, "native_crash.log"))
    except Exception:
        pass


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, InsufficientData):
        return EXIT_INSUFFICIENT
    if isinstance(exc, (NumericalFailure, ModelDegeneracy)):
        return EXIT_NUMERICAL
    if isinstance(exc, ContractError):
        return EXIT_CONFIG
    return EXIT_NUMERICAL


def _fail(exc: Exception):
    code = _exit_code(exc)
    kind = "config error" if code == EXIT_CONFIG else type(exc).__name__
    click.echo(f"error ({kind}): {exc}", err=True)
    logger.error("%s: %s", type(exc).__name__, exc)
    raise SystemExit(code)


def _load(config: Optional[str], seed: Optional[int]) -> RunConfig:
    cfg = load_run_config(config)
    if seed is None and cfg.seed is None:
        seed = 0
    return cfg.with_seed(seed)


def _config_doc(config: Optional[str], seed: Optional[int], **flags) -> Dict[str, Any]:
    """What the metadata hash covers: the config file content plus the effective flags."""
    doc: Dict[str, Any] = {"flags": dict(flags, seed=seed)}
    if config:
        with open(config, "r", encoding="utf-8") as f:
            doc["config"] = f.read()
    return doc


def _out_dir(flag: Optional[str], cfg: RunConfig) -> str:
    return flag or cfg.out or get_default_out_dir()


def _workers(configured: int) -> int:
    cap = get_thread_cap()
    return min(configured, cap) if configured > 1 else cap


# --- Commands ---------------------------------------------------------------------------------


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug-level logging.")
@click.pass_context
def cli(ctx, verbose):
    """State space multiple imputation for single-subject time series."""
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose


@cli.command()
@click.option("--config", "config", type=click.Path(dir_okay=False), help="Run configuration JSON.")
@click.option("--out", "out", type=click.Path(file_okay=False), help="Output directory.")
@click.option("--seed", type=int, help="Run seed (overrides the config).")
@click.pass_context
def simulate(ctx, config, out, seed):
    """Generate a benchmark dataset (data.csv) with its coefficient truth (truth.csv)."""
    try:
        cfg = _load(config, seed)
        out_dir = _out_dir(out, cfg)
        _setup_logging(out_dir, ctx.obj["verbose"])
        ds, truth = generate_scenario(cfg.scenario)
        meta = metadata(_config_doc(config, cfg.seed), cfg.seed, "simulate", scenario=cfg.scenario.kind)
        write_dataset(ds, os.path.join(out_dir, "data.csv"), meta)
        write_truth(truth, os.path.join(out_dir, "truth.csv"), meta)
        write_csv(truth.noise_frame(), os.path.join(out_dir, "noise.csv"), meta)
        logger.info("simulated %s scenario, T=%d, into %s", cfg.scenario.kind, ds.T, out_dir)
    except COMMAND_ERRORS as exc:
        _fail(exc)


@cli.command()
@click.option("--config", "config", type=click.Path(dir_okay=False))
@click.option("--data", "data", type=click.Path(dir_okay=False), help="Fully observed dataset CSV.")
@click.option("--out", "out", type=click.Path(file_okay=False))
@click.option("--seed", type=int)
@click.pass_context
def mask(ctx, config, data, out, seed):
    """Apply the configured missingness mechanism to a fully observed dataset."""
    try:
        cfg = _load(config, seed)
        out_dir = _out_dir(out, cfg)
        _setup_logging(out_dir, ctx.obj["verbose"])
        path = data or cfg.data
        if not path:
            raise ConfigError("mask needs --data or io.data")
        ds = read_dataset(path, exposures=cfg.model.exposures)
        masked = apply_mechanism(ds, cfg.mechanism)
        meta = metadata(
            _config_doc(config, cfg.seed, data=path), cfg.seed, "mask", mechanism=cfg.mechanism.to_dict()
        )
        write_dataset(masked, os.path.join(out_dir, "masked.csv"), meta)
        write_csv(
            pd.DataFrame({"t": masked.t_index, "y": masked.y_true}), os.path.join(out_dir, "truth_y.csv"), meta
        )
        write_json(missingness_report(masked, cfg.model).to_dict(), os.path.join(out_dir, "missingness.json"))
    except COMMAND_ERRORS as exc:
        _fail(exc)


def _write_result(
    result: ImputationResult,
    ds: TimeSeriesDataset,
    out_dir: str,
    meta: Dict[str, Any],
    truth: Optional[Dict[str, np.ndarray]] = None,
):
    completed = {"t": ds.t_index}
    for i, row in enumerate(result.completed, start=1):
        completed[f"y_{i}"] = row
    write_csv(pd.DataFrame(completed), os.path.join(out_dir, "completed.csv"), meta)
    est = result.pooled.to_frame()
    est.insert(0, "method", result.method)
    write_csv(est, os.path.join(out_dir, "estimates.csv"), meta)
    write_csv(result.trace_frame(), os.path.join(out_dir, "trace.csv"), meta)
    cps = [
        {"coefficient": name, "change_point": cp}
        for name, points in result.change_points.items()
        for cp in points
    ]
    write_csv(pd.DataFrame(cps, columns=["coefficient", "change_point"]), os.path.join(out_dir, "change_points.csv"), meta)
    if result.spliced is not None:
        sp = result.spliced.to_frame().rename(columns={"t": "original_t"})
        write_csv(sp, os.path.join(out_dir, "spliced_estimates.csv"), meta)
        write_csv(
            pd.DataFrame({"spliced_t": np.arange(1, len(result.time_map) + 1), "original_t": result.time_map}),
            os.path.join(out_dir, "time_map.csv"),
            meta,
        )
    summary = {
        "method": result.method,
        "converged": result.converged,
        "iterations": result.iterations,
        "loglik": result.trace[-1].loglik if result.trace else None,
        "params": result.params.as_dict(),
        "change_points": {k: list(v) for k, v in result.change_points.items()},
        "model": result.spec.to_dict() if result.spec is not None else None,
    }
    write_json(summary, os.path.join(out_dir, "summary.json"))
    coefficient_paths_svg(result.pooled, os.path.join(out_dir, "paths.svg"), title=result.method, truth=truth)


@cli.command()
@click.option("--config", "config", type=click.Path(dir_okay=False))
@click.option("--data", "data", type=click.Path(dir_okay=False), help="Dataset CSV with missing outcomes.")
@click.option("--method", "method", type=click.Choice(METHODS), help="Imputation method.")
@click.option("--out", "out", type=click.Path(file_okay=False))
@click.option("--seed", type=int)
@click.option("--truth", "truth", type=click.Path(dir_okay=False), help="truth.csv from simulate, drawn on paths.svg.")
@click.pass_context
def impute(ctx, config, data, method, out, seed, truth):
    """Impute missing outcomes and estimate coefficient paths with one method."""
    try:
        cfg = _load(config, seed)
        out_dir = _out_dir(out, cfg)
        _setup_logging(out_dir, ctx.obj["verbose"])
        path = data or cfg.data
        if not path:
            raise ConfigError("impute needs --data or io.data")
        method = method or cfg.method or DEFAULT_METHOD
        if method not in METHODS:
            raise ConfigError(f"config.method: unknown method '{method}', expected one of {METHODS}")
        ds = read_dataset(path, exposures=cfg.model.exposures)
        icfg = replace(cfg.imputation, n_jobs=_workers(cfg.imputation.n_jobs))
        result = run_method(ds, cfg.model, method, icfg)
        if not result.converged:
            logger.warning("%s did not converge; results are written with the trace", method)
        meta = metadata(_config_doc(config, cfg.seed, data=path, method=method), cfg.seed, "impute", method=result.method)
        paths_truth = read_truth(truth, ds.t_index) if truth else None
        _write_result(result, ds, out_dir, meta, truth=paths_truth)
        write_json(missingness_report(ds, cfg.model).to_dict(), os.path.join(out_dir, "missingness.json"))
    except COMMAND_ERRORS as exc:
        _fail(exc)


def _fit_candidate(ds: TimeSeriesDataset, spec: ModelSpec, cfg: RunConfig):
    if ds.n_missing:
        logger.warning("data has %d missing outcome(s); fitting on the spliced complete cases", ds.n_missing)
        ds, fit, spec, _ = spliced_fit(ds, spec, cfg.imputation)
        return ds, fit, spec
    fit, spec, _ = fit_with_structure(ds, build_design(ds, spec), spec, cfg.imputation)
    return ds, fit, spec


@cli.command()
@click.option("--config", "config", type=click.Path(dir_okay=False))
@click.option("--data", "data", type=click.Path(dir_okay=False))
@click.option("--out", "out", type=click.Path(file_okay=False))
@click.option("--seed", type=int)
@click.pass_context
def fit(ctx, config, data, out, seed):
    """Fit each candidate model, write its estimates, and rank candidates by one-step score."""
    try:
        cfg = _load(config, seed)
        out_dir = _out_dir(out, cfg)
        _setup_logging(out_dir, ctx.obj["verbose"])
        path = data or cfg.data
        if not path:
            raise ConfigError("fit needs --data or io.data")
        meta = metadata(_config_doc(config, cfg.seed, data=path), cfg.seed, "fit")
        ranking = []
        candidates = cfg.candidates()
        exposures = tuple(dict.fromkeys(a for _, m in candidates for a in m.exposures))
        raw = read_dataset(path, exposures=exposures)
        for name, spec in candidates:
            ds, model_fit, learned = _fit_candidate(raw, spec, cfg)
            score = one_step_prediction_score(model_fit.state_space, ds.y)
            ranking.append(
                {
                    "model": name,
                    "score": score,
                    "loglik": model_fit.loglik,
                    "coefficients": model_fit.design.k,
                    "observed": model_fit.filtered.n_observed,
                    "converged": model_fit.converged,
                }
            )
            pooled = PooledEstimate.from_fit(model_fit, ds.t_index)
            est = pooled.to_frame()
            est.insert(0, "model", name)
            suffix = "" if len(candidates) == 1 else f"_{name}"
            write_csv(est, os.path.join(out_dir, f"estimates{suffix}.csv"), meta)
            write_json(
                {
                    "model": name,
                    "loglik": model_fit.loglik,
                    "score": score,
                    "params": model_fit.params.as_dict(),
                    "converged": model_fit.converged,
                    "spec": learned.to_dict(),
                },
                os.path.join(out_dir, f"summary{suffix}.json"),
            )
            coefficient_paths_svg(pooled, os.path.join(out_dir, f"paths{suffix}.svg"), title=name)
            logger.info("model %s: loglik %.4f, one-step score %.6g", name, model_fit.loglik, score)
        table = pd.DataFrame(ranking).sort_values(["score", "model"], kind="mergesort")
        write_csv(table.reset_index(drop=True), os.path.join(out_dir, "ranking.csv"), meta)
    except COMMAND_ERRORS as exc:
        _fail(exc)


@cli.command()
@click.option("--config", "config", type=click.Path(dir_okay=False))
@click.option("--out", "out", type=click.Path(file_okay=False))
@click.option("--seed", type=int)
@click.option("--full-scale", is_flag=True, help="500 replications at T=1000 instead of the desk-scale grid.")
@click.option("--keep", type=int, default=None, help="Write into a timestamped run directory and keep the newest N.")
@click.pass_context
def evaluate(ctx, config, out, seed, full_scale, keep):
    """Run the simulation grid and write metrics, raw estimates, change points and boxplots."""
    try:
        cfg = _load(config, seed)
        base_dir = _out_dir(out, cfg)
        keep = get_runs_to_keep() if keep is None else keep
        cleanup_stale_tmp(base_dir)
        out_dir = new_run_dir(base_dir) if keep > 0 else base_dir
        _setup_logging(out_dir, ctx.obj["verbose"])
        grid = cfg.grid.full_scale() if full_scale else cfg.grid
        grid = replace(grid, n_jobs=_workers(grid.n_jobs))
        result = run_grid(grid, progress=not ctx.obj["verbose"])
        meta = metadata(
            _config_doc(config, cfg.seed, full_scale=full_scale), cfg.seed, "evaluate", reps=grid.reps
        )
        write_csv(result.metrics, os.path.join(out_dir, "metrics.csv"), meta)
        write_csv(result.raw, os.path.join(out_dir, "raw_estimates.csv"), meta)
        write_csv(result.change_points, os.path.join(out_dir, "change_points.csv"), meta)
        write_csv(result.change_point_summary, os.path.join(out_dir, "change_point_summary.csv"), meta)
        write_lines(result.failures, os.path.join(out_dir, "failures.log"))
        grid_boxplots(result.raw, os.path.join(out_dir, "plots"))
        if keep > 0:
            retention_prune(base_dir, keep)
        logger.info("evaluation written to %s (%d failed method run(s))", out_dir, len(result.failures))
    except COMMAND_ERRORS as exc:
        _fail(exc)


@cli.command("settings")
@click.option("--location", type=click.Path(dir_okay=False), help="Move settings.json to this path (remembered).")
@click.option("--out-dir", type=str, help="Default output directory.")
@click.option("--threads", type=int, help="Worker cap for grid cells and refits.")
@click.option("--keep", type=int, help="Run directories evaluate keeps (0 keeps all).")
@click.option("--min-seg", type=int, help="Shortest segment between change points.")
@click.option("--split-threshold", type=float, help="Standardized jump that accepts a change point.")
@click.option("--invariance-ratio", type=float, help="Path variation / posterior SD below which a path is flat.")
@click.option("--allow-ar/--no-allow-ar", default=None, help="Allow AR verdicts in structure learning.")
def settings_cmd(location, out_dir, threads, keep, min_seg, split_threshold, invariance_ratio, allow_ar):
    """Show the per-user settings, or update the ones given."""
    if location:
        set_settings_file_path(location)
    if out_dir:
        set_default_out_dir(out_dir)
    if threads is not None:
        set_thread_cap(threads)
    if keep is not None:
        set_runs_to_keep(keep)
    if any(v is not None for v in (min_seg, split_threshold, invariance_ratio, allow_ar)):
        set_structure_defaults(
            min_seg=min_seg,
            split_threshold=split_threshold,
            invariance_ratio=invariance_ratio,
            allow_ar=allow_ar,
        )
    effective = {
        "settings_file": get_settings_file_path(),
        "out_dir": get_default_out_dir(),
        "threads": get_thread_cap(),
        "runs_to_keep": get_runs_to_keep(),
        "structure": get_structure_defaults(),
        "stored": load_settings(),
    }
    click.echo(json.dumps(effective, indent=2, sort_keys=True))


def main():
    cli(obj={})


if __name__ == "__main__":
    main()
