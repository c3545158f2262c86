"""Command-line front end: data ingestion, fits, and the simulation studies.

Interchange format is CSV with a header row everywhere. Exit codes are a
contract: 0 success, 1 validation error, 2 numerical failure. Flags override
config-file entries, which override built-in defaults; the default output
directory can also be set with the PANELGLMM_OUTPUT_DIR environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .components import fit_components, principal_basis
from .errors import NumericalError
from .families import Family
from .panel import PanelDataset, PanelLayout
from .ridge_em import RidgeConfig, fit
from .simulate import (
    SimScenario,
    Table,
    convergence_study,
    default_beta,
    generate_panel,
    mse_study,
    rho_recovery_study,
)

__all__ = ["RunConfig", "parse_args", "load_panel_csv", "run", "main"]

COMMANDS = ("fit", "fit-components", "simulate", "study-convergence", "study-mse", "study-rho")

ENV_OUTPUT_DIR = "PANELGLMM_OUTPUT_DIR"


@dataclass(frozen=True)
class RunConfig:
    command: str
    input: str | None = None
    output_dir: str = "."
    dump_config: str | None = None
    family: str = "poisson-log"
    dispersion: float = 1.0
    tol: float = 1e-6
    max_iters: int = 500
    lambda_min: float = 1e-4
    lambda_max: float = 1e4
    lambda_count: int = 50
    s_grid: tuple[float, ...] = (0.1, 0.5)
    l_grid: tuple[float, ...] = (1.0, 2.0)
    n_components: int = 1
    cv_folds: int = 2
    seed: int = 0
    n_individuals: int = 10
    n_times: int = 20
    n_covariates: int = 40
    beta: tuple[float, ...] | None = None
    sigma1_sq: float = 0.5
    sigma2_sq: float = 0.5
    rho: float = 0.5
    x_correlation: float = 0.7
    n_replicates: int = 40
    t_list: tuple[int, ...] = (10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
    rho_list: tuple[float, ...] = (0.2, 0.5, 0.8)


_TUPLE_FLOAT_FIELDS = {"s_grid", "l_grid", "rho_list", "beta"}
_TUPLE_INT_FIELDS = {"t_list"}


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; raise instead so main can
    map every validation problem to exit code 1."""

    def error(self, message):
        raise ValueError(message)


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v != "")
    except ValueError as exc:
        raise ValueError(f"malformed number list {text!r}") from exc


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v != "")
    except ValueError as exc:
        raise ValueError(f"malformed integer list {text!r}") from exc


def _build_parser() -> _Parser:
    p = _Parser(prog="panelglmm", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default=None, help="JSON config file (flags override it)")
    p.add_argument("--dump-config", default=None, help="write the resolved config as JSON")
    p.add_argument("--input", default=None, help="input panel CSV (id,time,y,x1..xp)")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--family", choices=("poisson-log", "bernoulli-logit", "gaussian-identity"), default=None)
    p.add_argument("--dispersion", type=float, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--lambda-min", type=float, default=None)
    p.add_argument("--lambda-max", type=float, default=None)
    p.add_argument("--lambda-count", type=int, default=None)
    p.add_argument("--s-grid", type=_float_list, default=None)
    p.add_argument("--l-grid", type=_float_list, default=None)
    p.add_argument("--n-components", type=int, default=None)
    p.add_argument("--cv-folds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-individuals", type=int, default=None)
    p.add_argument("--n-times", type=int, default=None)
    p.add_argument("--n-covariates", type=int, default=None)
    p.add_argument("--beta", type=_float_list, default=None)
    p.add_argument("--sigma1-sq", type=float, default=None)
    p.add_argument("--sigma2-sq", type=float, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--x-correlation", type=float, default=None)
    p.add_argument("--n-replicates", type=int, default=None)
    p.add_argument("--t-list", type=_int_list, default=None)
    p.add_argument("--rho-list", type=_float_list, default=None)
    return p


def _coerce(name: str, value):
    if value is None:
        return None
    if name in _TUPLE_FLOAT_FIELDS:
        return tuple(float(v) for v in value)
    if name in _TUPLE_INT_FIELDS:
        return tuple(int(v) for v in value)
    return value


def parse_args(argv) -> RunConfig:
    """Resolve argv (+ optional config file) into a validated RunConfig."""
    ns = _build_parser().parse_args(argv)

    merged: dict = {}
    if ns.config is not None:
        path = Path(ns.config)
        if not path.exists():
            raise ValueError(f"config file not found: {path}")
        file_cfg = json.loads(path.read_text())
        if not isinstance(file_cfg, dict):
            raise ValueError("config file must hold a JSON object")
        known = {f.name for f in fields(RunConfig)}
        for key, value in file_cfg.items():
            if key not in known:
                raise ValueError(f"unknown config-file entry {key!r}")
            merged[key] = _coerce(key, value)

    cli_values = {
        "input": ns.input,
        "output_dir": ns.output_dir,
        "dump_config": ns.dump_config,
        "family": ns.family,
        "dispersion": ns.dispersion,
        "tol": ns.tol,
        "max_iters": ns.max_iters,
        "lambda_min": ns.lambda_min,
        "lambda_max": ns.lambda_max,
        "lambda_count": ns.lambda_count,
        "s_grid": ns.s_grid,
        "l_grid": ns.l_grid,
        "n_components": ns.n_components,
        "cv_folds": ns.cv_folds,
        "seed": ns.seed,
        "n_individuals": ns.n_individuals,
        "n_times": ns.n_times,
        "n_covariates": ns.n_covariates,
        "beta": ns.beta,
        "sigma1_sq": ns.sigma1_sq,
        "sigma2_sq": ns.sigma2_sq,
        "rho": ns.rho,
        "x_correlation": ns.x_correlation,
        "n_replicates": ns.n_replicates,
        "t_list": ns.t_list,
        "rho_list": ns.rho_list,
    }
    for key, value in cli_values.items():
        if value is not None:
            merged[key] = value
    merged["command"] = ns.command
    if "output_dir" not in merged:
        merged["output_dir"] = os.environ.get(ENV_OUTPUT_DIR, ".")

    config = RunConfig(**merged)
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    def fail(msg):
        raise ValueError(msg)

    if config.command in ("fit", "fit-components") and not config.input:
        fail(f"{config.command} requires --input")
    if config.tol <= 0:
        fail("tol must be positive")
    if config.dispersion <= 0:
        fail("dispersion must be positive")
    if config.max_iters < 1:
        fail("max-iters must be >= 1")
    if config.lambda_min <= 0:
        fail("lambda-min must be positive")
    if config.lambda_max < config.lambda_min:
        fail("lambda-max must be >= lambda-min")
    if config.lambda_count < 1:
        fail("lambda-count must be >= 1")
    if not config.s_grid or any(not 0 <= s <= 1 for s in config.s_grid):
        fail("s-grid entries must lie in [0, 1]")
    if not config.l_grid or any(l < 1 for l in config.l_grid):
        fail("l-grid entries must be >= 1")
    if config.n_components < 1:
        fail("n-components must be >= 1")
    if config.cv_folds < 2:
        fail("cv-folds must be >= 2")
    if config.n_individuals < 1:
        fail("n-individuals must be >= 1")
    if config.n_times < 2:
        fail("n-times must be >= 2")
    if config.n_covariates < 1:
        fail("n-covariates must be >= 1")
    if config.sigma1_sq < 0:
        fail("sigma1-sq must be >= 0")
    if config.sigma2_sq <= 0:
        fail("sigma2-sq must be positive")
    if not abs(config.rho) < 1:
        fail("rho must lie in (-1, 1)")
    if not 0 <= config.x_correlation < 1:
        fail("x-correlation must lie in [0, 1)")
    if config.n_replicates < 1:
        fail("n-replicates must be >= 1")
    if not config.t_list or any(t < 2 for t in config.t_list):
        fail("t-list entries must be >= 2")
    if not config.rho_list or any(not abs(r) < 1 for r in config.rho_list):
        fail("rho-list entries must lie in (-1, 1)")
    if config.beta is not None and len(config.beta) != config.n_covariates:
        fail("beta length must equal n-covariates")


def load_panel_csv(path, family: Family | str = "poisson-log") -> PanelDataset:
    """Read a balanced panel CSV with header id,time,y,x1..xp.

    Rows may come in any order; they are sorted into the canonical
    individual-major layout. Raises on unbalanced panels (listing missing
    (id,time) pairs) and on non-numeric cells (naming row and column).
    """
    path = Path(path)
    if not path.exists():
        raise ValueError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(header) < 3 or [h.strip() for h in header[:3]] != ["id", "time", "y"]:
            raise ValueError(f"{path}: header must start with id,time,y")
        if len(header) == 3:
            raise ValueError(f"{path}: at least one covariate column is required")
        x_names = tuple(h.strip() for h in header[3:])
        records = []
        for row_idx, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row {row_idx} has {len(row)} cells, expected {len(header)}")
            values = []
            for col_idx, cell in enumerate(row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: non-numeric cell at row {row_idx}, column {header[col_idx]!r}"
                    ) from None
            records.append(values)

    if not records:
        raise ValueError(f"{path}: no data rows")
    data = np.asarray(records)
    ids_raw, times_raw = data[:, 0], data[:, 1]
    for name, col in (("id", ids_raw), ("time", times_raw)):
        if np.any(col != np.floor(col)):
            raise ValueError(f"{path}: {name} values must be integers")
    ids = np.unique(ids_raw.astype(int))
    times = np.unique(times_raw.astype(int))
    seen = {(int(i), int(t)): 0 for i in ids for t in times}
    for i, t in zip(ids_raw.astype(int), times_raw.astype(int)):
        seen[(i, t)] += 1
    dup = [k for k, v in seen.items() if v > 1]
    if dup:
        raise ValueError(f"{path}: duplicate (id,time) pairs: {dup[:10]}")
    missing = [k for k, v in seen.items() if v == 0]
    if missing or len(records) != ids.size * times.size:
        raise ValueError(f"{path}: unbalanced panel; missing (id,time) pairs: {missing[:10]}")

    order = np.lexsort((times_raw, ids_raw))
    data = data[order]
    layout = PanelLayout(ids.size, times.size)
    fam = family if isinstance(family, Family) else Family(str(family))
    return PanelDataset(
        layout=layout,
        y=data[:, 2],
        X=data[:, 3:],
        family=fam,
        column_names=x_names,
    )


def _ridge_config(config: RunConfig) -> RidgeConfig:
    grid = np.logspace(np.log10(config.lambda_min), np.log10(config.lambda_max), config.lambda_count)
    return RidgeConfig(lambda_grid=grid, max_outer_iters=config.max_iters, tol=config.tol)


def _scenario(config: RunConfig) -> SimScenario:
    beta = np.asarray(config.beta, dtype=float) if config.beta is not None else default_beta(config.n_covariates)
    return SimScenario(
        layout=PanelLayout(config.n_individuals, config.n_times),
        beta_true=beta,
        sigma1_sq_true=config.sigma1_sq,
        sigma2_sq_true=config.sigma2_sq,
        rho_true=config.rho,
        x_correlation=config.x_correlation,
        family=Family(config.family, dispersion=config.dispersion),
        seed=config.seed,
        n_replicates=config.n_replicates,
    )


def _estimates_table(pairs) -> Table:
    return Table(columns=("parameter", "value"), rows=tuple(pairs))


def _trajectory_table(report, coef_names, lambda_col: bool) -> Table:
    cols = ["iteration", "criterion", *coef_names, "sigma1_sq", "sigma2_sq", "rho"]
    if lambda_col:
        cols.append("lambda")
    rows = []
    p = len(coef_names)
    for it in range(report.n_iters):
        row = report.trajectories[it]
        out = [it + 1, row[-1], *row[:p], row[p], row[p + 1], row[p + 2]]
        if lambda_col:
            out.append(report.lambda_path[it])
        rows.append(tuple(out))
    return Table(columns=tuple(cols), rows=tuple(rows))


def _gcv_table(report) -> Table:
    rows = []
    for it, path in enumerate(report.gcv_paths, start=1):
        for lam, gcv in path:
            rows.append((it, float(lam), float(gcv)))
    return Table(columns=("iteration", "lambda", "gcv"), rows=tuple(rows))


def _cmd_fit(config: RunConfig, outdir: Path) -> None:
    dataset = load_panel_csv(config.input, Family(config.family, dispersion=config.dispersion))
    report = fit(dataset, _ridge_config(config))
    th = report.theta_hat
    names = [f"beta_{j}" for j in range(dataset.n_covariates)]
    pairs = list(zip(names, th.beta))
    pairs += [
        ("sigma1_sq", th.sigma1_sq),
        ("sigma2_sq", th.sigma2_sq),
        ("rho", th.rho),
        ("lambda", float(report.lambda_path[-1])),
        ("n_iters", report.n_iters),
    ]
    _estimates_table(pairs).write_csv(outdir / "estimates.csv")
    _trajectory_table(report, names, lambda_col=True).write_csv(outdir / "trajectory.csv")
    _gcv_table(report).write_csv(outdir / "gcv_path.csv")


def _cmd_fit_components(config: RunConfig, outdir: Path) -> None:
    dataset = load_panel_csv(config.input, Family(config.family, dispersion=config.dispersion))
    comps, report = fit_components(
        dataset,
        K=config.n_components,
        s_grid=config.s_grid,
        l_grid=config.l_grid,
        cv_folds=config.cv_folds,
        config=_ridge_config(config),
        seed=config.seed,
    )
    th = report.theta_hat
    pairs = [(f"gamma_{k}", g) for k, g in enumerate(comps.gamma_coefs)]
    pairs += [
        ("sigma1_sq", th.sigma1_sq),
        ("sigma2_sq", th.sigma2_sq),
        ("rho", th.rho),
        ("s", comps.s),
        ("l", comps.l),
        ("n_iters", report.n_iters),
    ]
    _estimates_table(pairs).write_csv(outdir / "estimates.csv")

    loadings = comps.variable_loadings(principal_basis(dataset.X))
    cols = ("variable", *[f"component_{k+1}" for k in range(loadings.shape[1])])
    names = dataset.column_names or tuple(f"x{j+1}" for j in range(loadings.shape[0]))
    rows = tuple((names[j], *loadings[j]) for j in range(loadings.shape[0]))
    Table(columns=cols, rows=rows).write_csv(outdir / "components.csv")

    coef_names = [f"coef_{j}" for j in range(dataset.n_covariates)]
    _trajectory_table(report, coef_names, lambda_col=False).write_csv(outdir / "trajectory.csv")


def _cmd_simulate(config: RunConfig, outdir: Path) -> None:
    scenario = _scenario(config)
    dataset, latents = generate_panel(scenario)
    layout = scenario.layout
    p = dataset.n_covariates
    cols = ("id", "time", "y", *[f"x{j+1}" for j in range(p)])
    rows = []
    for i in range(layout.n_individuals):
        for t in range(layout.n_times):
            r = i * layout.n_times + t
            rows.append((i + 1, t + 1, dataset.y[r], *dataset.X[r]))
    Table(columns=cols, rows=tuple(rows)).write_csv(outdir / "panel.csv")

    lat_rows = [("individual", i + 1, v) for i, v in enumerate(latents.xi1)]
    lat_rows += [("time", t + 1, v) for t, v in enumerate(latents.xi2)]
    Table(columns=("effect", "level", "value"), rows=tuple(lat_rows)).write_csv(outdir / "latents.csv")


def _cmd_study_convergence(config: RunConfig, outdir: Path) -> None:
    convergence_study(_scenario(config), _ridge_config(config)).write_csv(outdir / "convergence.csv")


def _cmd_study_mse(config: RunConfig, outdir: Path) -> None:
    mse_study(_scenario(config), config.t_list, _ridge_config(config)).write_csv(outdir / "mse.csv")


def _cmd_study_rho(config: RunConfig, outdir: Path) -> None:
    estimates, summary = rho_recovery_study(config.rho_list, _scenario(config), _ridge_config(config))
    estimates.write_csv(outdir / "rho_estimates.csv")
    summary.write_csv(outdir / "rho_summary.csv")


_DISPATCH = {
    "fit": _cmd_fit,
    "fit-components": _cmd_fit_components,
    "simulate": _cmd_simulate,
    "study-convergence": _cmd_study_convergence,
    "study-mse": _cmd_study_mse,
    "study-rho": _cmd_study_rho,
}


def run(config: RunConfig) -> int:
    """Execute one command, writing its artifacts into the output directory."""
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    if config.dump_config:
        payload = asdict(config)
        payload = {k: (list(v) if isinstance(v, tuple) else v) for k, v in payload.items()}
        Path(config.dump_config).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _DISPATCH[config.command](config, outdir)
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        config = parse_args(argv)
        return run(config)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
