"""Command-line interface.

Subcommands: simulate | fit | replicate | suppe-grid | report.  Options come
from a JSON config file plus flag overrides; the worker pool size honors the
SAE_WORKERS environment variable.  Exit codes: 0 success (including partial
runs recorded in the manifest), 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .engine import EngineConfig, EngineError
from .experiment import (
    ConfigError,
    ExperimentConfig,
    MODEL_NAMES,
    SIGMA_GRID_FULL,
    SIGMA_GRID_REDUCED,
    render_plots,
    run_experiment,
    run_sigma_grid,
)
from .simulate import (
    ScenarioConfig,
    ScenarioError,
    draw_informative_sample,
    generate_census,
    read_meta_json,
    scenario_preset,
    write_census_files,
)
from .survey import (
    SurveyDataError,
    read_areas_csv,
    read_benchmark_json,
    read_sample_csv,
    write_sample_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


def _engine_from_args(args) -> EngineConfig:
    return EngineConfig(chains=args.chains, warmup=args.warmup, draws=args.draws,
                        seed=args.seed)


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--warmup", type=int, default=500)
    p.add_argument("--draws", type=int, default=500)
    p.add_argument("--seed", type=int, default=20240401)


def _scenario_from_args(args) -> ScenarioConfig:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            payload = json.load(fh)
        base = payload.get("scenario", payload)
        cfg = ScenarioConfig(**base)
        if args.scenario:
            raise ConfigError("give either --config or --scenario, not both")
        return cfg
    name = args.scenario or "sc3"
    cfg = scenario_preset(name, seed=args.seed, full_scale=args.full_scale)
    return cfg


def cmd_simulate(args) -> int:
    scenario = _scenario_from_args(args)
    scenario.validate()
    census = generate_census(scenario)
    outdir = Path(args.outdir)
    write_census_files(outdir, census)
    sample = draw_informative_sample(census, scenario, args.replicate)
    write_sample_csv(outdir / "sample.csv", sample)
    print(f"wrote census ({census.total} individuals, {census.M} areas) and "
          f"sample (n={sample.n}, m={sample.m}) to {outdir}")
    return EXIT_OK


def cmd_fit(args) -> int:
    from .baselines import fit_beta, fit_bin, fit_eln, fit_log
    from .simulate import CensusFrame
    from .stage2 import Stage2Spec, fit_tsln

    model = args.model.upper()
    if model not in MODEL_NAMES:
        raise ConfigError(f"unknown model {args.model!r}; choose from {MODEL_NAMES}")
    N, Z = read_areas_csv(args.areas)
    sample = read_sample_csv(args.sample, M=len(N), N=N)
    engine = _engine_from_args(args)

    census = None
    if args.census:
        cen_sample = read_sample_csv(args.census, M=len(N), N=N)
        true_mu = np.array([
            cen_sample.y[cen_sample.area_index[a]].mean() if a in cen_sample.area_index else np.nan
            for a in range(1, len(N) + 1)
        ])
        census = CensusFrame(
            area_id=cen_sample.area_id, y=cen_sample.y,
            x_survey=cen_sample.x_survey, x_census=cen_sample.x_census,
            N=N, true_mu=true_mu, Z=Z, config=None,
        )
    if model == "LOG" and census is None:
        raise SurveyDataError("census required: the LOG model aggregates over all individuals")

    spatial = args.adjacency is not None
    adjacency = None
    if spatial:
        adjacency = _read_adjacency(args.adjacency, len(N))
    benchmark = read_benchmark_json(args.benchmark) if args.benchmark else None

    warnings.filterwarnings("default")
    if model == "TSLN":
        spec2 = Stage2Spec(spatial=spatial, adjacency=adjacency,
                           benchmark=benchmark, epsilon=args.epsilon)
        res = fit_tsln(sample, Z, N, stage2_spec=spec2, engine1=engine, engine2=engine)
        fit = res.fit
    elif model == "LOG":
        fit = fit_log(sample, census, engine=engine)
    elif model == "BIN":
        fit = fit_bin(sample, Z, engine=engine)
    elif model == "BETA":
        fit = fit_beta(sample, Z, engine=engine)
    else:
        fit = fit_eln(sample, Z, engine=engine)

    out_prefix = Path(args.out)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    fit.write_csv(f"{out_prefix}.csv")
    if fit.matrix is not None:
        fit.matrix.diagnostics_json(f"{out_prefix}_diagnostics.json")
        if args.export_draws:
            fit.matrix.to_csv(f"{out_prefix}_draws.csv")
    status = {
        "model": model,
        "converged": bool(fit.converged),
        "max_rhat": None if not np.isfinite(fit.max_rhat) else float(fit.max_rhat),
    }
    with open(f"{out_prefix}_status.json", "w", encoding="utf-8") as fh:
        json.dump(status, fh, indent=2, sort_keys=True)
    print(f"{model}: converged={fit.converged} max_rhat={fit.max_rhat:.4f} -> {out_prefix}.csv")
    return EXIT_OK


def _read_adjacency(path: str, M: int) -> np.ndarray:
    import csv as _csv
    W = np.zeros((M, M))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != ["area_a", "area_b"]:
            raise SurveyDataError(f"bad adjacency header in {path}")
        for row in reader:
            a, b = int(row["area_a"]) - 1, int(row["area_b"]) - 1
            if not (0 <= a < M and 0 <= b < M):
                raise SurveyDataError(f"adjacency edge out of range: {row}")
            W[a, b] = W[b, a] = 1.0
    return W


def cmd_replicate(args) -> int:
    scenario = _scenario_from_args(args)
    models = tuple(m.strip().upper() for m in args.models.split(","))
    cfg = ExperimentConfig(
        scenario=scenario,
        replicates=args.replicates,
        models=models,
        engine=_engine_from_args(args),
        spatial=args.spatial,
        benchmark=args.benchmark_regions > 0 and args.with_benchmark,
        epsilon=args.epsilon,
        benchmark_regions=args.benchmark_regions,
        scenario_name=args.scenario or "custom",
    )
    summary = run_experiment(cfg, args.outdir, workers=args.workers)
    counts = summary["counts"]
    total = {k: sum(v.values()) for k, v in counts.items()}
    print(f"finished {cfg.replicates} replicates x {len(models)} models "
          f"in {summary['wall_clock_seconds']}s -> {args.outdir}")
    for m in models:
        print(f"  {m}: {counts[m]}")
    if any(total[m] != cfg.replicates for m in models):
        raise RuntimeError("manifest incomplete")
    return EXIT_OK


def cmd_suppe_grid(args) -> int:
    scenario = _scenario_from_args(args)
    if args.scenario in (None, "suppe"):
        scenario = scenario_preset("suppe", seed=args.seed, full_scale=args.full_scale)
    sigmas = SIGMA_GRID_FULL if args.full_grid else SIGMA_GRID_REDUCED
    if args.sigma_grid:
        sigmas = tuple(float(s) for s in args.sigma_grid.split(","))
    rows = run_sigma_grid(scenario, args.outdir, sigmas=sigmas,
                          replicates=args.replicates,
                          engine=_engine_from_args(args), workers=args.workers)
    n_ok = sum(1 for r in rows if r["status"] == "converged")
    print(f"grid complete: {n_ok}/{len(rows)} cells converged -> {args.outdir}/grid.csv")
    return EXIT_OK


def cmd_report(args) -> int:
    outdir = Path(args.run_dir)
    if not (outdir / "metrics.csv").exists():
        raise SurveyDataError(f"no metrics.csv under {outdir}")
    made = render_plots(outdir)
    print(f"rendered {len(made)} plots under {outdir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saeprop",
        description="Small-area estimation of proportions: simulation, model fits, "
                    "replicate studies and reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic census and one survey sample")
    p.add_argument("--scenario", choices=["sc1", "sc2", "sc3", "sc4", "sc5", "sc6", "suppe"])
    p.add_argument("--config", help="JSON file with a scenario configuration")
    p.add_argument("--full-scale", action="store_true")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--seed", type=int, default=20240401)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one model to sample/areas CSV files")
    p.add_argument("--model", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--areas", required=True)
    p.add_argument("--census", help="census individuals CSV (required for LOG)")
    p.add_argument("--adjacency", help="edge-list CSV enabling the spatial prior")
    p.add_argument("--benchmark", help="benchmark JSON enabling soft benchmarking")
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--export-draws", action="store_true")
    p.add_argument("--out", required=True, help="output path prefix")
    _add_engine_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("replicate", help="run a repeated-sampling experiment")
    p.add_argument("--scenario", choices=["sc1", "sc2", "sc3", "sc4", "sc5", "sc6", "suppe"])
    p.add_argument("--config", help="JSON file with a scenario configuration")
    p.add_argument("--full-scale", action="store_true")
    p.add_argument("--replicates", type=int, default=50)
    p.add_argument("--models", default="TSLN,ELN,BIN")
    p.add_argument("--spatial", action="store_true")
    p.add_argument("--with-benchmark", action="store_true")
    p.add_argument("--benchmark-regions", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--workers", type=int)
    p.add_argument("--outdir", required=True)
    _add_engine_flags(p)
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("suppe-grid", help="fixed-residual-error smoothing grid")
    p.add_argument("--scenario", choices=["suppe"])
    p.add_argument("--config")
    p.add_argument("--full-scale", action="store_true")
    p.add_argument("--full-grid", action="store_true", help="all 13 residual scales")
    p.add_argument("--sigma-grid", help="comma-separated residual scales")
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--workers", type=int)
    p.add_argument("--outdir", required=True)
    _add_engine_flags(p)
    p.set_defaults(func=cmd_suppe_grid)

    p = sub.add_parser("report", help="re-render tables/plots from a run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ScenarioError, ValueError) as exc:
        if isinstance(exc, SurveyDataError):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, EngineError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
