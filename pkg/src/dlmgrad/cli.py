"""Command line interface.

Subcommands:

* ``fit``: graduate a mortality table; writes summary.csv, vmatrix.csv,
  draws.bin, table.csv, manifest.json and fit.png into the output dir.
* ``forecast``: extend a saved fit to advanced ages; writes forecast.csv,
  forecast_manifest.json and forecast.png.
* ``simulate-missing``: mask cells, refit competing models, score the
  reconstructions; writes report.csv, report.txt and comparison.png.
* ``plotdata``: flatten a saved fit into plot-ready rows; writes
  plotdata.csv and plotdata.png.
* ``export-draws``: dump the posterior draws as long-format text.

Exit codes: 0 success, 2 parse failures, 3 domain violations,
4 numerical breakdowns.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .archive import export_draws_csv, load_draws, save_draws, write_text_atomic
from .config import (
    RunConfig,
    build_spec,
    parse_config,
    schedule_from_manifest,
    schedule_to_manifest,
    spec_from_manifest,
    spec_to_manifest,
)
from .data import (
    MISSING_SCENARIOS,
    central_rates,
    load_table,
    mask_ages,
    select_populations,
)
from .errors import GraduationError, ParseError
from .forecast import (
    ForecastConfig,
    blend_convergence,
    extrapolate,
    first_crossing_age,
    summarize_predictive,
)
from .metrics import compare
from .sampler import (
    GibbsConfig,
    predictive_log_rate_draws,
    run_gibbs,
    summarize,
)

_LEVELS = (0.025, 0.975)
_MODEL_CHOICES = ("joint", "joint-ct", "univariate")


def _fmt(value) -> str:
    return f"{float(value):.17g}"


def _csv_text(header, rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return out.getvalue()


def _resolve_seed(flag_seed, cfg: RunConfig) -> int:
    if flag_seed is not None:
        return flag_seed
    if cfg.seed is not None:
        return cfg.seed
    env = os.environ.get("GRADUATE_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ParseError(f"GRADUATE_SEED must be an integer, got {env!r}") from None
    return 1


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(path)


def _gibbs_config(args, cfg: RunConfig) -> GibbsConfig:
    return GibbsConfig(
        iterations=cfg.iterations if args.iterations is None else args.iterations,
        burn_in=cfg.burn_in if args.burn_in is None else args.burn_in,
        thin=cfg.thin if args.thin is None else args.thin,
        chains=cfg.chains if args.chains is None else args.chains,
        seed=_resolve_seed(args.seed, cfg),
        block_discount=cfg.block_discount or args.block_discount,
    )


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_table_csv(table, path) -> None:
    rows = []
    for i, pop in enumerate(table.populations):
        for k, age in enumerate(table.ages):
            if table.missing[i, k]:
                continue
            rows.append((pop, int(age), _fmt(table.deaths[i, k]), _fmt(table.exposure[i, k])))
    write_text_atomic(path, _csv_text(("population", "age", "deaths", "exposure"), rows))


def _write_summary_csv(summary, path) -> None:
    rows = []
    for i, pop in enumerate(summary.populations):
        for k, age in enumerate(summary.ages):
            rows.append(
                (
                    pop,
                    int(age),
                    "fitted",
                    _fmt(summary.fitted_mean[i, k]),
                    _fmt(summary.fitted_median[i, k]),
                    _fmt(summary.fitted_lower[i, k]),
                    _fmt(summary.fitted_upper[i, k]),
                )
            )
            rows.append(
                (
                    pop,
                    int(age),
                    "predictive",
                    _fmt(summary.predictive_mean[i, k]),
                    _fmt(summary.predictive_median[i, k]),
                    _fmt(summary.predictive_lower[i, k]),
                    _fmt(summary.predictive_upper[i, k]),
                )
            )
    header = ("population", "age", "series", "mean", "median", "lower", "upper")
    write_text_atomic(path, _csv_text(header, rows))


def _write_vmatrix_csv(summary, path) -> None:
    rows = []
    pops = summary.populations
    for i in range(len(pops)):
        for j in range(len(pops)):
            rows.append(
                (
                    pops[i],
                    pops[j],
                    _fmt(summary.obs_cov_mean[i, j]),
                    _fmt(summary.obs_cov_median[i, j]),
                    _fmt(summary.obs_cov_lower[i, j]),
                    _fmt(summary.obs_cov_upper[i, j]),
                )
            )
    header = ("row", "col", "mean", "median", "lower", "upper")
    write_text_atomic(path, _csv_text(header, rows))


def _write_json(payload, path) -> None:
    write_text_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    table = load_table(args.data)
    if cfg.populations:
        table = select_populations(table, cfg.populations)
    spec = build_spec(cfg, table.populations)
    schedule = cfg.schedule()
    gibbs = _gibbs_config(args, cfg)
    surface = central_rates(table)
    draws = run_gibbs(spec, surface, schedule, gibbs)
    fit_summary = summarize(draws, _LEVELS)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_table_csv(table, out_dir / "table.csv")
    _write_summary_csv(fit_summary, out_dir / "summary.csv")
    _write_vmatrix_csv(fit_summary, out_dir / "vmatrix.csv")
    save_draws(draws, out_dir / "draws.bin")
    manifest = {
        "kind": "fit",
        "tool": {"name": "dlmgrad", "version": __version__},
        "data": {
            "source": str(args.data),
            "sha256": _sha256(args.data),
            "populations": list(table.populations),
            "age_range": [int(table.ages[0]), int(table.ages[-1])],
        },
        "model": spec_to_manifest(spec),
        "schedule": schedule_to_manifest(schedule),
        "sampler": {
            "seed": gibbs.seed,
            "chains": gibbs.chains,
            "iterations": gibbs.iterations,
            "burn_in": gibbs.burn_in,
            "thin": gibbs.thin,
            "block_discount": gibbs.block_discount,
            "draws_per_chain": gibbs.draws_per_chain,
        },
        "forecast_defaults": {
            "horizon": cfg.horizon,
            "terminal_age": cfg.terminal_age,
            "blend": cfg.blend,
            "delta": cfg.delta,
        },
        "summary_levels": list(_LEVELS),
        # Diagnostics can be undefined for very short chains; JSON has no
        # NaN, so those become null.
        "diagnostics": {
            k: (v if isinstance(v, (int, float)) and math.isfinite(v) else None)
            for k, v in draws.meta.get("diagnostics", {}).items()
        },
        "checks": draws.meta.get("checks", {}),
        "files": {
            "table": "table.csv",
            "summary": "summary.csv",
            "vmatrix": "vmatrix.csv",
            "draws": "draws.bin",
            "figure": "fit.png",
        },
    }
    _write_json(manifest, out_dir / "manifest.json")
    from .plots import save_fit_figure

    save_fit_figure(surface, fit_summary, out_dir / "fit.png")
    diag = manifest["diagnostics"]
    rhat = diag.get("max_rhat")
    ess = diag.get("min_ess")
    print(
        f"fitted {len(table.populations)} population(s) over ages "
        f"{int(table.ages[0])}..{int(table.ages[-1])}: "
        f"{draws.n_draws} draws from {gibbs.chains} chain(s)"
    )
    print(
        "diagnostics: max split R-hat "
        + (f"{rhat:.3f}" if rhat is not None else "n/a")
        + ", min effective draws "
        + (f"{ess:.0f}" if ess is not None else "n/a")
    )
    print(f"outputs in {out_dir}")
    return 0


def _load_fit(fit_dir: Path):
    manifest_path = fit_dir / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"cannot read {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{manifest_path} is not valid JSON: {exc}") from exc
    if manifest.get("kind") != "fit":
        raise ParseError(f"{manifest_path} does not describe a fit")
    try:
        spec = spec_from_manifest(manifest["model"])
        schedule = schedule_from_manifest(manifest["schedule"])
        sampler_entry = dict(manifest["sampler"])
    except KeyError as exc:
        raise ParseError(f"{manifest_path} is missing section {exc}") from exc
    sampler_entry.pop("draws_per_chain", None)
    gibbs = GibbsConfig(**sampler_entry)
    draws = load_draws(fit_dir / "draws.bin", spec, gibbs)
    table = load_table(fit_dir / "table.csv")
    if cfg_pops := manifest["model"]["populations"]:
        table = select_populations(table, cfg_pops)
    surface = central_rates(table)
    if not np.array_equal(surface.missing, draws.missing_mask):
        raise ParseError(f"{fit_dir}: table.csv and draws.bin disagree about missing cells")
    return manifest, spec, schedule, draws, surface


def cmd_forecast(args) -> int:
    fit_dir = Path(args.fit_dir)
    manifest, spec, schedule, draws, surface = _load_fit(fit_dir)
    defaults = manifest.get("forecast_defaults", {})
    horizon = args.horizon if args.horizon is not None else defaults.get("horizon")
    if horizon is None:
        raise ParseError("no forecast horizon: pass --horizon or set it in the fit's config")
    terminal = args.terminal_age if args.terminal_age is not None else defaults.get("terminal_age")
    blend = args.blend if args.blend is not None else (defaults.get("blend") or "none")
    delta = args.delta if args.delta is not None else defaults.get("delta")
    fc = ForecastConfig(horizon=horizon, terminal_age=terminal, blend=blend, delta=delta)

    last_age = int(draws.ages[-1])
    ext_ages = np.arange(last_age + 1, last_age + fc.horizon + 1)
    ext = extrapolate(draws, fc, schedule)
    blended = blend_convergence(ext, ext_ages, last_age, fc)
    fitted_pred = predictive_log_rate_draws(draws)
    full = np.concatenate([fitted_pred, blended], axis=2)
    all_ages = np.concatenate([draws.ages, ext_ages])
    summary = summarize_predictive(full, draws.populations, all_ages, _LEVELS)

    ref = np.quantile(fitted_pred[:, :, -1], 0.5, axis=0)
    unblended_medians = np.concatenate(
        [ref[:, None], np.quantile(ext, 0.5, axis=0)], axis=1
    )
    crossing = first_crossing_age(
        unblended_medians, np.concatenate([[last_age], ext_ages])
    )

    out_dir = Path(args.out) if args.out else fit_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, pop in enumerate(summary.populations):
        for k, age in enumerate(summary.ages):
            for scale_name in ("log_rate", "rate", "death_prob"):
                mean, median, lower, upper = summary.scale(scale_name)
                rows.append(
                    (
                        pop,
                        int(age),
                        scale_name,
                        _fmt(mean[i, k]),
                        _fmt(median[i, k]),
                        _fmt(lower[i, k]),
                        _fmt(upper[i, k]),
                    )
                )
    header = ("population", "age", "scale", "mean", "median", "lower", "upper")
    write_text_atomic(out_dir / "forecast.csv", _csv_text(header, rows))
    _write_json(
        {
            "kind": "forecast",
            "fit": str(fit_dir),
            "config": {
                "horizon": fc.horizon,
                "terminal_age": fc.terminal_age,
                "blend": fc.blend,
                "delta": fc.delta,
            },
            "ages": [int(all_ages[0]), int(all_ages[-1])],
            "crossing_age": crossing,
            "summary_levels": list(_LEVELS),
            "files": {"summary": "forecast.csv", "figure": "forecast.png"},
        },
        out_dir / "forecast_manifest.json",
    )
    from .plots import save_forecast_figure

    save_forecast_figure(surface, summary, last_age, out_dir / "forecast.png")
    if crossing is None:
        print("unblended median curves do not cross over the horizon")
    else:
        print(f"unblended median curves first cross at age {crossing}")
    print(f"outputs in {out_dir}")
    return 0


def _parse_scenario(text: str):
    if "=" in text:
        label, spec_txt = (part.strip() for part in text.split("=", 1))
    else:
        label, spec_txt = None, text.strip()
    if ":" not in spec_txt:
        raise ParseError(
            f"scenario {text!r} must look like 'a:POP' or 'label=POP:3-16,20-25'"
        )
    head, tail = spec_txt.split(":", 1)
    if label is None and head in MISSING_SCENARIOS:
        # Preset form: 'a:POP'.
        return head, tail.strip(), MISSING_SCENARIOS[head]
    population = head.strip()
    ranges = []
    for part in tail.split(","):
        part = part.strip()
        if "-" not in part:
            raise ParseError(f"scenario range {part!r} must look like LO-HI")
        lo_txt, hi_txt = part.split("-", 1)
        try:
            ranges.append((int(lo_txt), int(hi_txt)))
        except ValueError:
            raise ParseError(f"scenario range {part!r} has non-integer bounds") from None
    if not ranges:
        raise ParseError(f"scenario {text!r} has no age ranges")
    return (label or spec_txt), population, tuple(ranges)


def cmd_simulate_missing(args) -> int:
    cfg = _load_config(args.config)
    table = load_table(args.data)
    if cfg.populations:
        table = select_populations(table, cfg.populations)
    truth = central_rates(table)
    schedule = cfg.schedule()
    gibbs = _gibbs_config(args, cfg)
    models = tuple(m.strip() for m in args.models.split(",") if m.strip())
    for m in models:
        if m not in _MODEL_CHOICES:
            raise ParseError(f"unknown model {m!r}; choose from {_MODEL_CHOICES}")
    if not models:
        raise ParseError("no models requested")
    scenarios = [_parse_scenario(s) for s in args.scenario]

    report = None
    for label, population, ranges in scenarios:
        masked = mask_ages(table, population, ranges)
        i_pop = table.population_index(population)
        cells = []
        for lo, hi in ranges:
            for age in range(lo, hi + 1):
                k = age - int(table.ages[0])
                if not truth.missing[i_pop, k]:
                    cells.append((population, age))
        if not cells:
            raise ParseError(
                f"scenario {label!r} masks no cells with recoverable truth"
            )
        fits = []
        for model in models:
            if model == "univariate":
                model_cfg = replace(cfg, common_term=False, populations=(population,))
            elif model == "joint-ct":
                model_cfg = replace(cfg, common_term=True, populations=cfg.populations)
            else:
                model_cfg = replace(cfg, common_term=False, populations=cfg.populations)
            pops = model_cfg.populations if model_cfg.populations else table.populations
            sub = select_populations(masked, pops)
            spec = build_spec(model_cfg, sub.populations)
            draws = run_gibbs(spec, central_rates(sub), schedule, gibbs)
            pred = predictive_log_rate_draws(draws)
            summary = summarize_predictive(pred, spec.populations, sub.ages, _LEVELS)
            fits.append((model, summary, truth))
        scenario_report = compare(fits, cells, scenario=label, scale=args.scale)
        report = scenario_report if report is None else report.merged(scenario_report)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [
        (
            r.scenario,
            r.model,
            _fmt(r.pct_missing),
            r.n_cells,
            _fmt(r.mspe),
            _fmt(r.mape),
            _fmt(r.interval_width),
            str(r.best_mspe).lower(),
            str(r.best_mape).lower(),
            str(r.best_interval_width).lower(),
        )
        for r in report.rows
    ]
    header = (
        "scenario",
        "model",
        "pct_missing",
        "n_cells",
        "mspe",
        "mape",
        "interval_width",
        "best_mspe",
        "best_mape",
        "best_interval_width",
    )
    write_text_atomic(out_dir / "report.csv", _csv_text(header, rows))
    write_text_atomic(out_dir / "report.txt", report.to_text() + "\n")
    _write_json(
        {
            "kind": "simulate-missing",
            "data": {"source": str(args.data), "sha256": _sha256(args.data)},
            "scale": report.scale,
            "models": list(models),
            "scenarios": [
                {"label": lbl, "population": pop, "ranges": [list(r) for r in rng]}
                for lbl, pop, rng in scenarios
            ],
            "sampler": {
                "seed": gibbs.seed,
                "chains": gibbs.chains,
                "iterations": gibbs.iterations,
                "burn_in": gibbs.burn_in,
                "thin": gibbs.thin,
                "block_discount": gibbs.block_discount,
            },
            "files": {
                "report": "report.csv",
                "text": "report.txt",
                "figure": "comparison.png",
            },
        },
        out_dir / "manifest.json",
    )
    from .plots import save_comparison_figure

    save_comparison_figure(report, out_dir / "comparison.png")
    print(report.to_text())
    print(f"outputs in {out_dir}")
    return 0


def cmd_plotdata(args) -> int:
    fit_dir = Path(args.fit_dir)
    summary_path = fit_dir / "summary.csv"
    table_path = fit_dir / "table.csv"
    try:
        summary_text = summary_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {summary_path}: {exc}") from exc
    table = load_table(table_path)
    surface = central_rates(table)

    out_rows = []
    plot_rows = []
    for i, pop in enumerate(surface.populations):
        for k, age in enumerate(surface.ages):
            if surface.missing[i, k]:
                continue
            value = surface.log_rates[i, k]
            out_rows.append(("raw", pop, int(age), _fmt(value), "", ""))
            plot_rows.append(
                {"series": "raw", "population": pop, "age": int(age),
                 "value": value, "lower": None, "upper": None}
            )
    reader = csv.DictReader(io.StringIO(summary_text))
    expected = {"population", "age", "series", "mean", "median", "lower", "upper"}
    if set(reader.fieldnames or ()) != expected:
        raise ParseError(f"{summary_path} does not look like a fit summary")
    for row in reader:
        out_rows.append(
            (row["series"], row["population"], row["age"], row["median"], row["lower"], row["upper"])
        )
        plot_rows.append(
            {
                "series": row["series"],
                "population": row["population"],
                "age": int(row["age"]),
                "value": float(row["median"]),
                "lower": float(row["lower"]),
                "upper": float(row["upper"]),
            }
        )
    out_dir = Path(args.out) if args.out else fit_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ("series", "population", "age", "value", "lower", "upper")
    write_text_atomic(out_dir / "plotdata.csv", _csv_text(header, out_rows))
    from .plots import save_plotdata_figure

    save_plotdata_figure(plot_rows, out_dir / "plotdata.png")
    print(f"wrote {len(out_rows)} plot rows to {out_dir}")
    return 0


def cmd_export_draws(args) -> int:
    fit_dir = Path(args.fit_dir)
    _, _, _, draws, _ = _load_fit(fit_dir)
    out = Path(args.out) if args.out else fit_dir / "draws.csv"
    export_draws_csv(draws, out)
    print(f"wrote {draws.n_draws} draws to {out}")
    return 0


def _add_sampler_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="random seed (overrides config and GRADUATE_SEED)")
    parser.add_argument("--chains", type=int, default=None, help="number of chains")
    parser.add_argument("--iterations", type=int, default=None, help="sweeps per chain")
    parser.add_argument("--burn-in", type=int, default=None, help="sweeps discarded per chain")
    parser.add_argument("--thin", type=int, default=None, help="keep every thin-th sweep")
    parser.add_argument(
        "--block-discount",
        action="store_true",
        help="discount per population block instead of jointly",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlmgrad",
        description="Bayesian graduation of mortality tables with dynamic linear models",
    )
    parser.add_argument("--version", action="version", version=f"dlmgrad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="graduate a mortality table")
    fit.add_argument("--data", required=True, help="long-format csv: population,age,deaths,exposure")
    fit.add_argument("--config", default=None, help="run configuration file")
    fit.add_argument("--out", default="graduation", help="output directory")
    _add_sampler_flags(fit)
    fit.set_defaults(func=cmd_fit)

    fc = sub.add_parser("forecast", help="extrapolate a saved fit to advanced ages")
    fc.add_argument("fit_dir", help="directory written by 'dlmgrad fit'")
    fc.add_argument("--horizon", type=int, default=None, help="years beyond the last fitted age")
    fc.add_argument("--terminal-age", type=int, default=None, help="age of full curve convergence")
    fc.add_argument("--blend", choices=("none", "linear"), default=None, help="curve convergence mode")
    fc.add_argument("--delta", type=float, default=None, help="discount factor beyond the data")
    fc.add_argument("--out", default=None, help="output directory (default: the fit directory)")
    fc.set_defaults(func=cmd_forecast)

    sim = sub.add_parser("simulate-missing", help="hold out cells and score reconstructions")
    sim.add_argument("--data", required=True, help="long-format csv: population,age,deaths,exposure")
    sim.add_argument("--config", default=None, help="run configuration file")
    sim.add_argument("--out", default="simulation", help="output directory")
    sim.add_argument(
        "--scenario",
        action="append",
        required=True,
        help="preset 'a:POP' (presets a-f) or custom 'label=POP:3-16,20-25'; repeatable",
    )
    sim.add_argument(
        "--models",
        default="joint,joint-ct,univariate",
        help="comma list from: joint, joint-ct, univariate",
    )
    sim.add_argument(
        "--scale",
        choices=("log_rate", "rate"),
        default="log_rate",
        help="scale the scores are computed on",
    )
    _add_sampler_flags(sim)
    sim.set_defaults(func=cmd_simulate_missing)

    pd = sub.add_parser("plotdata", help="flatten a saved fit into plot-ready rows")
    pd.add_argument("fit_dir", help="directory written by 'dlmgrad fit'")
    pd.add_argument("--out", default=None, help="output directory (default: the fit directory)")
    pd.set_defaults(func=cmd_plotdata)

    ex = sub.add_parser("export-draws", help="dump posterior draws as long-format text")
    ex.add_argument("fit_dir", help="directory written by 'dlmgrad fit'")
    ex.add_argument("--out", default=None, help="output csv path (default: fit_dir/draws.csv)")
    ex.set_defaults(func=cmd_export_draws)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GraduationError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
