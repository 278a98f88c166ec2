"""Subcommand CLI wiring the library into reproducible pipelines.

Every command reads an optional JSON config (unknown keys rejected), runs
deterministically from the seed, writes its reports (JSON) and tabular/plot
data (CSV with headers) into the output directory, and finishes with a
manifest recording the config hash, per-stage timings, and a checksum per
output file.  Exit codes: 0 success, 1 module error, 2 config/schema error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .classify import classify_curve, classify_population, snc_calibrate
from .config import (
    ConfigError,
    build_factorial_config,
    build_null_generator,
    build_pipeline,
    build_power_grid,
    config_hash,
    load_config,
)
from .data import (
    SchemaError,
    aggregate_curve,
    build_exposure_series,
    events_to_csv,
    ingest_events,
    series_from_csv,
    series_to_csv,
)
from .diagnostics import (
    SelectionSummary,
    distortion_factor,
    pooled_distortion,
    within_user_permutation,
)
from .fitting import fit_all_models
from .models import evaluate
from .shrinkage import estimate_obs_uncertainty_batch, hierarchical_peak
from .synth import FACTORIAL_CELLS, generate_population, run_factorial
from dataclasses import replace


def _jsonable(obj):
    """Recursively convert report objects to JSON-safe primitives."""
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


class Runner:
    """Per-command context: output dir, timings, manifest bookkeeping."""

    def __init__(self, args, command: str):
        overrides = {"seed": args.seed} if args.seed is not None else None
        self.config = load_config(args.config, overrides)
        self.seed = self.config["seed"]
        self.jobs = args.jobs
        self.command = command
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.timings: dict[str, float] = {}
        self.outputs: list[Path] = []
        self._t0 = time.perf_counter()

    def stage(self, name: str):
        runner = self

        class _Stage:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                runner.timings[name] = round(time.perf_counter() - self.start, 3)

        return _Stage()

    def write_json(self, name: str, obj) -> Path:
        path = self.out / name
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.outputs.append(path)
        return path

    def write_csv(self, name: str, header, rows) -> Path:
        path = self.out / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        self.outputs.append(path)
        return path

    def track(self, path: Path) -> None:
        self.outputs.append(path)

    def finish(self) -> None:
        self.timings["total"] = round(time.perf_counter() - self._t0, 3)
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.seed,
            "jobs": self.jobs,
            "config_hash": config_hash(self.config),
            "timings": self.timings,
            "outputs": {p.name: _sha256(p) for p in sorted(set(self.outputs))},
        }
        with open(self.out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_series(path: str, group: str | None):
    series = series_from_csv(path)
    if group is not None:
        series = [s for s in series if s.group == group]
    if not series:
        raise ValueError(f"no series found in {path}" + (f" for group {group!r}" if group else ""))
    return series


def _eligible(series, pipeline):
    return [
        s
        for s in series
        if len(s) >= pipeline.min_raw_length and len(s) >= pipeline.min_smoothed_length
    ]


def _load_peaks_csv(path: str) -> list[tuple[str, str, float]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"user_id", "group", "peak"}
        if reader.fieldnames is None or required - set(reader.fieldnames):
            raise SchemaError(f"peaks CSV requires columns {sorted(required)}")
        return [(row["user_id"], row["group"], float(row["peak"])) for row in reader]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    runner = Runner(args, "ingest")
    schema = json.loads(args.schema) if args.schema else None
    with runner.stage("ingest"):
        events, report = ingest_events(args.input, schema)
    with runner.stage("series"):
        series = build_exposure_series(
            events, group=args.group, threshold=runner.config["engagement"]["threshold"]
        )
        out_path = runner.out / "series.csv"
        series_to_csv(series, out_path)
        runner.track(out_path)
    runner.write_json(
        "ingest_report.json", {**report.to_dict(), "n_series": len(series)}
    )
    runner.finish()
    print(f"ingested {report.accepted} events ({report.rejected} rejected) -> {len(series)} series")
    return 0


def cmd_fit(args) -> int:
    runner = Runner(args, "fit")
    pipeline = build_pipeline(runner.config)
    series = _load_series(args.series, args.group)
    kinds = args.models.split(",") if args.models else None
    rows = []
    with runner.stage("fit"):
        for s in _eligible(series, pipeline):
            from .data import smooth_series

            smoothed = smooth_series(s, pipeline.smoothing_window)
            fits = fit_all_models(smoothed.exposures, smoothed.values, pipeline.fit, kinds=kinds)
            for kind, fr in sorted(fits.items()):
                rows.append(
                    [
                        s.user_id,
                        s.group,
                        kind,
                        fr.n_obs,
                        f"{fr.sse:.10g}",
                        f"{fr.r2:.10g}",
                        f"{fr.aic:.10g}",
                        f"{fr.bic:.10g}",
                        "" if fr.peak.n_star is None else f"{fr.peak.n_star:.6g}",
                        int(fr.peak.interior),
                        int(fr.converged),
                        json.dumps(_jsonable(fr.params_dict()), sort_keys=True),
                    ]
                )
    runner.write_csv(
        "fits.csv",
        ["user_id", "group", "model", "n_obs", "sse", "r2", "aic", "bic", "peak", "interior", "converged", "params"],
        rows,
    )
    runner.finish()
    print(f"fit {len(rows)} (user, model) pairs")
    return 0


def cmd_classify(args) -> int:
    runner = Runner(args, "classify")
    pipeline = build_pipeline(runner.config)
    series = _load_series(args.series, args.group)
    with runner.stage("classify"):
        outcomes = classify_population(series, pipeline, jobs=runner.jobs)
    eligible = [o for o in outcomes if o is not None]
    rows = [
        [
            o.report.user_id,
            o.report.group,
            f"{o.report.lrt_p:.6g}",
            f"{o.report.delta_aic_vs_monotonic:.6g}",
            f"{o.report.r2:.6g}",
            "" if o.report.n_star is None else f"{o.report.n_star:.6g}",
            int(o.report.interior),
            f"{o.report.decline:.6g}",
            f"{o.report.hillexp_bic:.6g}",
            f"{o.report.purehill_bic:.6g}",
            int(o.report.passed),
        ]
        for o in eligible
    ]
    runner.write_csv(
        "user_gates.csv",
        ["user_id", "group", "lrt_p", "delta_aic", "r2", "n_star", "interior", "decline", "hillexp_bic", "purehill_bic", "passed"],
        rows,
    )
    n_passed = sum(o.report.passed for o in eligible)
    runner.write_json(
        "classify_summary.json",
        {
            "n_series": len(series),
            "n_eligible": len(eligible),
            "n_passed": n_passed,
            "pass_rate": n_passed / len(eligible) if eligible else None,
        },
    )
    runner.finish()
    print(f"classified {len(eligible)} eligible series; {n_passed} passed strict gates")
    return 0


def _advisory(distortion: float | None) -> str:
    if distortion is None:
        return (
            "distortion undefined (no usable individual peaks); do not read "
            "individual behavior off the aggregate curve without calibration"
        )
    if abs(distortion - 1.0) <= 0.15:
        return (
            f"D = {distortion:.2f}: aggregate and individual peaks agree; "
            "the aggregate curve is a reasonable summary of the typical user"
        )
    return (
        f"D = {distortion:.2f}: the aggregate peak diverges from the typical "
        "individual peak; prefer per-user fits where data suffice, cohort fits "
        "when sparse, and treat the aggregate as a fallback"
    )


def cmd_diagnose(args) -> int:
    runner = Runner(args, "diagnose")
    pipeline = build_pipeline(runner.config)
    series = _load_series(args.series, args.group)
    peaks_by_group: dict[str, list[float]] = {}
    if args.peaks:
        for _, grp, peak in _load_peaks_csv(args.peaks):
            peaks_by_group.setdefault(grp, []).append(peak)
            peaks_by_group.setdefault("all", []).append(peak)

    groups = sorted({s.group for s in series})
    targets = groups + (["all"] if len(groups) > 1 else [])
    boot = runner.config["bootstrap"]

    for target in targets:
        subset = series if target == "all" else [s for s in series if s.group == target]
        with runner.stage(f"aggregate[{target}]"):
            outcome = classify_curve(
                aggregate_curve(
                    subset,
                    max_exposure=pipeline.max_exposure,
                    min_bin_count=pipeline.min_bin_count,
                    group=target,
                ),
                pipeline,
                series=subset,
                seed=runner.seed,
            )
        hill = outcome.fits["hill_exp"]

        if target in peaks_by_group:
            individual_peaks = peaks_by_group[target]
        else:
            with runner.stage(f"users[{target}]"):
                outcomes = classify_population(subset, pipeline, jobs=runner.jobs)
            individual_peaks = [
                o.fitted_peak
                for o in outcomes
                if o is not None and o.report.passed and o.fitted_peak is not None
            ]

        report: dict = {"group": target, "classification": outcome.label.to_dict()}
        report["aggregate_peak"] = hill.peak.n_star
        report["diagnostics"] = outcome.diagnostics.to_dict()
        if hill.peak.n_star is not None and len(individual_peaks) >= 5:
            window = boot["stability_window"]
            dist = distortion_factor(
                hill.peak.n_star,
                individual_peaks,
                n_boot=boot["distortion"],
                subsample_size=boot["stability_subsample"],
                seed=runner.seed,
                reference_window=tuple(window) if window else None,
                group=target,
            )
            report["distortion"] = dist.to_dict()
            advisory = _advisory(dist.distortion)
        else:
            report["distortion"] = None
            report["reason"] = (
                "no aggregate peak" if hill.peak.n_star is None else "fewer than 5 individual peaks"
            )
            advisory = _advisory(None)
        report["advisory"] = advisory
        runner.write_json(f"diagnosis_{target}.json", report)

        curve = outcome.curve
        fit_values = evaluate("hill_exp", hill.params, curve.exposures.astype(float))
        runner.write_csv(
            f"curve_{target}.csv",
            ["n", "aggregate_mean", "fit_value", "bin_count"],
            [
                [int(n), f"{m:.8g}", f"{f:.8g}", int(c)]
                for n, m, f, c in zip(curve.exposures, curve.means, fit_values, curve.counts)
            ],
        )
        if individual_peaks:
            counts = np.bincount([int(round(p)) for p in individual_peaks])
            runner.write_csv(
                f"peaks_{target}.csv",
                ["peak", "count"],
                [[k, int(c)] for k, c in enumerate(counts) if c > 0],
            )
        print(f"[{target}] {advisory}")

    runner.finish()
    return 0


def cmd_calibrate(args) -> int:
    runner = Runner(args, "calibrate")
    pipeline = build_pipeline(runner.config)
    generator = build_null_generator(runner.config)
    n = args.n or runner.config["snc"]["n_per_condition"]
    with runner.stage("snc"):
        report = snc_calibrate(
            generator,
            pipeline,
            n_per_condition=n,
            seed=runner.seed,
            observed_rate=args.observed_rate,
            jobs=runner.jobs,
        )
    runner.write_json("calibration.json", report)
    runner.finish()
    print(
        f"FP(monotonic) = {report.fp_monotonic:.3f}, FP(flat) = {report.fp_flat:.3f}, "
        f"TP(inverted-U) = {report.tp_inverted_u:.3f}"
    )
    return 0


def cmd_synth(args) -> int:
    runner = Runner(args, "synth")
    pipeline = build_pipeline(runner.config)
    base = build_factorial_config(runner.config)
    with runner.stage("factorial"):
        result = run_factorial(base, pipeline, mode=args.mode, jobs=runner.jobs)
    runner.write_json("factorial.json", result)
    if args.export:
        with runner.stage("export"):
            for cell, (survival, amplitude) in FACTORIAL_CELLS.items():
                population = generate_population(
                    replace(base, survival_bias=survival, amplitude_correlation=amplitude)
                )
                events_path = runner.out / f"events_{cell}.csv"
                events_to_csv(population.events(), events_path)
                runner.track(events_path)
                runner.write_csv(
                    f"peaks_{cell}.csv",
                    ["user_id", "group", "peak"],
                    [[u.user_id, u.group, f"{u.true_peak:.8g}"] for u in population.users],
                )
    runner.finish()
    for name, cell in result.cells.items():
        d = "failed" if cell.failed else f"D = {cell.distortion:.2f}"
        print(f"{name}: individual median {cell.individual_median:.1f}, {d}")
    return 0


def cmd_power(args) -> int:
    runner = Runner(args, "power")
    grid = build_power_grid(runner.config)
    pipeline = build_pipeline(runner.config)
    pipeline = replace(pipeline, permutations=runner.config["power"]["permutations"])
    with runner.stage("power"):
        result = power_analysis_entry(grid, pipeline, runner.seed, runner.jobs)
    runner.write_json("power.json", result)
    runner.write_csv(
        "power_table.csv",
        ["amplitude"] + [str(b) for b in grid.bin_sizes],
        [
            [tier] + [f"{result.power[tier][b]:.3f}" for b in grid.bin_sizes]
            for tier, _ in grid.amplitudes
        ],
    )
    runner.finish()
    print(f"power table written for {len(grid.amplitudes)}x{len(grid.bin_sizes)} grid")
    return 0


def power_analysis_entry(grid, pipeline, seed, jobs):
    from .synth import power_analysis

    return power_analysis(grid, pipeline, seed=seed, jobs=jobs)


def cmd_shrink(args) -> int:
    runner = Runner(args, "shrink")
    pipeline = build_pipeline(runner.config)
    series = _load_series(args.series, args.group)
    with runner.stage("classify"):
        outcomes = classify_population(series, pipeline, jobs=runner.jobs)
    passed = [o for o in outcomes if o is not None and o.report.passed]
    if len(passed) < 2:
        raise ValueError("need at least 2 strict-classified users to pool")

    from .data import smooth_series

    smoothed = [smooth_series(next(s for s in series if s.user_id == o.user_id and s.group == o.group), pipeline.smoothing_window) for o in passed]
    with runner.stage("bootstrap"):
        observations = estimate_obs_uncertainty_batch(
            smoothed,
            pipeline.fit,
            n_boot=runner.config["bootstrap"]["observation"],
            seed=runner.seed,
            jobs=runner.jobs,
        )

    groups = sorted({o.group for o in observations})
    summaries = {}
    rows = []
    for target in groups + (["all"] if len(groups) > 1 else []):
        subset = (
            observations if target == "all" else [o for o in observations if o.group == target]
        )
        if len(subset) < 2:
            continue
        summary, results = hierarchical_peak(subset, group=target)
        summaries[target] = summary
        if target != "all":
            for obs, res in zip(subset, results):
                rows.append(
                    [
                        obs.user_id,
                        obs.group,
                        f"{math.exp(obs.log_peak):.6g}",
                        f"{obs.sigma_obs:.6g}",
                        f"{res.weight:.6g}",
                        f"{res.posterior_peak:.6g}",
                    ]
                )
    runner.write_csv(
        "shrinkage.csv",
        ["user_id", "group", "raw_peak", "sigma_obs", "w", "posterior_peak"],
        rows,
    )
    runner.write_json("shrinkage_summary.json", summaries)
    runner.finish()
    print(f"shrunk {len(rows)} user peaks across {len(groups)} groups")
    return 0


def cmd_pool(args) -> int:
    runner = Runner(args, "pool")
    with open(args.summaries, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise SchemaError("summaries file must be a JSON array")
    summaries = [
        SelectionSummary(
            rho=item["rho"],
            sigma=item["sigma"],
            s_bar=item["s_bar"],
            n=item["n"],
            label=item.get("label", ""),
        )
        for item in raw
    ]
    with runner.stage("pool"):
        result = pooled_distortion(summaries)
    runner.write_json("pooled.json", result)
    runner.finish()
    print(f"pooled shift = {result.delta_hat:.4g}, one-sided p = {result.p_one_sided:.4g}")
    return 0


def cmd_permtest(args) -> int:
    runner = Runner(args, "permtest")
    peaks: dict[str, dict[str, float]] = {}
    for user, group, peak in _load_peaks_csv(args.peaks):
        peaks.setdefault(user, {})[group] = peak
    with runner.stage("permutation"):
        result = within_user_permutation(
            peaks,
            n_permutations=args.permutations or runner.config["permutation"]["within_user"],
            seed=runner.seed,
        )
    runner.write_json("permtest.json", result)
    runner.finish()
    print(f"observed range = {result.r_obs:.4g}, p = {result.p_value:.4g}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peakshift",
        description="Detect and quantify aggregation distortion in engagement curves.",
    )
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for batch stages")
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse an event CSV into exposure series")
    p.add_argument("--input", required=True)
    p.add_argument("--schema", default=None, help="JSON column mapping")
    p.add_argument("--group", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="fit curve families per user")
    p.add_argument("--series", required=True)
    p.add_argument("--group", default=None)
    p.add_argument("--models", default=None, help="comma-separated family names")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("classify", help="strict per-user classification")
    p.add_argument("--series", required=True)
    p.add_argument("--group", default=None)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("diagnose", help="aggregate classification + distortion per group")
    p.add_argument("--series", required=True)
    p.add_argument("--group", default=None)
    p.add_argument("--peaks", default=None, help="CSV of individual peaks (user_id,group,peak)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("calibrate", help="synthetic-null calibration of the strict classifier")
    p.add_argument("--n", type=int, default=None, help="users per null condition")
    p.add_argument("--observed-rate", type=float, default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("synth", help="factorial attrition/amplitude experiment")
    p.add_argument("--mode", choices=("truth", "fitted"), default="truth")
    p.add_argument("--export", action="store_true", help="export per-cell events + true peaks")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("power", help="detection-power grid")
    p.set_defaults(func=cmd_power)

    p = sub.add_parser("shrink", help="empirical-Bayes peak shrinkage")
    p.add_argument("--series", required=True)
    p.add_argument("--group", default=None)
    p.set_defaults(func=cmd_shrink)

    p = sub.add_parser("pool", help="pooled cross-dataset selection test")
    p.add_argument("--summaries", required=True, help="JSON array of dataset summaries")
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("permtest", help="within-user cross-group permutation test")
    p.add_argument("--peaks", required=True, help="CSV of peaks (user_id,group,peak)")
    p.add_argument("--permutations", type=int, default=None)
    p.set_defaults(func=cmd_permtest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
