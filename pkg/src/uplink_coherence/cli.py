"""Command-line entry point: ``uplink-coherence <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import engine as E
from . import harness as H
from .align import AlignmentError, FusionError, StreamNotFound, fuse_run, parse_streams, read_fused_csv, write_fused_csv
from .sim import ScenarioError, ScenarioSpec, load_scenario, simulate_run

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_MISS = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _constants(args) -> E.RuleConstants:
    base = E.default_constants()
    if getattr(args, "config", None):
        d = _load_json(args.config)
        base = E.RuleConstants.from_dict({**asdict(base), **d.get("constants", d)})
    return base


def _load_profile(path) -> E.CalibrationProfile:
    try:
        return E.CalibrationProfile.load(path)
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read profile {path}: {exc}") from exc


def _emit(obj, fmt: str) -> None:
    if fmt == "json":
        print(json.dumps(obj, indent=2, sort_keys=True))
        return
    rows = obj if isinstance(obj, list) else [obj]
    keys = list(rows[0]) if rows else []
    print(",".join(keys))
    for r in rows:
        print(",".join(str(r[k]) for k in keys))


# --------------------------------------------------------------------------- subcommands

def cmd_sim(args) -> int:
    sc = load_scenario(args.config) if args.config else ScenarioSpec()
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    sc.validate()
    bundle = simulate_run(sc)
    out = bundle.write(args.out)
    _emit({"run_dir": str(out), "scenario": sc.label, "seed": sc.seed, "phy": len(bundle.phy),
           "mac": len(bundle.mac), "spectrum_cells": len(bundle.spectrum)}, args.format)
    return EXIT_OK


def cmd_fuse(args) -> int:
    parsed = parse_streams(args.run_dir)
    series, report = fuse_run(parsed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fused_csv(series, out / "fused.csv")
    (out / "fusion_report.json").write_text(report.to_json())
    _emit(json.loads(report.to_json()) if args.format == "json" else
          {"fused_count": report.fused_count, "coverage": report.coverage,
           "spectrum_offset_ms": report.spectrum_offset_ms}, args.format)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    runs = [read_fused_csv(p) for p in args.fused]
    profile = E.calibrate(runs, _constants(args), source_runs=[str(p) for p in args.fused])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profile.save(out / "profile.json")
    _emit({"profile": str(out / "profile.json"), "snr_residual_tol_db": profile.snr_residual_tol_db,
           "ta_reference_units": profile.ta_reference_units}, args.format)
    return EXIT_OK


def cmd_detect(args) -> int:
    if not args.profile:
        raise UsageError("detect needs --profile")
    profile = _load_profile(args.profile)
    series = read_fused_csv(args.fused)
    verdicts = E.evaluate(series, profile)
    rates = E.violation_rate(verdicts, args.window_s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    H.write_verdicts_csv(verdicts, out / "verdicts.csv")
    H.export_snr_cqi_plane(series, verdicts, out / "snr_cqi.csv")
    H.export_timeseries({Path(args.fused).parent.name or "run": rates}, out / "timeseries.csv")
    (out / "violations.json").write_text(json.dumps(rates.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit({"run_rate": rates.run_rate, **{f"{k}_rate": v for k, v in rates.per_rule_run_rates.items()}},
          args.format)
    return EXIT_OK


def _experiment_spec(args) -> H.ExperimentSpec:
    if args.config:
        spec = H.experiment_from_mapping(_load_json(args.config), args.out)
    else:
        spec = H.standard_campaign(args.out)
    if args.seed is not None:
        spec.base_seed = args.seed
    if args.window_s is not None:
        spec.window_s = args.window_s
    if args.no_streams:
        spec.write_streams = False
    if args.profile:
        p = _load_profile(args.profile)
        spec.constants = p.constants()
    try:
        spec.validate()
    except (H.HarnessError, ScenarioError) as exc:
        raise UsageError(str(exc)) from exc
    return spec


def _summary_rows(summary: dict) -> list:
    return [{"scenario": k, "n": g["n"], "min": g["min"], "median": g["median"], "max": g["max"],
             "onset_window": g["onset_window"]} for k, g in summary["groups"].items()]


def cmd_experiment(args) -> int:
    result = H.run_experiment(_experiment_spec(args))
    _emit(result.summary if args.format == "json" else _summary_rows(result.summary), args.format)
    return EXIT_OK


def cmd_report(args) -> int:
    summary = H.report_campaign(args.campaign_dir, args.out, args.window_s)
    _emit(summary if args.format == "json" else _summary_rows(summary), args.format)
    return EXIT_OK


def cmd_calibrate_defaults(args) -> int:
    grid = None
    seed = args.seed if args.seed is not None else 0
    if args.config:
        d = _load_json(args.config)
        grid = d.get("grid")
        seed = int(d.get("base_seed", seed))
    spec = H.standard_campaign(None, base_seed=seed)
    runs = H.simulate_campaign(spec)
    profile = H.calibrate_campaign(runs, spec, E.default_constants())
    result = H.calibrate_defaults(runs, profile, grid)
    prof_path, log_path = H.write_tuning(result, args.out)
    _emit({"profile": str(prof_path), "search_log": str(log_path), "distance": result.distance,
           "misses": ";".join(result.misses)}, args.format)
    if result.misses:
        logging.warning("no grid point lands every group median inside its target; misses: %s",
                        ", ".join(result.misses))
        return EXIT_MISS
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uplink-coherence", description="Cross-layer uplink telemetry consistency toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--format", choices=("csv", "json"), default="csv", help="stdout format")
        return sp

    sp = common(sub.add_parser("sim", help="simulate one run and write its telemetry streams"))
    sp.add_argument("--config", help="scenario file (key = value lines)")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_sim)

    sp = common(sub.add_parser("fuse", help="parse, align and fuse a run directory"))
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_fuse)

    sp = common(sub.add_parser("calibrate", help="build a profile from baseline fused.csv files"))
    sp.add_argument("fused", nargs="+")
    sp.add_argument("--config", help="JSON with rule constants")
    sp.set_defaults(func=cmd_calibrate)

    sp = common(sub.add_parser("detect", help="evaluate a fused.csv against a profile"))
    sp.add_argument("fused")
    sp.add_argument("--profile")
    sp.add_argument("--window-s", type=_positive, default=10.0)
    sp.set_defaults(func=cmd_detect)

    sp = common(sub.add_parser("experiment", help="run a full campaign (the standard 26-run campaign by default)"))
    sp.add_argument("--config", help="experiment JSON")
    sp.add_argument("--seed", type=int, help="base seed")
    sp.add_argument("--window-s", type=_positive)
    sp.add_argument("--profile", help="take rule constants from this profile")
    sp.add_argument("--no-streams", action="store_true", help="skip writing raw JSON Lines streams")
    sp.set_defaults(func=cmd_experiment)

    sp = common(sub.add_parser("report", help="rebuild summary and exports from a campaign directory"))
    sp.add_argument("campaign_dir")
    sp.add_argument("--window-s", type=_positive)
    sp.set_defaults(func=cmd_report)

    sp = common(sub.add_parser("calibrate-defaults", help="grid-search rule constants on the standard campaign"))
    sp.add_argument("--config", help="JSON with a 'grid' mapping of constant name to values")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_calibrate_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StreamNotFound, FusionError, AlignmentError, H.HarnessError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
