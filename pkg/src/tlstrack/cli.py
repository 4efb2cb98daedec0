"""Command-line pipeline: simulate -> fit-series -> track / correlate.

Every command writes a ``manifest.json`` next to its outputs recording the
tool version, the resolved configuration (flags beat the config file, which
beats built-in defaults), seeds, and timing.  Exit codes: 0 success
(possibly with warnings), 2 input or validation error, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .dynamics import DecayRates, PopulationTrace
from .errors import (
    InvalidParameterError,
    ScenarioSchemaError,
    TlstrackError,
    UndefinedCorrelationError,
)
from .readout import ConfusionMatrix, mitigate_trace
from .synth import bundled_scenario_path, load_scenario, write_run_directory
from .tls import DeviceFrequencies
from .trace_fit import fit_trace
from .tracker import (
    LifetimeSeries,
    TrackerConfig,
    lifetime_correlation,
    select_model,
    track_tls,
    write_correlation_csv,
    write_trajectory_csv,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_IO = 3

OUT_ROOT_ENV = "TLSTRACK_OUT_ROOT"


def _resolve_out(raw: str | None, default: Path) -> Path:
    if raw is None:
        return default
    out = Path(raw)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise InvalidParameterError(f"config file {path}: not valid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise InvalidParameterError(f"config file {path}: expected a JSON object")
    return doc


def _resolve(flag_value, config: dict, key: str, default):
    """flags > config file > built-in default"""
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _write_manifest(out_dir: Path, subcommand: str, resolved: dict, inputs: list[str],
                    outputs: list[str], seed, started: float) -> None:
    manifest = {
        "tool": "tlstrack",
        "version": __version__,
        "subcommand": subcommand,
        "resolved_config": resolved,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "master_seed": seed,
        "started_at": datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
        "duration_s": time.time() - started,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def _tracker_config(config: dict) -> TrackerConfig:
    cfg = TrackerConfig()
    for key, value in config.get("tracker", {}).items():
        if not hasattr(cfg, key):
            raise InvalidParameterError(f"unknown tracker config key {key!r}")
        if key == "fixed_background" and isinstance(value, dict):
            value = DecayRates(value.get("gamma10", 0.0), value.get("gamma21", 0.0))
        setattr(cfg, key, value)
    return cfg


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args, config: dict) -> int:
    started = time.time()
    scenario_path = Path(args.scenario)
    if not scenario_path.exists():
        try:
            scenario_path = bundled_scenario_path(args.scenario)
        except InvalidParameterError:
            raise InvalidParameterError(
                f"scenario {args.scenario!r} is neither a file nor a bundled name"
            ) from None
    # validate fully before creating any output
    scenario = load_scenario(scenario_path)
    if args.seed is not None:
        scenario.master_seed = args.seed
    jobs = int(_resolve(args.jobs, config, "jobs", 1))

    out = _resolve_out(args.out, Path(f"{scenario.name}_run"))
    out.mkdir(parents=True, exist_ok=True)
    write_run_directory(scenario, out, jobs=jobs)
    outputs = [str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()]
    _write_manifest(out, "simulate", {"jobs": jobs, "scenario": str(scenario_path)},
                    [str(scenario_path)], outputs, scenario.master_seed, started)
    print(f"simulate: wrote {scenario.epochs} epochs to {out}")
    return EXIT_OK


def _fit_one_epoch(args) -> dict:
    path, confusion_doc, weighting = args
    trace = PopulationTrace.from_csv(path)
    if confusion_doc is not None:
        confusion = ConfusionMatrix.from_json_dict(confusion_doc)
        trace = mitigate_trace(confusion, trace)
    fit = fit_trace(trace, weighting=weighting)
    return fit.to_json_dict()


def cmd_fit_series(args, config: dict) -> int:
    started = time.time()
    run_dir = Path(args.run_dir)
    traces_dir = run_dir / "traces"
    trace_files = sorted(traces_dir.glob("epoch_*.csv")) if traces_dir.is_dir() else []
    if not trace_files:
        raise InvalidParameterError(f"{run_dir}: no traces/epoch_*.csv files found")

    confusion_doc = None
    if not args.no_mitigation:
        confusion_path = run_dir / "confusion.json"
        if not confusion_path.exists():
            raise InvalidParameterError(
                f"{run_dir}: confusion.json missing (pass --no-mitigation to skip)"
            )
        confusion_doc = ConfusionMatrix.from_json(confusion_path).to_json_dict()

    weighting = _resolve(args.weighting, config, "weighting", "uniform")
    jobs = int(_resolve(args.jobs, config, "jobs", 1))
    scenario_doc = {}
    scenario_path = run_dir / "scenario.json"
    if scenario_path.exists():
        with open(scenario_path) as fh:
            scenario_doc = json.load(fh)
    spacing = scenario_doc.get("epoch_spacing_hr", 1.0)

    work = [(str(p), confusion_doc, weighting) for p in trace_files]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fits = list(pool.map(_fit_one_epoch, work, chunksize=8))
    else:
        fits = [_fit_one_epoch(w) for w in work]

    out = _resolve_out(args.out, run_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "fits.json", "w") as fh:
        json.dump({"epoch_spacing_hr": spacing, "fits": fits}, fh, indent=1)
    series_path = out / "series.csv"
    with open(series_path, "w", newline="") as fh:
        fh.write("timestamp_hr,t1e_us,t1f_us,err_e,err_f,converged\n")
        for i, fit in enumerate(fits):
            fh.write(
                f"{i * spacing!r},{fit['t1e_us']!r},{fit['t1f_us']!r},"
                f"{fit['stderr_t1e']!r},{fit['stderr_t1f']!r},{int(fit['converged'])}\n"
            )
    n_bad = sum(1 for f in fits if not f["converged"])
    _write_manifest(out, "fit-series",
                    {"weighting": weighting, "jobs": jobs,
                     "mitigation": confusion_doc is not None},
                    [str(run_dir)], ["fits.json", "series.csv"], None, started)
    print(f"fit-series: {len(fits)} epochs -> {series_path}"
          + (f" ({n_bad} unconverged, flagged)" if n_bad else ""))
    return EXIT_OK


def _load_device(path: str) -> DeviceFrequencies:
    with open(path) as fh:
        doc = json.load(fh)
    dev = doc.get("device", doc)
    try:
        return DeviceFrequencies(dev["omega01_mhz"], dev["anharmonicity_mhz"])
    except (KeyError, TypeError):
        raise InvalidParameterError(
            f"{path}: expected omega01_mhz and anharmonicity_mhz (or a scenario file)"
        ) from None


def cmd_track(args, config: dict) -> int:
    started = time.time()
    series = LifetimeSeries.from_csv(args.series)
    device = _load_device(args.device)
    tracker_cfg = _tracker_config(config)

    if args.order == "auto":
        fit = select_model(series, device, tracker_cfg)
    else:
        fit = track_tls(series, device, int(args.order), tracker_cfg)

    out = _resolve_out(args.out, Path(args.series).resolve().parent)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(fit, out / "trajectory.csv")
    write_correlation_csv(fit, series, out / "correlation.csv")
    with open(out / "fit.json", "w") as fh:
        json.dump(fit.to_json_dict(), fh, indent=1)
    _write_manifest(out, "track", {"order": args.order, "device": args.device},
                    [args.series], ["trajectory.csv", "correlation.csv", "fit.json"],
                    None, started)
    msg = f"track: order {fit.model_order}, misfit {fit.misfit:.3e} -> {out}"
    if fit.warnings:
        msg += f" [warnings: {'; '.join(fit.warnings)}]"
    print(msg)
    return EXIT_OK


def cmd_correlate(args, config: dict) -> int:
    started = time.time()
    series = LifetimeSeries.from_csv(args.series)
    r = lifetime_correlation(series)
    out = _resolve_out(args.out, Path(args.series).resolve().parent)
    out.mkdir(parents=True, exist_ok=True)
    scatter = out / "correlation_scatter.csv"
    with open(scatter, "w", newline="") as fh:
        fh.write("t1e_us,t1f_us\n")
        for a, b in zip(series.t1e_us, series.t1f_us):
            fh.write(f"{float(a)!r},{float(b)!r}\n")
    _write_manifest(out, "correlate", {}, [args.series],
                    ["correlation_scatter.csv"], None, started)
    print(f"pearson_r = {r:.6f}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tlstrack",
        description="Simulate and analyze three-level relaxation runs to track TLS defects.",
    )
    parser.add_argument("--version", action="version", version=f"tlstrack {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic run directory from a scenario")
    p.add_argument("scenario", help="scenario JSON path or bundled name (device_A, device_B)")
    p.add_argument("--out", help="output run directory")
    p.add_argument("--seed", type=int, help="override the scenario master seed")
    p.add_argument("--jobs", type=int, help="parallel workers for epoch synthesis")
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-series", help="mitigate and fit every trace in a run directory")
    p.add_argument("run_dir", help="run directory produced by simulate")
    p.add_argument("--out", help="output directory (default: the run directory)")
    p.add_argument("--weighting", choices=["uniform", "binomial"])
    p.add_argument("--no-mitigation", action="store_true",
                   help="skip readout mitigation even if confusion.json exists")
    p.add_argument("--jobs", type=int, help="parallel workers for trace fitting")
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=cmd_fit_series)

    p = sub.add_parser("track", help="invert a lifetime series into TLS trajectories")
    p.add_argument("series", help="series CSV (timestamp_hr,t1e_us,t1f_us[,err_e,err_f])")
    p.add_argument("--device", required=True,
                   help="device JSON with omega01_mhz and anharmonicity_mhz (a scenario file works)")
    p.add_argument("--order", choices=["1", "2", "auto"], default="auto")
    p.add_argument("--out", help="output directory (default: series directory)")
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("correlate", help="Pearson correlation of the two lifetime channels")
    p.add_argument("series", help="series CSV")
    p.add_argument("--out", help="output directory (default: series directory)")
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=cmd_correlate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config_file(getattr(args, "config", None))
        return args.func(args, config)
    except (ScenarioSchemaError, InvalidParameterError, UndefinedCorrelationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except TlstrackError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
