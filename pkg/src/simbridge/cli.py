"""Command-line entry points.

Subcommands:

  run        closed-loop scenario (sim server + bridge + AV client)
  bench      one benchmark configuration
  sweep      full configuration sweep from a grid file
  validate   check config files and report every violation
  sim-server / bridge-node / av-client
             single components, used by --distributed mode

Exit codes: 0 success (run: verdict goal-reached; bench/sweep: every
configuration produced data; validate: all files valid), 1 runtime
failure, 2 invalid configuration. Set SIMBRIDGE_LOG=INFO or DEBUG for
progress output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .bench import BenchConfig, _parse_resolution, emit_report, parse_grid, run_sweep
from .config import (
    ConfigError,
    builtin_path,
    load_scenario,
    parse_route,
    parse_sensor_kit,
    parse_topic_map,
    parse_vehicle_params,
)
from .runner import apply_overrides, run_scenario

log = logging.getLogger(__name__)


def _setup_logging() -> None:
    name = os.environ.get("SIMBRIDGE_LOG", "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
    )


def _print_config_errors(e: ConfigError) -> int:
    print("configuration errors:", file=sys.stderr)
    for msg in e.errors:
        print(f"  - {msg}", file=sys.stderr)
    return 2


def _scenario_path(arg: str) -> Path:
    """A scenario argument is either a file path or the name of a packaged
    scenario (straight_8p33, three_sharp_turns, release)."""
    p = Path(arg)
    if p.exists():
        return p
    if "/" not in arg and not arg.endswith(".json"):
        try:
            return builtin_path(f"{arg}.scenario.json")
        except FileNotFoundError:
            pass
    raise ConfigError([f"no such scenario file or builtin name: {arg!r}"])


# ---------------------------------------------------------------------------
# run

def cmd_run(args) -> int:
    try:
        resolved = load_scenario(_scenario_path(args.scenario))
    except ConfigError as e:
        return _print_config_errors(e)
    resolved = apply_overrides(
        resolved,
        seed=args.seed,
        duration_s=args.duration,
        pid_profile=args.pid_profile,
        steer_map_enabled=False if args.disable_steer_map else None,
    )
    out = Path(args.out) if args.out else Path("runs") / resolved.scenario.name
    summary = run_scenario(resolved, out, distributed=args.distributed)
    print(f"run dir:  {summary.run_dir}")
    print(f"verdict:  {summary.verdict} ({summary.reason})")
    print(f"steps:    {summary.steps}  wall: {summary.wall_s:.1f}s")
    print(f"trace:    {summary.files['trace']}")
    for line in summary.errors:
        print(f"component error: {line}", file=sys.stderr)
    return 0 if summary.exit_ok else 1


# ---------------------------------------------------------------------------
# bench / sweep

def _bench_config(args) -> BenchConfig:
    resolution = _parse_resolution(args.resolution)
    if args.lidars > 0 and args.cameras > 0:
        sensors = "mixed"
        detail = f"{args.points_per_sec}pps/{resolution[0]}x{resolution[1]}"
    elif args.cameras > 0:
        sensors = "camera"
        detail = f"{resolution[0]}x{resolution[1]}"
    else:
        sensors = "lidar"
        detail = str(args.points_per_sec)
    label = f"bench_{args.lidars}l_{args.cameras}c_{detail.replace('/', '_')}"
    return BenchConfig(
        label=label,
        sensors=sensors,
        count=args.lidars + args.cameras,
        density_or_resolution=detail,
        lidars=args.lidars,
        points_per_second=args.points_per_sec,
        cameras=args.cameras,
        resolution=resolution,
        duration_s=args.duration,
        seed=args.seed,
    )


def _finish_bench(reports, out_dir) -> int:
    paths = emit_report(reports, out_dir)
    print(f"summary:  {paths[0]}")
    print(f"emitted:  {len(paths)} files in {out_dir}")
    failed = [r for r in reports if r.error]
    for r in failed:
        print(f"config {r.label} failed: {r.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_bench(args) -> int:
    if args.lidars < 0 or args.cameras < 0:
        print("sensor counts must be non-negative", file=sys.stderr)
        return 2
    try:
        cfg = _bench_config(args)
    except ConfigError as e:
        return _print_config_errors(e)
    reports = run_sweep([cfg], args.out, distributed=args.distributed)
    return _finish_bench(reports, args.out)


def cmd_sweep(args) -> int:
    grid_path = Path(args.grid) if args.grid else builtin_path("full_grid.json")
    try:
        with open(grid_path) as f:
            grid = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        print(f"cannot read grid file {grid_path}: {e}", file=sys.stderr)
        return 2
    try:
        configs = parse_grid(grid)
    except ConfigError as e:
        return _print_config_errors(e)
    print(f"sweeping {len(configs)} configurations from {grid_path}")
    reports = run_sweep(configs, args.out, distributed=not args.threaded)
    return _finish_bench(reports, args.out)


# ---------------------------------------------------------------------------
# validate

_DETECTORS = (
    ("route_file", "scenario", None),
    ("sensors", "sensor kit", parse_sensor_kit),
    ("topics", "topic map", parse_topic_map),
    ("centerline", "route", parse_route),
    ("wheelbase", "vehicle", parse_vehicle_params),
)


def _validate_one(path: Path) -> list[str]:
    try:
        text = path.read_text()
        data = json.loads(text)
    except (OSError, json.JSONDecodeError) as e:
        print(f"FAIL  {path}")
        return [str(e)]
    for key, kind, parser in _DETECTORS:
        if isinstance(data, dict) and key in data:
            try:
                if parser is None:
                    # A scenario is only valid with everything it references.
                    load_scenario(path)
                else:
                    parser(text)
            except ConfigError as e:
                print(f"FAIL  {path} ({kind})")
                return list(e.errors)
            print(f"ok    {path} ({kind})")
            return []
    print(f"FAIL  {path}")
    return ["unrecognized config file (expected scenario, kit, topic map, route, or vehicle)"]


def cmd_validate(args) -> int:
    all_errors: list[str] = []
    for raw in args.paths:
        errors = _validate_one(Path(raw))
        for msg in errors:
            print(f"      - {msg}", file=sys.stderr)
        all_errors.extend(errors)
    return 2 if all_errors else 0


# ---------------------------------------------------------------------------
# single components (distributed mode)

def cmd_component(args) -> int:
    # Imported here so plain CLI use does not pay for the runtime modules.
    from .avharness import run_av_client
    from .bridge import run_bridge
    from .simharness import run_sim_server

    try:
        resolved = load_scenario(args.scenario)
    except ConfigError as e:
        return _print_config_errors(e)
    run_dir = Path(args.scenario).resolve().parent
    try:
        if args.component == "sim-server":
            report = run_sim_server(resolved, run_dir / "sim_report.json")
            return 0 if report.session == "completed" else 1
        if args.component == "bridge-node":
            report = run_bridge(resolved, run_dir / "bridge_report.json")
            return 0 if report.session == "completed" else 1
        report, _ = run_av_client(
            resolved, run_dir / "av_report.json", run_dir / "trace.csv"
        )
        return 0 if report.verdict != "error" else 1
    except Exception as e:  # noqa: BLE001 - component already wrote its report
        log.error("%s failed: %s", args.component, e)
        return 1


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simbridge",
        description="Lockstep simulator-to-AV bridge with mock endpoints and a benchmark harness.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a closed-loop scenario")
    p.add_argument("scenario", help="scenario file or builtin name (straight_8p33, three_sharp_turns, release)")
    p.add_argument("--out", help="run directory (default: runs/<scenario name>)")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--duration", type=float, help="override the duration limit [s]")
    p.add_argument("--pid-profile", choices=("tuned", "default"), help="speed controller gain set")
    p.add_argument("--disable-steer-map", action="store_true",
                   help="forward raw tire-angle radians as the normalized steer value")
    p.add_argument("--distributed", action="store_true", help="one process per component")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run one benchmark configuration")
    p.add_argument("--lidars", type=int, default=1)
    p.add_argument("--points-per-sec", type=int, default=100_000)
    p.add_argument("--cameras", type=int, default=0)
    p.add_argument("--resolution", default="1280x720", help="camera resolution WxH")
    p.add_argument("--duration", type=float, default=8.0,
                   help="minimum wall-clock collection time per run [s]")
    p.add_argument("--seed", type=int, default=20)
    p.add_argument("--out", default="bench_out", help="output directory")
    p.add_argument("--distributed", action="store_true", help="one process per component")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="run a full configuration sweep")
    p.add_argument("--grid", help="grid JSON (default: the packaged full grid)")
    p.add_argument("--out", default="sweep_out", help="output directory")
    p.add_argument("--threaded", action="store_true",
                   help="run components as threads instead of separate processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="validate configuration files")
    p.add_argument("paths", nargs="+", help="config files to check")
    p.set_defaults(func=cmd_validate)

    for name, description in (
        ("sim-server", "mock simulator endpoint"),
        ("bridge-node", "bridge itself"),
        ("av-client", "mock AV stack endpoint"),
    ):
        p = sub.add_parser(name, help=f"run only the {description}")
        p.add_argument("--scenario", required=True, help="scenario file (reports land next to it)")
        p.set_defaults(func=cmd_component, component=name)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
