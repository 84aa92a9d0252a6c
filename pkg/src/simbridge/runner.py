"""Launch and supervise one closed-loop session.

A session is three components: the mock simulator server, the bridge, and
the mock AV client. Default mode runs them as threads of this process over
loopback TCP, which keeps runs deterministic and cheap. Distributed mode
runs each as its own interpreter via the CLI so OS process accounting can
attribute CPU per component.

Every run gets a self-contained directory: the scenario and all files it
references are copied in with rewritten relative paths, and each component
drops its report JSON next to them. Re-running `simbridge run` on that
directory's scenario.json reproduces the session.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .avharness import run_av_client
from .bench import CpuSampler
from .bridge import run_bridge
from .config import (
    LoadModel,
    ResolvedScenario,
    kit_to_dict,
    route_to_dict,
    scenario_to_dict,
    topic_map_to_dict,
    vehicle_to_dict,
)
from .simharness import run_sim_server

log = logging.getLogger(__name__)

SCENARIO_FILE = "scenario.json"
TRACE_FILE = "trace.csv"
REPORT_FILES = {
    "sim": "sim_report.json",
    "bridge": "bridge_report.json",
    "av": "av_report.json",
}
COMPONENT_COMMANDS = {
    "sim": "sim-server",
    "bridge": "bridge-node",
    "av": "av-client",
}


def pick_free_ports(n: int) -> list[int]:
    """Distinct ephemeral loopback ports, all held open until chosen."""
    socks = [socket.create_server(("127.0.0.1", 0)) for _ in range(n)]
    try:
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def resolve_endpoints(resolved: ResolvedScenario) -> ResolvedScenario:
    """Replace port 0 placeholders with concrete free ports."""
    ep = resolved.scenario.endpoints
    if ep.sim_port != 0 and ep.av_port != 0:
        return resolved
    ports = iter(pick_free_ports(2))
    ep = replace(
        ep,
        sim_port=ep.sim_port or next(ports),
        av_port=ep.av_port or next(ports),
    )
    return replace(resolved, scenario=replace(resolved.scenario, endpoints=ep))


def apply_overrides(
    resolved: ResolvedScenario,
    seed: Optional[int] = None,
    duration_s: Optional[float] = None,
    pid_profile: Optional[str] = None,
    steer_map_enabled: Optional[bool] = None,
    load_model: Optional[LoadModel] = None,
) -> ResolvedScenario:
    sc = resolved.scenario
    if seed is not None:
        sc = replace(sc, seed=seed)
    if duration_s is not None:
        sc = replace(sc, duration_limit_s=duration_s)
    if pid_profile is not None or steer_map_enabled is not None:
        cc = sc.controller
        cc = replace(
            cc,
            pid_profile=pid_profile if pid_profile is not None else cc.pid_profile,
            steer_map_enabled=steer_map_enabled
            if steer_map_enabled is not None
            else cc.steer_map_enabled,
        )
        sc = replace(sc, controller=cc)
    if load_model is not None:
        sc = replace(sc, load_model=load_model)
    return replace(resolved, scenario=sc)


def materialize_run_dir(resolved: ResolvedScenario, run_dir) -> Path:
    """Write the scenario and everything it references into run_dir with
    canonical relative names. Returns the scenario.json path."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    sc = replace(
        resolved.scenario,
        route_file="route.json",
        sensor_kit_file="kit.json",
        vehicle_file="vehicle.json",
        topic_map_file="topics.json",
    )
    contents = {
        "route.json": route_to_dict(resolved.route),
        "kit.json": kit_to_dict(resolved.kit),
        "vehicle.json": vehicle_to_dict(resolved.vehicle),
        "topics.json": topic_map_to_dict(resolved.topic_map),
        SCENARIO_FILE: scenario_to_dict(sc),
    }
    for name, data in contents.items():
        (run_dir / name).write_text(json.dumps(data, indent=2) + "\n")
    return run_dir / SCENARIO_FILE


@dataclass
class RunSummary:
    verdict: str
    reason: str
    steps: int
    wall_s: float
    run_dir: str
    files: dict
    sim: dict
    bridge: dict
    av: dict
    cpu: dict = field(default_factory=dict)  # component -> [CpuSample]
    errors: list = field(default_factory=list)

    @property
    def exit_ok(self) -> bool:
        return self.verdict == "goal-reached"

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "reason": self.reason,
            "steps": self.steps,
            "wall_s": self.wall_s,
            "run_dir": self.run_dir,
            "files": self.files,
            "errors": self.errors,
            "cpu": {
                name: [[s.wall_t, s.cpu_percent] for s in samples]
                for name, samples in self.cpu.items()
            },
        }


def _wall_limit(resolved: ResolvedScenario) -> float:
    # Generous safety net; every component also guards itself.
    return 150.0 + 10.0 * resolved.scenario.duration_limit_s


def _read_json(path: Path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError):
        return {}


def _launch_threads(resolved: ResolvedScenario, run_dir: Path, errors: list) -> dict:
    stop = threading.Event()
    paths = {name: run_dir / fname for name, fname in REPORT_FILES.items()}
    targets = {
        "sim": lambda: run_sim_server(resolved, paths["sim"], stop),
        "bridge": lambda: run_bridge(resolved, paths["bridge"], stop),
        "av": lambda: run_av_client(resolved, paths["av"], run_dir / TRACE_FILE, stop),
    }
    failures: dict[str, BaseException] = {}

    def wrap(name):
        def target():
            try:
                targets[name]()
            except BaseException as e:  # noqa: BLE001 - surfaced via the summary
                failures[name] = e
                stop.set()
        return threading.Thread(target=target, name=f"simbridge-{name}", daemon=True)

    threads = {name: wrap(name) for name in targets}
    sampler = CpuSampler({"bridge": os.getpid()}).start()
    for t in threads.values():
        t.start()

    limit = _wall_limit(resolved)
    threads["av"].join(timeout=limit)
    if threads["av"].is_alive():
        errors.append(f"av: still running after {limit:.0f}s, aborting session")
        stop.set()
    for name in ("bridge", "sim"):
        threads[name].join(timeout=15.0)
        if threads[name].is_alive():
            stop.set()
            threads[name].join(timeout=15.0)
        if threads[name].is_alive():
            errors.append(f"{name}: did not shut down")
    errors.extend(f"{name}: {type(e).__name__}: {e}" for name, e in sorted(failures.items()))
    return sampler.stop()


def _launch_processes(run_dir: Path, scenario_path: Path, limit: float, errors: list) -> dict:
    procs: dict[str, subprocess.Popen] = {}
    logs = []
    # Children run with cwd=run_dir, so a relative scenario path (from a
    # relative --out) would resolve against the wrong directory.
    scenario_path = Path(scenario_path).resolve()
    for name, command in COMPONENT_COMMANDS.items():
        log_file = open(run_dir / f"{name}.log", "w")
        logs.append(log_file)
        procs[name] = subprocess.Popen(
            [sys.executable, "-m", "simbridge.cli", command,
             "--scenario", str(scenario_path)],
            stdout=log_file,
            stderr=subprocess.STDOUT,
            cwd=str(run_dir),
        )
    sampler = CpuSampler({name: p.pid for name, p in procs.items()}).start()
    try:
        try:
            procs["av"].wait(timeout=limit)
        except subprocess.TimeoutExpired:
            errors.append(f"av: still running after {limit:.0f}s, aborting session")
        for name in ("av", "bridge", "sim"):
            p = procs[name]
            try:
                p.wait(timeout=15.0)
            except subprocess.TimeoutExpired:
                p.terminate()
                try:
                    p.wait(timeout=5.0)
                except subprocess.TimeoutExpired:
                    p.kill()
                    p.wait()
                errors.append(f"{name}: killed after timeout")
            if p.returncode not in (0, None):
                errors.append(f"{name}: exited with status {p.returncode}")
    finally:
        for f in logs:
            f.close()
    return sampler.stop()


def run_scenario(
    resolved: ResolvedScenario,
    run_dir,
    distributed: bool = False,
) -> RunSummary:
    """Run one full session and collect every artifact it produced."""
    resolved = resolve_endpoints(resolved)
    run_dir = Path(run_dir)
    scenario_path = materialize_run_dir(resolved, run_dir)
    errors: list[str] = []
    t0 = time.monotonic()
    if distributed:
        cpu = _launch_processes(run_dir, scenario_path, _wall_limit(resolved), errors)
    else:
        cpu = _launch_threads(resolved, run_dir, errors)
    wall_s = time.monotonic() - t0

    reports = {name: _read_json(run_dir / fname) for name, fname in REPORT_FILES.items()}
    for name, rep in reports.items():
        if rep.get("error"):
            errors.append(f"{name}: {rep['error']}")
    av = reports["av"]
    verdict = av.get("verdict", "error") if av else "error"
    reason = av.get("reason", "no AV report produced") if av else "no AV report produced"

    files = {"scenario": str(scenario_path), "trace": str(run_dir / TRACE_FILE)}
    for name, fname in REPORT_FILES.items():
        files[f"{name}_report"] = str(run_dir / fname)
    summary = RunSummary(
        verdict=verdict,
        reason=reason,
        steps=reports["bridge"].get("ticks", 0),
        wall_s=wall_s,
        run_dir=str(run_dir),
        files=files,
        sim=reports["sim"],
        bridge=reports["bridge"],
        av=av,
        cpu=cpu,
        errors=errors,
    )
    with open(run_dir / "run_summary.json", "w") as f:
        json.dump(summary.to_dict(), f, indent=2)
    return summary
