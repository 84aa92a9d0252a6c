"""Benchmark instrumentation and the configuration sweep driver.

Three measurement primitives, kept deliberately dumb so they cannot distort
what they measure:

  * LatencyTap pairs per-message ingress/egress timestamps by message id.
    Stamps are monotonic nanoseconds taken in the bridge's message path;
    aggregation happens after the run.
  * sample_cpu polls OS process accounting (via psutil) on a fixed interval.
    100.0 means one full core; a vanished process yields None, never zero.
  * fps_counter turns tick wall times into an average step rate with the
    warm-up window excluded.

On top of those, run_sweep launches one closed-loop session per grid
configuration (sensor counts x densities x resolutions) and emit_report
writes the summary CSV plus one latency histogram figure per configuration.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np
import psutil

from .config import (
    ConfigError,
    Endpoints,
    InitialPose,
    LoadModel,
    MountPose,
    ResolvedScenario,
    RouteSpec,
    ScenarioConfig,
    SensorKitConfig,
    SensorSpec,
    VehicleParameters,
    default_topic_map,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# latency

class DuplicateMessageId(ValueError):
    """A message id was registered for ingress twice."""


@dataclass(frozen=True)
class LatencyRecord:
    msg_id: int
    sensor_id: str
    kind: str
    ingress_ns: int
    egress_ns: int

    @property
    def latency_ns(self) -> int:
        return self.egress_ns - self.ingress_ns


class LatencyTap:
    """Pairs ingress and egress timestamps by message id.

    record_ingress when a frame has been read off the simulator socket,
    record_egress once its converted form has been written toward the AV.
    Egress without a matching ingress bumps the orphan counter; ingress
    that never pairs (dropped frames) shows up in unpaired_ingress.
    """

    def __init__(self):
        self.records: list[LatencyRecord] = []
        self.orphan_egress = 0
        self._pending: dict[int, tuple[str, str, int]] = {}
        self._seen: set[int] = set()

    def record_ingress(self, msg_id: int, sensor_id: str, kind: str, t_ns: int) -> None:
        if msg_id in self._seen:
            raise DuplicateMessageId(f"message id {msg_id} registered twice")
        self._seen.add(msg_id)
        self._pending[msg_id] = (sensor_id, kind, t_ns)

    def record_egress(self, msg_id: int, t_ns: int) -> Optional[LatencyRecord]:
        entry = self._pending.pop(msg_id, None)
        if entry is None:
            self.orphan_egress += 1
            return None
        sensor_id, kind, t_in = entry
        if t_ns < t_in:
            raise ValueError(f"egress {t_ns} precedes ingress {t_in} for message {msg_id}")
        rec = LatencyRecord(msg_id, sensor_id, kind, t_in, t_ns)
        self.records.append(rec)
        return rec

    @property
    def unpaired_ingress(self) -> int:
        return len(self._pending)


@dataclass(frozen=True)
class Histogram:
    """Latency histogram in milliseconds.

    bins[i] counts latencies in [i*bin_width, (i+1)*bin_width); the final
    bin is the overflow bucket for everything at or beyond range_ms, so
    sum(bins) == total always holds.
    """

    bin_width_ms: float
    range_ms: float
    bins: tuple
    total: int
    min_ms: Optional[float]
    max_ms: Optional[float]
    mean_ms: Optional[float]
    median_ms: Optional[float]
    p99_ms: Optional[float]

    def to_dict(self) -> dict:
        return {
            "bin_width_ms": self.bin_width_ms,
            "range_ms": self.range_ms,
            "bins": list(self.bins),
            "total": self.total,
            "min_ms": self.min_ms,
            "max_ms": self.max_ms,
            "mean_ms": self.mean_ms,
            "median_ms": self.median_ms,
            "p99_ms": self.p99_ms,
        }


def build_histogram(
    latencies_ns: Sequence[int],
    bin_width_ms: float = 0.5,
    range_ms: float = 50.0,
) -> Histogram:
    if bin_width_ms <= 0 or range_ms <= 0:
        raise ValueError("bin width and range must be positive")
    n_regular = int(round(range_ms / bin_width_ms))
    if not len(latencies_ns):
        return Histogram(bin_width_ms, range_ms, (0,) * (n_regular + 1), 0,
                         None, None, None, None, None)
    ms = np.asarray(latencies_ns, dtype=np.float64) / 1e6
    if np.any(ms < 0):
        raise ValueError("negative latency in histogram input")
    idx = np.minimum((ms / bin_width_ms).astype(np.int64), n_regular)
    bins = np.bincount(idx, minlength=n_regular + 1)
    return Histogram(
        bin_width_ms=bin_width_ms,
        range_ms=range_ms,
        bins=tuple(int(c) for c in bins),
        total=int(ms.size),
        min_ms=float(ms.min()),
        max_ms=float(ms.max()),
        mean_ms=float(ms.mean()),
        median_ms=float(np.median(ms)),
        p99_ms=float(np.percentile(ms, 99)),
    )


# ---------------------------------------------------------------------------
# CPU sampling

@dataclass(frozen=True)
class CpuSample:
    wall_t: float
    cpu_percent: Optional[float]  # None: process vanished or unreadable


def sample_cpu(
    pids: Mapping[str, int],
    interval_s: float = 0.2,
    stop: Optional[threading.Event] = None,
) -> Iterator[dict[str, CpuSample]]:
    """Yield one CpuSample per named process every interval until stopped.

    The first accounting read only arms the counters, so the stream starts
    one interval after the call. Processes that disappear keep their slot
    with cpu_percent None so gaps stay visible in the record.
    """
    if interval_s <= 0:
        raise ValueError("sampling interval must be positive")
    procs: dict[str, Optional[psutil.Process]] = {}
    for name, pid in pids.items():
        try:
            p = psutil.Process(pid)
            p.cpu_percent(None)  # arm the per-process counter
        except (psutil.NoSuchProcess, psutil.AccessDenied, psutil.ZombieProcess):
            p = None
        procs[name] = p
    while stop is None or not stop.is_set():
        if stop is not None:
            stop.wait(interval_s)
            if stop.is_set():
                return
        else:
            time.sleep(interval_s)
        now = time.monotonic()
        batch = {}
        for name, p in procs.items():
            value: Optional[float] = None
            if p is not None:
                try:
                    value = float(p.cpu_percent(None))
                except (psutil.NoSuchProcess, psutil.AccessDenied, psutil.ZombieProcess):
                    procs[name] = None
            # a dead process stays in the batch, marked absent
            batch[name] = CpuSample(now, value)
        yield batch


class CpuSampler:
    """Background thread collecting CpuSamples per named process."""

    def __init__(self, pids: Mapping[str, int], interval_s: float = 0.2):
        self.samples: dict[str, list[CpuSample]] = {name: [] for name in pids}
        self._stop = threading.Event()
        self._thread = threading.Thread(
            target=self._run, args=(dict(pids), interval_s), daemon=True
        )

    def _run(self, pids: dict, interval_s: float) -> None:
        for batch in sample_cpu(pids, interval_s, stop=self._stop):
            for name, sample in batch.items():
                self.samples[name].append(sample)

    def start(self) -> "CpuSampler":
        self._thread.start()
        return self

    def stop(self) -> dict[str, list[CpuSample]]:
        self._stop.set()
        self._thread.join(timeout=5.0)
        return self.samples


def cpu_mean_std(samples: Sequence[CpuSample]) -> tuple[Optional[float], Optional[float]]:
    """Mean and sample stddev over the readable samples; (None, None) when
    the process was never readable."""
    values = [s.cpu_percent for s in samples if s.cpu_percent is not None]
    if not values:
        return None, None
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) >= 2 else 0.0
    return mean, std


# ---------------------------------------------------------------------------
# FPS

FPS_WARMUP_S = 2.0


def fps_counter(tick_times: Sequence[float], warmup_s: float = FPS_WARMUP_S) -> float:
    """Average completed steps per wall second, ignoring the warm-up window.

    Counts ticks strictly later than first_tick + warmup_s over the span
    from the end of the warm-up to the last tick, so a uniform 30 Hz tick
    stream reports exactly 30.
    """
    if not tick_times:
        log.warning("fps: no ticks at all; simulation stalled")
        return 0.0
    horizon = tick_times[0] + warmup_s
    counted = sum(1 for t in tick_times if t > horizon)
    if counted == 0:
        log.warning("fps: no ticks after the %.1fs warm-up; simulation stalled", warmup_s)
        return 0.0
    span = tick_times[-1] - horizon
    if span <= 0:
        return 0.0
    return counted / span


# ---------------------------------------------------------------------------
# sweep configurations

# Busy-work model that stands in for rendering cost, sized so the step wall
# time scales with sensor load the way a real simulator's frame does: heavier
# clouds and bigger images push the step rate down measurably but never stall
# the loop.
CALIBRATED_LOAD = LoadModel(
    base_step_cost_us=5000.0,
    cost_per_lidar_point_us=0.2,
    cost_per_pixel_us=0.005,
)

_BENCH_VEHICLE = VehicleParameters(
    wheelbase=2.4, max_tire_angle=0.61, max_accel=3.0, max_brake_decel=8.0,
    drag_coeff=0.1, length=4.9, width=1.9, steer_rate=2.0,
)

# Long straight so no benchmark run ever terminates early on the goal check
# (the longest supported collection window stays short of the goal time).
_BENCH_ROUTE = RouteSpec(
    centerline=((0.0, 0.0), (30000.0, 0.0)),
    lane_half_width=5.0,
    target_speed=8.33,
    goal_tolerance=5.0,
)

# Lockstep runs as fast as the loop allows, so sim time is a poor budget
# knob: light configs would finish inside the FPS warm-up. duration_s below
# is therefore a wall-clock collection target; _sim_duration_for converts it
# into a sim-time limit through the per-step busy-work cost, which is a hard
# lower bound on step wall time whenever a load model is active.
_FALLBACK_STEP_WALL_S = 0.0005  # loose loopback estimate when the load model is zero


@dataclass(frozen=True)
class BenchConfig:
    label: str
    sensors: str                 # "lidar" | "camera" | "mixed" | "release"
    count: int
    density_or_resolution: str
    lidars: int = 0
    points_per_second: int = 0
    cameras: int = 0
    resolution: tuple = (1280, 720)
    duration_s: float = 8.0     # minimum wall seconds of collection
    seed: int = 20


def bench_kit(
    lidars: int = 0,
    points_per_second: int = 100_000,
    cameras: int = 0,
    resolution: tuple = (1280, 720),
) -> SensorKitConfig:
    """Synthetic kit for benchmarking: the swept sensors plus the vehicle
    status feed the control loop needs. No IMU/GNSS so the latency sample
    population stays dominated by the kind under test."""
    sensors = []
    for i in range(lidars):
        sensors.append(SensorSpec(
            sensor_id=f"lidar_{i}", kind="lidar",
            pose=MountPose(x=0.4 * i - 0.6, z=1.9),
            points_per_second=int(points_per_second),
        ))
    w, h = int(resolution[0]), int(resolution[1])
    for i in range(cameras):
        sensors.append(SensorSpec(
            sensor_id=f"camera_{i}", kind="camera",
            pose=MountPose(x=1.2, y=0.4 * i - 0.4, z=1.5, yaw=0.3 * i),
            width=w, height=h,
        ))
    sensors.append(SensorSpec(sensor_id="vehicle_status", kind="vehicle_status"))
    name = f"bench_{lidars}lidar_{points_per_second}pps_{cameras}cam"
    return SensorKitConfig(name=name, sensors=tuple(sensors))


def release_kit() -> SensorKitConfig:
    """The template kit shipped with the package: two LiDARs at different
    densities, one camera, IMU, GNSS, and the status feed."""
    return SensorKitConfig(name="release_kit", sensors=(
        SensorSpec("lidar_top", "lidar", MountPose(z=1.9), points_per_second=500_000),
        SensorSpec("lidar_front", "lidar", MountPose(x=2.2, z=0.6), points_per_second=100_000),
        SensorSpec("camera_front", "camera", MountPose(x=1.2, z=1.5), width=1280, height=720),
        SensorSpec("imu", "imu", MountPose()),
        SensorSpec("gnss", "gnss", MountPose(z=1.7)),
        SensorSpec("vehicle_status", "vehicle_status", MountPose()),
    ))


def _sim_duration_for(wall_target_s: float, kit: SensorKitConfig,
                      load_model: LoadModel, dt: float) -> float:
    from .simharness import step_cost_us

    per_step = max(step_cost_us(load_model, kit, dt) / 1e6, _FALLBACK_STEP_WALL_S)
    steps = math.ceil(wall_target_s / per_step)
    return steps * dt


def bench_scenario(
    kit: SensorKitConfig,
    wall_target_s: float,
    seed: int = 20,
    load_model: LoadModel = CALIBRATED_LOAD,
) -> ResolvedScenario:
    dt = 0.05
    sc = ScenarioConfig(
        name=kit.name,
        route_file="route.json",
        sensor_kit_file="kit.json",
        vehicle_file="vehicle.json",
        topic_map_file="topics.json",
        initial_pose=InitialPose(),
        seed=seed,
        duration_limit_s=_sim_duration_for(wall_target_s, kit, load_model, dt),
        fixed_dt=dt,
        step_deadline_s=10.0,
        endpoints=Endpoints(sim_port=0, av_port=0),
        load_model=load_model,
    )
    return ResolvedScenario(
        scenario=sc,
        kit=kit,
        vehicle=_BENCH_VEHICLE,
        topic_map=default_topic_map(kit),
        route=_BENCH_ROUTE,
    )


@dataclass
class BenchReport:
    label: str
    sensors: str
    count: int
    density_or_resolution: str
    duration_s: float
    verdict: str = ""
    ticks: int = 0
    wall_s: float = 0.0
    afps: Optional[float] = None
    cpu_mean: Optional[float] = None
    cpu_std: Optional[float] = None
    histograms: dict = field(default_factory=dict)  # kind -> Histogram
    overall: Optional[Histogram] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "sensors": self.sensors,
            "count": self.count,
            "density_or_resolution": self.density_or_resolution,
            "duration_s": self.duration_s,
            "verdict": self.verdict,
            "ticks": self.ticks,
            "wall_s": self.wall_s,
            "afps": self.afps,
            "cpu_mean": self.cpu_mean,
            "cpu_std": self.cpu_std,
            "histograms": {k: h.to_dict() for k, h in self.histograms.items()},
            "overall": self.overall.to_dict() if self.overall else None,
            "error": self.error,
        }


def _parse_resolution(text: str) -> tuple:
    parts = str(text).lower().split("x")
    try:
        w, h = (int(p) for p in parts)
    except ValueError:
        raise ConfigError([f"grid: bad resolution {text!r}, expected WxH"]) from None
    if w <= 0 or h <= 0:
        raise ConfigError([f"grid: resolution {text!r} must be positive"])
    return w, h


def parse_grid(data: dict) -> list[BenchConfig]:
    """Expand a sweep grid file into the configuration list.

    Full cross of lidar_counts x densities, then camera_counts x
    resolutions, then optionally the release kit as its own row."""
    if not isinstance(data, dict):
        raise ConfigError(["grid: top level must be an object"])
    duration = float(data.get("duration_s", 8.0))
    seed = int(data.get("seed", 20))
    if duration <= 0:
        raise ConfigError(["grid: duration_s must be positive"])
    configs: list[BenchConfig] = []
    for count in data.get("lidar_counts", []):
        for pps in data.get("densities", []):
            configs.append(BenchConfig(
                label=f"lidar{count}_pps{pps}",
                sensors="lidar", count=int(count), density_or_resolution=str(pps),
                lidars=int(count), points_per_second=int(pps),
                duration_s=duration, seed=seed,
            ))
    for count in data.get("camera_counts", []):
        for res in data.get("resolutions", []):
            w, h = _parse_resolution(res)
            configs.append(BenchConfig(
                label=f"camera{count}_{w}x{h}",
                sensors="camera", count=int(count), density_or_resolution=f"{w}x{h}",
                cameras=int(count), resolution=(w, h),
                duration_s=duration, seed=seed,
            ))
    if data.get("include_release_kit", False):
        configs.append(BenchConfig(
            label="release_kit", sensors="release", count=6,
            density_or_resolution="release", duration_s=duration, seed=seed,
        ))
    if not configs:
        raise ConfigError(["grid: no configurations (empty grid)"])
    return configs


def config_kit(cfg: BenchConfig) -> SensorKitConfig:
    if cfg.sensors == "release":
        return release_kit()
    return bench_kit(
        lidars=cfg.lidars,
        points_per_second=cfg.points_per_second,
        cameras=cfg.cameras,
        resolution=cfg.resolution,
    )


def run_config(
    cfg: BenchConfig,
    out_dir,
    distributed: bool = True,
    load_model: LoadModel = CALIBRATED_LOAD,
) -> BenchReport:
    from .runner import run_scenario  # deferred: runner sits above this module

    report = BenchReport(
        label=cfg.label, sensors=cfg.sensors, count=cfg.count,
        density_or_resolution=cfg.density_or_resolution, duration_s=cfg.duration_s,
    )
    resolved = bench_scenario(config_kit(cfg), cfg.duration_s, seed=cfg.seed,
                              load_model=load_model)
    run_dir = Path(out_dir) / cfg.label
    summary = run_scenario(resolved, run_dir, distributed=distributed)
    report.verdict = summary.verdict
    bridge = summary.bridge or {}
    records = bridge.get("latency_records", [])
    by_kind: dict[str, list[int]] = {}
    all_ns: list[int] = []
    for _msg_id, _sensor_id, kind, t_in, t_out in records:
        by_kind.setdefault(kind, []).append(t_out - t_in)
        all_ns.append(t_out - t_in)
    report.histograms = {kind: build_histogram(v) for kind, v in sorted(by_kind.items())}
    report.overall = build_histogram(all_ns)
    report.ticks = bridge.get("ticks", 0)
    report.wall_s = summary.wall_s
    report.afps = fps_counter(bridge.get("tick_times", []))
    cpu_samples = summary.cpu.get("bridge", [])
    report.cpu_mean, report.cpu_std = cpu_mean_std(cpu_samples)
    return report


def run_sweep(
    configs: Sequence[BenchConfig],
    out_dir,
    distributed: bool = True,
    load_model: LoadModel = CALIBRATED_LOAD,
) -> list[BenchReport]:
    """Run every configuration, one closed-loop session each. A failing
    configuration is recorded with its error and the sweep moves on."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for i, cfg in enumerate(configs, 1):
        log.info("sweep %d/%d: %s", i, len(configs), cfg.label)
        try:
            reports.append(run_config(cfg, out_dir, distributed=distributed,
                                      load_model=load_model))
        except Exception as e:  # noqa: BLE001 - sweep must survive bad rows
            log.error("sweep config %s failed: %s", cfg.label, e)
            reports.append(BenchReport(
                label=cfg.label, sensors=cfg.sensors, count=cfg.count,
                density_or_resolution=cfg.density_or_resolution,
                duration_s=cfg.duration_s, error=f"{type(e).__name__}: {e}",
            ))
    return reports


# ---------------------------------------------------------------------------
# report emission

CSV_COLUMNS = ("sensors", "count", "density_or_resolution", "mcpu", "dcpu",
               "afps", "lat_mean_ms", "lat_p99_ms")


def _fmt(value: Optional[float], places: int) -> str:
    return "" if value is None else f"{value:.{places}f}"


def _write_histogram_svg(report: BenchReport, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for kind, hist in report.histograms.items():
        if hist.total == 0:
            continue
        edges = np.arange(len(hist.bins)) * hist.bin_width_ms
        ax.step(edges, hist.bins, where="post", label=f"{kind} (n={hist.total})")
    ax.set_xlabel("bridge latency [ms]")
    ax.set_ylabel("messages")
    ax.set_title(report.label)
    upper = max((h.max_ms for h in report.histograms.values() if h.max_ms is not None),
                default=1.0)
    ax.set_xlim(0, max(1.0, min(report.overall.range_ms if report.overall else 50.0,
                                upper * 1.3)))
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(str(path), format="svg")
    plt.close(fig)


def emit_report(reports: Sequence[BenchReport], out_dir) -> list[str]:
    """Write summary.csv, one JSON report per configuration, and one SVG
    latency histogram per configuration that produced data. Returns the
    emitted paths."""
    if not reports:
        raise ValueError("no reports to emit")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emitted = []

    csv_path = out_dir / "summary.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            overall = r.overall
            writer.writerow([
                r.sensors,
                r.count,
                r.density_or_resolution,
                _fmt(r.cpu_mean, 1),
                _fmt(r.cpu_std, 1),
                _fmt(r.afps, 2),
                _fmt(overall.mean_ms if overall else None, 4),
                _fmt(overall.p99_ms if overall else None, 4),
            ])
    emitted.append(str(csv_path))

    for r in reports:
        json_path = out_dir / f"{r.label}.json"
        with open(json_path, "w") as f:
            json.dump(r.to_dict(), f, indent=2)
        emitted.append(str(json_path))
        if r.error is None and any(h.total for h in r.histograms.values()):
            svg_path = out_dir / f"{r.label}.svg"
            _write_histogram_svg(r, svg_path)
            emitted.append(str(svg_path))
    return emitted
