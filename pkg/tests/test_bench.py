"""Latency bookkeeping, histograms, CPU sampling, FPS, and sweep plumbing.

The CPU tests spin real subprocesses and compare the sampler against the
obvious ground truth (a spin loop occupies one core).
"""

import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from simbridge.bench import (
    CALIBRATED_LOAD,
    CSV_COLUMNS,
    BenchConfig,
    BenchReport,
    CpuSample,
    CpuSampler,
    DuplicateMessageId,
    Histogram,
    LatencyTap,
    _sim_duration_for,
    bench_kit,
    bench_scenario,
    build_histogram,
    config_kit,
    cpu_mean_std,
    emit_report,
    fps_counter,
    parse_grid,
    release_kit,
)
from simbridge.config import ConfigError, builtin_path, topic_map_issues


class TestLatencyTap:
    def test_pairing(self):
        tap = LatencyTap()
        tap.record_ingress(1, "lidar_0", "lidar", 1000)
        rec = tap.record_egress(1, 3500)
        assert rec.latency_ns == 2500
        assert (rec.sensor_id, rec.kind) == ("lidar_0", "lidar")
        assert tap.unpaired_ingress == 0

    def test_duplicate_ingress_rejected(self):
        tap = LatencyTap()
        tap.record_ingress(1, "a", "imu", 0)
        with pytest.raises(DuplicateMessageId):
            tap.record_ingress(1, "a", "imu", 10)

    def test_orphan_egress_counted_not_raised(self):
        tap = LatencyTap()
        assert tap.record_egress(99, 10) is None
        assert tap.orphan_egress == 1

    def test_egress_before_ingress_time_rejected(self):
        tap = LatencyTap()
        tap.record_ingress(1, "a", "imu", 1000)
        with pytest.raises(ValueError):
            tap.record_egress(1, 999)

    def test_unpaired_ingress_counts_drops(self):
        tap = LatencyTap()
        tap.record_ingress(1, "a", "imu", 0)
        tap.record_ingress(2, "b", "imu", 0)
        tap.record_egress(1, 5)
        assert tap.unpaired_ingress == 1


class TestHistogram:
    def test_synthetic_population_statistics(self):
        rng = np.random.default_rng(3)
        ms = rng.uniform(0.0, 20.0, 10_000)
        h = build_histogram((ms * 1e6).astype(np.int64))
        assert h.total == 10_000
        assert sum(h.bins) == h.total
        assert h.mean_ms == pytest.approx(float(np.mean(ms)), abs=1e-3)
        assert h.median_ms == pytest.approx(float(np.median(ms)), abs=1e-3)
        assert h.p99_ms == pytest.approx(float(np.percentile(ms, 99)), abs=1e-3)
        assert h.mean_ms == pytest.approx(10.0, abs=h.bin_width_ms)

    def test_bin_edges_half_open(self):
        # 0.4 ms lands in bin 0, exactly 0.5 ms in bin 1
        h = build_histogram([400_000, 500_000], bin_width_ms=0.5, range_ms=50.0)
        assert h.bins[0] == 1 and h.bins[1] == 1

    def test_overflow_bucket_preserves_total(self):
        h = build_histogram([1_000_000, 60_000_000, 90_000_000], range_ms=50.0)
        assert h.bins[-1] == 2
        assert sum(h.bins) == h.total == 3
        assert h.max_ms == pytest.approx(90.0)

    def test_bin_count(self):
        h = build_histogram([1_000], bin_width_ms=0.5, range_ms=50.0)
        assert len(h.bins) == 101  # 100 regular + overflow

    def test_empty_population(self):
        h = build_histogram([])
        assert h.total == 0 and sum(h.bins) == 0
        assert h.mean_ms is None and h.median_ms is None and h.p99_ms is None

    def test_negative_latency_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            build_histogram([-1])

    def test_bad_parameters_rejected(self):
        with pytest.raises(ValueError):
            build_histogram([1], bin_width_ms=0.0)
        with pytest.raises(ValueError):
            build_histogram([1], range_ms=-5.0)

    def test_to_dict_roundtrips_through_json(self):
        h = build_histogram([2_000_000] * 5)
        again = json.loads(json.dumps(h.to_dict()))
        assert again["total"] == 5
        assert again["median_ms"] == pytest.approx(2.0)


class TestFps:
    def test_uniform_stream_exact(self):
        ticks = [i / 30.0 for i in range(600)]  # 20 s at 30 Hz
        assert fps_counter(ticks) == pytest.approx(30.0)

    def test_warmup_excluded(self):
        # burst during warm-up must not inflate the rate: 4 ticks over the
        # 2 s span from the warm-up horizon to the last tick
        ticks = [i * 0.001 for i in range(1000)] + [2.5, 3.0, 3.5, 4.0]
        assert fps_counter(ticks) == pytest.approx(2.0)

    def test_no_ticks(self):
        assert fps_counter([]) == 0.0

    def test_all_ticks_inside_warmup(self):
        assert fps_counter([0.0, 0.5, 1.0]) == 0.0


class TestCpuSampling:
    SPIN = "import time; t=time.perf_counter()\nwhile time.perf_counter()-t < 30: pass"

    def spin_process(self):
        return subprocess.Popen([sys.executable, "-c", self.SPIN])

    def test_spin_loop_reads_one_core(self):
        proc = self.spin_process()
        try:
            sampler = CpuSampler({"spin": proc.pid}, interval_s=0.1).start()
            time.sleep(1.2)
            samples = sampler.stop()["spin"]
        finally:
            proc.kill()
            proc.wait()
        mean, std = cpu_mean_std(samples)
        assert mean == pytest.approx(100.0, abs=15.0)
        assert std is not None

    @pytest.mark.skipif(os.cpu_count() < 2, reason="needs two cores to show 200%")
    def test_two_spin_loops_read_two_cores(self):
        procs = [self.spin_process(), self.spin_process()]
        try:
            sampler = CpuSampler({f"p{i}": p.pid for i, p in enumerate(procs)}, interval_s=0.1).start()
            time.sleep(1.2)
            samples = sampler.stop()
        finally:
            for p in procs:
                p.kill()
                p.wait()
        total = sum(cpu_mean_std(samples[k])[0] for k in samples)
        assert total == pytest.approx(200.0, abs=30.0)

    def test_vanished_process_yields_none_samples(self):
        proc = subprocess.Popen([sys.executable, "-c", "pass"])
        proc.wait()
        sampler = CpuSampler({"gone": proc.pid}, interval_s=0.1).start()
        time.sleep(0.35)
        samples = sampler.stop()["gone"]
        mean, std = cpu_mean_std(samples)
        assert mean is None and std is None

    def test_mean_std_small_samples(self):
        only = [CpuSample(0.0, 50.0)]
        assert cpu_mean_std(only) == (50.0, 0.0)
        mixed = [CpuSample(0.0, None), CpuSample(0.2, 40.0), CpuSample(0.4, 60.0)]
        mean, std = cpu_mean_std(mixed)
        assert mean == pytest.approx(50.0)
        assert std == pytest.approx(np.std([40.0, 60.0], ddof=1))


class TestKits:
    def test_bench_kit_composition(self):
        kit = bench_kit(lidars=2, points_per_second=100_000, cameras=1)
        kinds = [s.kind for s in kit.sensors]
        assert kinds == ["lidar", "lidar", "camera", "vehicle_status"]
        assert kit.ids()[:2] == ("lidar_0", "lidar_1")

    def test_release_kit_is_valid(self):
        kit = release_kit()
        assert len(kit.sensors) == 6
        from simbridge.config import default_topic_map

        assert topic_map_issues(default_topic_map(kit), kit) == []

    def test_bench_scenario_resolves(self):
        res = bench_scenario(bench_kit(lidars=1), wall_target_s=5.0)
        assert res.scenario.endpoints.sim_port == 0  # auto-assign
        assert topic_map_issues(res.topic_map, res.kit) == []
        assert res.route.centerline[-1][0] >= 10_000  # long enough to never finish


class TestSimDuration:
    def test_loaded_kit_walltime_floor(self):
        kit = bench_kit(lidars=1, points_per_second=100_000)
        dt = 0.05
        sim_s = _sim_duration_for(30.0, kit, CALIBRATED_LOAD, dt)
        # base 5000us + 5000pts*0.2us = 6ms/step -> 5000 steps -> 250 sim s
        per_step = 0.006
        steps = math.ceil(30.0 / per_step)
        assert sim_s == pytest.approx(steps * dt)

    def test_zero_load_uses_fallback_estimate(self):
        from simbridge.config import LoadModel

        kit = bench_kit(lidars=1, points_per_second=1000)
        sim_s = _sim_duration_for(1.0, kit, LoadModel(), 0.05)
        assert sim_s == pytest.approx(math.ceil(1.0 / 0.0005) * 0.05)


class TestGrid:
    def test_builtin_grid_expands_to_23_rows(self):
        data = json.loads(builtin_path("full_grid.json").read_text())
        configs = parse_grid(data)
        assert len(configs) == 4 * 4 + 3 * 2 + 1
        labels = [c.label for c in configs]
        assert "lidar1_pps100000" in labels
        assert "camera2_1920x1080" in labels
        assert labels[-1] == "release_kit"
        assert all(c.duration_s == 8.0 and c.seed == 20 for c in configs)

    def test_empty_grid_rejected(self):
        with pytest.raises(ConfigError, match="empty grid"):
            parse_grid({})

    def test_bad_duration_rejected(self):
        with pytest.raises(ConfigError, match="duration_s"):
            parse_grid({"lidar_counts": [1], "densities": [1000], "duration_s": 0})

    def test_bad_resolution_string(self):
        with pytest.raises(ConfigError):
            parse_grid({"camera_counts": [1], "resolutions": ["wide"]})

    def test_config_kit_dispatch(self):
        release_cfg = BenchConfig("r", "release", 6, "release")
        assert config_kit(release_cfg).name == "release_kit"
        lidar_cfg = BenchConfig("l", "lidar", 2, "1000", lidars=2, points_per_second=1000)
        kit = config_kit(lidar_cfg)
        assert sum(1 for s in kit.sensors if s.kind == "lidar") == 2


class TestEmitReport:
    def make_report(self, label="cfg_a"):
        h = build_histogram([1_000_000, 2_000_000, 3_000_000])
        return BenchReport(
            label=label, sensors="lidar", count=1, density_or_resolution="1000",
            duration_s=8.0, verdict="ok", ticks=100, wall_s=8.2, afps=12.2,
            cpu_mean=85.0, cpu_std=4.0, histograms={"lidar": h}, overall=h,
        )

    def test_emits_csv_json_svg(self, tmp_path):
        paths = emit_report([self.make_report()], tmp_path)
        names = sorted(os.path.basename(p) for p in paths)
        assert names == ["cfg_a.json", "cfg_a.svg", "summary.csv"]
        lines = (tmp_path / "summary.csv").read_text().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        row = lines[1].split(",")
        assert row[0] == "lidar" and row[1] == "1"
        assert float(row[6]) == pytest.approx(2.0)  # overall mean ms

    def test_failed_config_row_has_blank_metrics(self, tmp_path):
        failed = BenchReport(
            label="bad", sensors="lidar", count=1, density_or_resolution="1000",
            duration_s=8.0, verdict="error", error="boom",
        )
        emit_report([failed], tmp_path)
        row = (tmp_path / "summary.csv").read_text().splitlines()[1].split(",")
        assert row[3] == "" and row[6] == ""
        report = json.loads((tmp_path / "bad.json").read_text())
        assert report["error"] == "boom"

    def test_empty_report_list_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no reports"):
            emit_report([], tmp_path)
