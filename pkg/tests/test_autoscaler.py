"""Scaling decisions against scripted metrics traces; no live system."""

import json

import pytest
from hypothesis import given, settings, strategies as st

from geonimbus.autoscaler import (
    ACTION_ADD,
    ACTION_NOOP,
    ACTION_REMOVE,
    BottleneckReport,
    NoActiveStages,
    ReplicationManager,
    ScalePolicy,
    StageMetrics,
    StageState,
    ThroughputEntry,
    ThroughputTable,
    compute_throughput,
    find_bottleneck,
)


def window(stage, start, end, bytes_processed, tasks_done=1, wait=0.0, workers=1, queue=0):
    return StageMetrics(
        stage=stage,
        window_start=start,
        window_end=end,
        tasks_done=tasks_done,
        bytes_processed=bytes_processed,
        mean_service_time=0.1,
        mean_wait_time=wait,
        workers=workers,
        queue_depth=queue,
    )


def entry(stage, throughput, wait=0.0, workers=1, queue=0, active=True):
    return ThroughputEntry(stage=stage, throughput=throughput, mean_wait_time=wait,
                           workers=workers, queue_depth=queue, active=active)


def table(*entries):
    return ThroughputTable({e.stage: e for e in entries})


class TestThroughput:
    def test_raw_rate_is_bytes_over_window_length(self):
        t = compute_throughput({"s": [window("s", 0.0, 2.0, 10)]})
        assert t.entries["s"].throughput == pytest.approx(5.0)

    def test_ewma_seeded_with_first_window(self):
        # raw rates 2, 4, 3 -> smoothed 2, 3, 3
        windows = [
            window("s", 0, 1, 2),
            window("s", 1, 2, 4),
            window("s", 2, 3, 3),
        ]
        t = compute_throughput({"s": windows})
        assert t.entries["s"].throughput == pytest.approx(3.0)

    def test_idle_stage_is_inactive(self):
        t = compute_throughput({"s": [window("s", 0, 1, 0, tasks_done=0, queue=0)]})
        assert not t.entries["s"].active

    def test_starved_stage_with_queue_is_active(self):
        t = compute_throughput({"s": [window("s", 0, 1, 0, tasks_done=0, queue=4)]})
        assert t.entries["s"].active

    def test_zero_length_window_contributes_zero_rate(self):
        t = compute_throughput({"s": [window("s", 5.0, 5.0, 1000)]})
        assert t.entries["s"].throughput == 0.0


class TestBottleneck:
    def test_argmin_on_pinned_table(self):
        # throughputs {5, 2, 8} -> the second stage
        report = find_bottleneck(table(entry("s0", 5.0), entry("s1", 2.0), entry("s2", 8.0)))
        assert report.stage == "s1"
        assert report.throughput == pytest.approx(2.0)

    def test_tie_breaks_toward_larger_wait(self):
        report = find_bottleneck(table(entry("a", 2.0, wait=0.1), entry("b", 2.0, wait=0.9)))
        assert report.stage == "b"

    def test_full_tie_breaks_toward_smaller_name(self):
        report = find_bottleneck(table(entry("zeta", 2.0), entry("beta", 2.0)))
        assert report.stage == "beta"

    def test_inactive_stages_are_ignored(self):
        report = find_bottleneck(table(entry("idle", 0.0, active=False), entry("busy", 9.0)))
        assert report.stage == "busy"

    def test_no_active_stages_raises(self):
        with pytest.raises(NoActiveStages):
            find_bottleneck(table(entry("a", 1.0, active=False)))

    @given(
        throughputs=st.lists(st.floats(min_value=0.001, max_value=1e9), min_size=1, max_size=8),
        factor=st.floats(min_value=0.01, max_value=1000.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_argmin_invariant_under_positive_scaling(self, throughputs, factor):
        base = table(*(entry(f"s{i:02d}", v) for i, v in enumerate(throughputs)))
        scaled = table(*(entry(f"s{i:02d}", v * factor) for i, v in enumerate(throughputs)))
        assert find_bottleneck(base).stage == find_bottleneck(scaled).stage


class TestPolicy:
    def report(self, stage="s", throughput=3.0):
        t = table(entry(stage, throughput))
        return BottleneckReport(stage=stage, throughput=throughput, table=t)

    def test_add_below_cap(self):
        policy = ScalePolicy()
        cmd = policy.decide(self.report(), {"s": StageState(1, 4, 1)}, interval_no=1)
        assert cmd.action == ACTION_ADD
        assert cmd.target_workers == 2

    def test_noop_at_cap(self):
        policy = ScalePolicy()
        cmd = policy.decide(self.report(), {"s": StageState(4, 4, 1)}, interval_no=1)
        assert cmd.action == ACTION_NOOP
        assert cmd.target_workers == 4

    def test_cooldown_gates_adds(self):
        policy = ScalePolicy()
        states = {"s": StageState(1, 8, 1)}
        assert policy.decide(self.report(), states, 1).action == ACTION_ADD
        states = {"s": StageState(2, 8, 1)}
        assert policy.decide(self.report(), states, 2).action == ACTION_NOOP
        assert policy.decide(self.report(), states, 3).action == ACTION_NOOP
        assert policy.decide(self.report(), states, 4).action == ACTION_ADD

    def test_rollback_on_degradation(self):
        # scripted: add at smoothed 3.0, next interval smoothed 2.4 (-20%)
        policy = ScalePolicy()
        first = policy.decide(self.report(throughput=3.0), {"s": StageState(1, 4, 1)}, 1)
        assert first.action == ACTION_ADD
        second = policy.decide(self.report(throughput=2.4), {"s": StageState(2, 4, 1)}, 2)
        assert second.action == ACTION_REMOVE
        assert second.target_workers == 1

    def test_small_dip_is_tolerated(self):
        # -5% is inside the 10% band
        policy = ScalePolicy()
        policy.decide(self.report(throughput=3.0), {"s": StageState(1, 4, 1)}, 1)
        cmd = policy.decide(self.report(throughput=2.85), {"s": StageState(2, 4, 1)}, 2)
        assert cmd.action == ACTION_NOOP  # cooldown; no rollback

    def test_rollback_window_expires(self):
        policy = ScalePolicy(observe_windows=3, cooldown_intervals=10)
        policy.decide(self.report(throughput=3.0), {"s": StageState(1, 4, 1)}, 1)
        states = {"s": StageState(2, 4, 1)}
        for interval in (2, 3, 4):
            assert policy.decide(self.report(throughput=3.1), states, interval).action == ACTION_NOOP
        # late drop after the watch window: the add was accepted, no rollback
        late = policy.decide(self.report(throughput=1.0), states, 5)
        assert late.action != ACTION_REMOVE

    def test_rollback_never_goes_below_initial(self):
        policy = ScalePolicy()
        policy.decide(self.report(throughput=3.0), {"s": StageState(2, 4, 2)}, 1)
        cmd = policy.decide(self.report(throughput=1.0), {"s": StageState(3, 4, 2)}, 2)
        assert cmd.action == ACTION_REMOVE
        assert cmd.target_workers >= 2

    @given(data=st.data())
    @settings(max_examples=60, deadline=None)
    def test_cap_safety_over_random_traces(self, data):
        workers_max = data.draw(st.integers(min_value=1, max_value=4), label="max")
        policy = ScalePolicy()
        workers = 1
        for interval in range(1, 12):
            throughput = data.draw(st.floats(min_value=0.0, max_value=100.0), label="thp")
            state = {"s": StageState(workers, workers_max, 1)}
            cmd = policy.decide(self.report(throughput=throughput), state, interval)
            if cmd.action != ACTION_NOOP:
                assert 1 <= cmd.target_workers <= workers_max
                workers = cmd.target_workers


class TestReplicationManager:
    def _manager(self, tmp_path, workers_max=4):
        calls = []
        state = {"workers": 1}

        def resize(stage, count):
            calls.append((stage, count))
            state["workers"] = count

        def states():
            return {"s": StageState(state["workers"], workers_max, 1)}

        manager = ReplicationManager(
            resize, states, interval=0.05, log_path=str(tmp_path / "audit.log")
        )
        return manager, calls, state

    def test_step_with_no_data_is_idle(self, tmp_path):
        manager, calls, _ = self._manager(tmp_path)
        assert manager.step() is None
        assert calls == []

    def test_one_command_per_interval(self, tmp_path):
        manager, calls, _ = self._manager(tmp_path)
        manager.feed(window("s", 0, 1, 100, queue=5))
        before = len(manager.commands)
        manager.step()
        assert len(manager.commands) == before + 1

    def test_add_dispatches_resize(self, tmp_path):
        manager, calls, _ = self._manager(tmp_path)
        manager.feed(window("s", 0, 1, 100, queue=5))
        cmd = manager.step()
        assert cmd.action == ACTION_ADD
        assert calls == [("s", 2)]

    def test_scripted_rollback_sequence(self, tmp_path):
        manager, calls, _ = self._manager(tmp_path)
        # 10 s windows: 30 bytes -> 3.0 B/s, then 18 bytes -> smoothed 2.4
        manager.feed(window("s", 0, 10, 30, queue=3))
        assert manager.step().action == ACTION_ADD
        manager.feed(window("s", 10, 20, 18, queue=3, workers=2))
        cmd = manager.step()
        assert cmd.action == ACTION_REMOVE
        assert cmd.target_workers == 1
        assert calls == [("s", 2), ("s", 1)]

    def test_dispatch_failure_is_recorded_not_raised(self, tmp_path):
        def broken(stage, count):
            raise OSError("endpoint offline")

        manager = ReplicationManager(
            broken, lambda: {"s": StageState(1, 4, 1)},
            interval=0.05, log_path=str(tmp_path / "audit.log"),
        )
        manager.feed(window("s", 0, 1, 100, queue=5))
        cmd = manager.step()
        assert cmd.action == ACTION_ADD
        lines = [json.loads(l) for l in (tmp_path / "audit.log").read_text().splitlines()]
        assert lines[-1]["dispatch_error"].startswith("OSError")

    def test_audit_log_is_json_lines(self, tmp_path):
        manager, _, _ = self._manager(tmp_path)
        manager.feed(window("s", 0, 1, 100, queue=5))
        manager.step()
        manager.step()
        lines = (tmp_path / "audit.log").read_text().splitlines()
        assert len(lines) == 2
        for line in lines:
            doc = json.loads(line)
            assert "interval" in doc and "table" in doc

    def test_control_loop_runs_and_stops(self, tmp_path):
        import time

        manager, calls, _ = self._manager(tmp_path)
        manager.feed(window("s", 0, 1, 100, queue=5))
        manager.start()
        deadline = time.time() + 5.0
        while not calls and time.time() < deadline:
            time.sleep(0.02)
        manager.stop()
        assert calls, "loop never dispatched"
