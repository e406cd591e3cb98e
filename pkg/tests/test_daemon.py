"""Stage runtimes: queues, workers, retries, channels, metrics."""

import threading
import time
from pathlib import Path

import pytest

from geonimbus import daemon as daemon_mod
from geonimbus.daemon import (
    Daemon,
    DaemonStoreBinding,
    DuplicateStage,
    LinkBinding,
    OutOfRange,
    StageStopped,
    UnknownStage,
)
from geonimbus.registry import EntryNotFound, register
from geonimbus.storage import DataStore, EventLog, Route, StorageManager
from conftest import stage

# -- registered test stages ---------------------------------------------------

TRACE: list[str] = []
FLAKY_SEEN: set[str] = set()
SLOW_SECONDS = 0.0
GATE = threading.Event()


@register("tests.echo")
def _echo(input_path, output_dir, ctx):
    data = Path(input_path).read_bytes()
    (Path(output_dir) / Path(input_path).name).write_bytes(data)


@register("tests.upper")
def _upper(input_path, output_dir, ctx):
    data = Path(input_path).read_bytes()
    (Path(output_dir) / "upper").write_bytes(data.upper())


@register("tests.trace")
def _trace(input_path, output_dir, ctx):
    if SLOW_SECONDS:
        time.sleep(SLOW_SECONDS)
    TRACE.append(Path(input_path).read_bytes().decode())


@register("tests.boom")
def _boom(input_path, output_dir, ctx):
    raise RuntimeError("stage exploded")


@register("tests.flaky")
def _flaky(input_path, output_dir, ctx):
    key = Path(input_path).name
    if key not in FLAKY_SEEN:
        FLAKY_SEEN.add(key)
        raise RuntimeError("first attempt fails")
    (Path(output_dir) / "ok").write_bytes(b"recovered")


@register("tests.blocked")
def _blocked(input_path, output_dir, ctx):
    GATE.wait(timeout=30)
    (Path(output_dir) / "done").write_bytes(b"x")


@register("tests.use_param")
def _use_param(input_path, output_dir, ctx):
    value = ctx.param("GEONIMBUS_TEST_KNOB", "unset")
    (Path(output_dir) / "param.txt").write_text(value)


@pytest.fixture(autouse=True)
def _reset_shared_state():
    global SLOW_SECONDS
    TRACE.clear()
    FLAKY_SEEN.clear()
    SLOW_SECONDS = 0.0
    GATE.clear()
    yield
    GATE.set()


def make_daemon(tmp_path, name="ep", cores=4, params=None, events=None, sink=None, interval=0.05):
    events = events or EventLog()
    manager = StorageManager(tmp_path / f"{name}-mgr", events=events)
    store = DataStore(f"{name}-local", tmp_path / f"{name}-store", endpoint=name, events=events)
    d = Daemon(
        name,
        cores=cores,
        store=store,
        manager=manager,
        work_root=tmp_path / f"{name}-work",
        params=params,
        metrics_sink=sink,
        reporting_interval=interval,
    )
    manager.register_store(DaemonStoreBinding(d))
    return d


def wait_drained(d, stages=None, timeout=20.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        counters = d.counters()
        rows = [counters[s] for s in (stages or counters)]
        if all(enq == done + failed for enq, done, failed in rows):
            return True
        time.sleep(0.02)
    return False


class TestDeployment:
    def test_deploy_starts_initial_workers(self, tmp_path):
        d = make_daemon(tmp_path)
        runtime = d.deploy_stage(stage("s", entry="tests.echo", workers_initial=2), [])
        assert runtime.state == "ready"
        assert runtime.worker_count() == 2
        d.close()

    def test_duplicate_deploy_rejected(self, tmp_path):
        d = make_daemon(tmp_path)
        d.deploy_stage(stage("s", entry="tests.echo"), [])
        with pytest.raises(DuplicateStage):
            d.deploy_stage(stage("s", entry="tests.echo"), [])
        d.close()

    def test_redeploy_after_stop_allowed(self, tmp_path):
        d = make_daemon(tmp_path)
        d.deploy_stage(stage("s", entry="tests.echo"), [])
        d.undeploy_stage("s")
        runtime = d.deploy_stage(stage("s", entry="tests.echo"), [])
        assert runtime.state == "ready"
        d.close()

    def test_unknown_entry_rejected(self, tmp_path):
        d = make_daemon(tmp_path)
        with pytest.raises(EntryNotFound):
            d.deploy_stage(stage("s", entry="tests.does_not_exist"), [])
        d.close()

    def test_unknown_stage_operations(self, tmp_path):
        d = make_daemon(tmp_path)
        with pytest.raises(UnknownStage):
            d.resize_workers("ghost", 2)
        with pytest.raises(UnknownStage):
            d.ingest("ghost", "x", b"data")
        d.close()

    def test_stopped_stage_refuses_work(self, tmp_path):
        d = make_daemon(tmp_path)
        d.deploy_stage(stage("s", entry="tests.echo"), [])
        d.undeploy_stage("s")
        with pytest.raises(StageStopped):
            d.ingest("s", "x", b"data")
        d.close()


class TestExecution:
    def test_fifo_order_with_single_worker(self, tmp_path):
        d = make_daemon(tmp_path)
        d.deploy_stage(stage("s", entry="tests.trace", workers_initial=1, workers_max=1), [])
        names = [f"item-{i:03d}" for i in range(25)]
        for n in names:
            d.ingest("s", n, n.encode())
        assert wait_drained(d)
        assert TRACE == names
        d.close()

    def test_work_conservation(self, tmp_path):
        d = make_daemon(tmp_path)
        d.deploy_stage(stage("s", entry="tests.trace", workers_initial=3), [])
        for i in range(40):
            d.ingest("s", f"i{i}", f"payload {i}".encode())
        assert wait_drained(d)
        enq, done, failed = d.counters()["s"]
        assert (enq, done, failed) == (40, 40, 0)
        assert sorted(TRACE) == sorted(f"payload {i}" for i in range(40))
        assert len(TRACE) == 40  # nothing ran twice
        d.close()

    def test_failure_is_retried_once_then_dead_lettered(self, tmp_path):
        d = make_daemon(tmp_path)
        runtime = d.deploy_stage(stage("s", entry="tests.boom"), [])
        d.ingest("s", "doomed", b"payload")
        assert wait_drained(d)
        assert d.counters()["s"] == (1, 0, 1)
        failures = list(runtime.failed_dir.iterdir())
        error_files = [p for p in failures if p.name.endswith(".error.txt")]
        assert len(error_files) == 1
        assert "stage exploded" in error_files[0].read_text()
        payload_copy = next(p for p in failures if not p.name.endswith(".error.txt"))
        assert payload_copy.read_bytes() == b"payload"
        d.close()

    def test_flaky_stage_recovers_on_retry(self, tmp_path):
        d = make_daemon(tmp_path)
        d.deploy_stage(stage("s", entry="tests.flaky"), [])
        d.ingest("s", "wobbly", b"payload")
        assert wait_drained(d)
        assert d.counters()["s"] == (1, 1, 0)
        d.close()

    def test_outputs_are_pushed_and_published(self, tmp_path):
        d = make_daemon(tmp_path)
        d.deploy_stage(stage("s", entry="tests.upper"), [], system="sys")
        d.ingest("s", "x", b"through the store")
        assert wait_drained(d)
        produced = [e for e in d.manager.entries(system="sys")
                    if e.item.producer_stage == "s"]
        assert len(produced) == 1
        assert d.store.pull(produced[0].item.id) == b"THROUGH THE STORE"
        d.close()

    def test_params_reach_function_stages(self, tmp_path):
        d = make_daemon(tmp_path, params={"GEONIMBUS_TEST_KNOB": "eleven"})
        d.deploy_stage(stage("s", entry="tests.use_param"), [], system="sys")
        d.ingest("s", "x", b"-")
        assert wait_drained(d)
        entries = [e for e in d.manager.entries(system="sys") if e.item.producer_stage == "s"]
        assert d.store.pull(entries[0].item.id) == b"eleven"
        d.close()

    def test_subprocess_stage(self, tmp_path):
        script = tmp_path / "shout.py"
        script.write_text(
            "import os, pathlib, sys\n"
            "data = pathlib.Path(sys.argv[1]).read_bytes()\n"
            "out = pathlib.Path(os.environ['GEONIMBUS_OUTPUT_DIR'])\n"
            "(out / 'shout').write_bytes(data.upper())\n"
        )
        d = make_daemon(tmp_path)
        d.deploy_stage(
            stage("s", entry=f"python3 {script}", kind="subprocess"), [], system="sys"
        )
        d.ingest("s", "x", b"quiet words")
        assert wait_drained(d)
        assert d.counters()["s"] == (1, 1, 0)
        entries = [e for e in d.manager.entries(system="sys") if e.item.producer_stage == "s"]
        assert d.store.pull(entries[0].item.id) == b"QUIET WORDS"
        d.close()

    def test_subprocess_failure_dead_letters(self, tmp_path):
        d = make_daemon(tmp_path)
        d.deploy_stage(stage("s", entry="python3 -c 'raise SystemExit(3)'",
                             kind="subprocess"), [])
        d.ingest("s", "x", b"-")
        assert wait_drained(d)
        assert d.counters()["s"] == (1, 0, 1)
        d.close()


class TestResize:
    def test_grow_and_shrink(self, tmp_path):
        d = make_daemon(tmp_path, cores=4)
        runtime = d.deploy_stage(stage("s", entry="tests.echo"), [])
        assert d.resize_workers("s", 4) == 4
        assert runtime.worker_count() == 4
        d.resize_workers("s", 1)
        deadline = time.time() + 5
        while runtime.worker_count() > 1 and time.time() < deadline:
            time.sleep(0.02)
        assert runtime.worker_count() == 1
        d.close()

    @pytest.mark.parametrize("count", [0, -1, 5])
    def test_out_of_range(self, tmp_path, count):
        d = make_daemon(tmp_path, cores=4)
        d.deploy_stage(stage("s", entry="tests.echo"), [])  # auto max = 4 cores
        with pytest.raises(OutOfRange):
            d.resize_workers("s", count)
        d.close()

    def test_explicit_max_beats_cores(self, tmp_path):
        d = make_daemon(tmp_path, cores=2)
        d.deploy_stage(stage("s", entry="tests.echo", workers_max=6), [])
        assert d.resize_workers("s", 6) == 6
        d.close()

    def test_shrink_does_not_abort_in_flight_work(self, tmp_path):
        global SLOW_SECONDS
        SLOW_SECONDS = 0.3
        d = make_daemon(tmp_path, cores=4)
        d.deploy_stage(stage("s", entry="tests.trace", workers_initial=3), [])
        for i in range(9):
            d.ingest("s", f"i{i}", f"{i}".encode())
        time.sleep(0.1)  # workers are mid-task now
        d.resize_workers("s", 1)
        assert wait_drained(d, timeout=30)
        assert d.counters()["s"] == (9, 9, 0)
        assert len(TRACE) == 9
        d.close()


class TestChannels:
    def _two_stage(self, d, channel):
        binding = LinkBinding(to_stage="consumer", channel=channel, to_endpoint="ep")
        d.deploy_stage(stage("producer", entry="tests.echo"), [binding], system="sys")
        d.deploy_stage(stage("consumer", entry="tests.trace"), [], system="sys")

    def test_file_channel_hands_payload_on_disk(self, tmp_path):
        d = make_daemon(tmp_path)
        self._two_stage(d, "file")
        d.ingest("producer", "msg", b"via file")
        assert wait_drained(d)
        assert TRACE == ["via file"]
        consumer_inputs = list(d.runtime("consumer").input_dir.iterdir())
        assert len(consumer_inputs) == 1
        assert consumer_inputs[0].name.endswith("_msg")
        d.close()

    def test_memory_channel_forwards_in_ram(self, tmp_path):
        d = make_daemon(tmp_path)
        self._two_stage(d, "memory")
        for i in range(5):
            d.ingest("producer", f"m{i}", f"msg {i}".encode())
        assert wait_drained(d)
        assert sorted(TRACE) == [f"msg {i}" for i in range(5)]
        d.close()

    def test_memory_channel_applies_backpressure(self, tmp_path, monkeypatch):
        monkeypatch.setattr(daemon_mod, "MEMORY_CHANNEL_CAPACITY", 2)
        d = make_daemon(tmp_path)
        binding = LinkBinding(to_stage="consumer", channel="memory", to_endpoint="ep")
        d.deploy_stage(stage("producer", entry="tests.echo"), [binding], system="sys")
        d.deploy_stage(stage("consumer", entry="tests.blocked", workers_max=1), [], system="sys")
        for i in range(6):
            d.ingest("producer", f"m{i}", f"{i}".encode())
        time.sleep(0.5)
        # consumer blocked: 1 task in a worker freed its slot, 2 more fill the
        # channel; the producer cannot finish (and so complete) more than 3
        done_while_blocked = d.counters()["producer"][1]
        assert done_while_blocked <= 3
        GATE.set()
        assert wait_drained(d, timeout=30)
        assert d.counters()["consumer"] == (6, 6, 0)
        d.close()

    def test_network_channel_through_manager_route(self, tmp_path):
        events = EventLog()
        d = make_daemon(tmp_path, events=events)
        binding = LinkBinding(to_stage="consumer", channel="network", to_endpoint="ep2")
        d.deploy_stage(stage("producer", entry="tests.upper"), [binding], system="sys")
        d2 = Daemon(
            "ep2",
            cores=2,
            store=DataStore("ep2-local", tmp_path / "ep2-store", endpoint="ep2", events=events),
            manager=d.manager,
            work_root=tmp_path / "ep2-work",
            reporting_interval=0.05,
        )
        d.manager.register_store(DaemonStoreBinding(d2))
        d2.deploy_stage(stage("consumer", entry="tests.trace", endpoint="ep2"), [], system="sys")
        d.manager.add_route(Route("sys", "producer", "consumer", "ep2-local"))
        d.ingest("producer", "msg", b"across endpoints")
        deadline = time.time() + 20
        while not TRACE and time.time() < deadline:
            time.sleep(0.02)
        assert TRACE == ["ACROSS ENDPOINTS"]
        assert d2.store.items(), "payload must land in the consumer's store"
        d.close()
        d2.close()


class TestMetrics:
    def test_windows_report_completed_work(self, tmp_path):
        reports = []
        d = make_daemon(tmp_path, sink=reports.append)
        d.deploy_stage(stage("s", entry="tests.echo"), [])
        payload = b"z" * 1000
        for i in range(4):
            d.ingest("s", f"i{i}", payload)
        assert wait_drained(d)
        d.report_metrics()
        time.sleep(0.2)
        mine = [r for r in reports if r.stage == "s"]
        assert sum(r.tasks_done for r in mine) == 4
        assert sum(r.bytes_processed for r in mine) == 4000
        d.close()

    def test_windows_reset_between_snapshots(self, tmp_path):
        # long interval keeps the background reporter out of the way
        d = make_daemon(tmp_path, interval=60.0)
        runtime = d.deploy_stage(stage("s", entry="tests.echo"), [])
        d.ingest("s", "x", b"pay")
        assert wait_drained(d)
        first = runtime.snapshot_window(time.time())
        second = runtime.snapshot_window(time.time())
        assert first.tasks_done == 1
        assert second.tasks_done == 0
        assert second.window_start == first.window_end
        d.close()

    def test_broken_sink_is_tolerated(self, tmp_path):
        def sink(report):
            raise IOError("sink offline")

        d = make_daemon(tmp_path, sink=sink)
        d.deploy_stage(stage("s", entry="tests.echo"), [])
        d.ingest("s", "x", b"pay")
        assert wait_drained(d)
        assert d.report_metrics()  # must not raise
        d.close()
