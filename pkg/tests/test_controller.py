"""Deployment orchestration: liveness checks, ordering, rollback, results."""

import datetime
import json
import time
from pathlib import Path

import pytest

from geonimbus.controller import (
    Controller,
    EndpointUnreachable,
    PartialDeployment,
    SystemNotRunning,
    plan_digest,
)
from geonimbus.eos.raster import GeoBox, SceneMeta
from geonimbus.eos.summary import WaterSummary
from geonimbus.model import plan as make_plan
from geonimbus.registry import register
from geonimbus.runner import build_local_system
from conftest import endpoint, link, stage, system

# -- stage functions for live-system tests ------------------------------------


@register("ctl.pass")
def _pass(input_path, output_dir, ctx):
    (Path(output_dir) / Path(input_path).name).write_bytes(Path(input_path).read_bytes())


@register("ctl.summarize")
def _summarize(input_path, output_dir, ctx):
    # input payload is a year; emit one summary record for it
    year = int(Path(input_path).read_bytes().decode())
    summary = WaterSummary(
        scene=SceneMeta(
            scene_id=f"S{year}",
            acquisition_date=datetime.date(year, 6, 1),
            path=28,
            row=46,
            bbox=GeoBox(0.0, 0.0, 1.0, 1.0),
        ),
        index_name="ndwi",
        threshold=0.65,
        water_pixels=year - 2000,
        total_pixels=100,
        water_percent=float(year - 2000),
    )
    (Path(output_dir) / "summary.jsonl").write_text(summary.to_line() + "\n")


@register("ctl.sleepy")
def _sleepy(input_path, output_dir, ctx):
    time.sleep(1.5)
    (Path(output_dir) / "late").write_bytes(b"done")


# -- fakes for pure orchestration tests ----------------------------------------


class FakePort:
    def __init__(self, name, journal, fail_deploy=(), fail_ping=False):
        self.name = name
        self.journal = journal
        self.fail_deploy = set(fail_deploy)
        self.fail_ping = fail_ping

    def ping(self):
        if self.fail_ping:
            raise OSError("connection refused")
        return {"daemon": self.name}

    def store_id(self):
        return f"{self.name}-local"

    def deploy_stage(self, spec, bindings, *, system=""):
        if spec.name in self.fail_deploy:
            raise RuntimeError("deploy refused")
        self.journal.append(("deploy", self.name, spec.name, tuple(b.to_stage for b in bindings)))

    def undeploy_stage(self, stage_name, *, force=False):
        self.journal.append(("undeploy", self.name, stage_name, force))

    def resize_workers(self, stage_name, count):
        return count

    def ingest(self, stage_name, name, data):
        self.journal.append(("ingest", self.name, stage_name, name))
        return "item-id"

    def status(self):
        return {"daemon": self.name, "stages": {}}

    def counters(self):
        return {}


class FakeManager:
    def __init__(self):
        self.routes = []

    def add_route(self, route):
        self.routes.append(route)

    def pending_transfers(self):
        return 0

    def entries(self, *, system=None, producer_stage=None):
        return []


def chain_plan(channel="file"):
    spec = system(
        "sys",
        stages=[stage("a", entry="ctl.pass"), stage("b", entry="ctl.pass"),
                stage("c", entry="ctl.summarize")],
        endpoints=[endpoint("ep")],
        links=[link("a", "b", channel), link("b", "c", channel)],
    )
    return make_plan(spec)


def two_endpoint_plan():
    spec = system(
        "sys",
        stages=[stage("a", entry="ctl.pass", endpoint="ep1"),
                stage("b", entry="ctl.summarize", endpoint="ep2")],
        endpoints=[endpoint("ep1", port=7001), endpoint("ep2", port=7002)],
        links=[link("a", "b", "network")],
    )
    return make_plan(spec)


class TestDeploy:
    def test_consumers_deploy_before_producers(self):
        journal = []
        ctl = Controller(FakeManager())
        ctl.deploy_system(chain_plan(), {"ep": FakePort("ep", journal)})
        deployed = [entry[2] for entry in journal if entry[0] == "deploy"]
        assert deployed == ["c", "b", "a"]

    def test_producers_carry_their_out_links(self):
        journal = []
        ctl = Controller(FakeManager())
        ctl.deploy_system(chain_plan(), {"ep": FakePort("ep", journal)})
        by_stage = {e[2]: e[3] for e in journal if e[0] == "deploy"}
        assert by_stage["a"] == ("b",)
        assert by_stage["b"] == ("c",)
        assert by_stage["c"] == ()

    def test_missing_endpoint_is_unreachable(self):
        ctl = Controller(FakeManager())
        with pytest.raises(EndpointUnreachable) as err:
            ctl.deploy_system(two_endpoint_plan(), {"ep1": FakePort("ep1", [])})
        assert err.value.endpoint == "ep2"

    def test_failed_ping_is_unreachable_and_nothing_deploys(self):
        journal = []
        ports = {
            "ep1": FakePort("ep1", journal),
            "ep2": FakePort("ep2", journal, fail_ping=True),
        }
        ctl = Controller(FakeManager())
        with pytest.raises(EndpointUnreachable) as err:
            ctl.deploy_system(two_endpoint_plan(), ports)
        assert err.value.endpoint == "ep2"
        assert not journal

    def test_midway_failure_rolls_back_deployed_stages(self):
        journal = []
        ctl = Controller(FakeManager())
        port = FakePort("ep", journal, fail_deploy={"b"})
        with pytest.raises(PartialDeployment) as err:
            ctl.deploy_system(chain_plan(), {"ep": port})
        assert err.value.failed_stage == "b"
        assert err.value.succeeded == ["c"]
        assert ("undeploy", "ep", "c", True) in journal
        with pytest.raises(SystemNotRunning):
            ctl.handle("sys")

    def test_network_links_become_standing_routes(self):
        manager = FakeManager()
        ctl = Controller(manager)
        journal = []
        ports = {"ep1": FakePort("ep1", journal), "ep2": FakePort("ep2", journal)}
        ctl.deploy_system(two_endpoint_plan(), ports)
        assert len(manager.routes) == 1
        route = manager.routes[0]
        assert (route.system, route.producer_stage, route.consumer_stage) == ("sys", "a", "b")
        assert route.target_store == "ep2-local"

    def test_file_links_do_not_touch_the_manager(self):
        manager = FakeManager()
        Controller(manager).deploy_system(chain_plan("file"), {"ep": FakePort("ep", [])})
        assert manager.routes == []

    def test_identical_redeploy_is_a_noop(self):
        journal = []
        ctl = Controller(FakeManager())
        port = FakePort("ep", journal)
        first = ctl.deploy_system(chain_plan(), {"ep": port})
        count = len(journal)
        second = ctl.deploy_system(chain_plan(), {"ep": port})
        assert second is first
        assert len(journal) == count

    def test_changed_plan_gets_a_new_digest_and_redeploys(self):
        spec = system(
            "sys",
            stages=[stage("a", entry="ctl.pass"), stage("b", entry="ctl.summarize",
                                                         workers_initial=2)],
            endpoints=[endpoint("ep")],
            links=[link("a", "b")],
        )
        base = chain_plan()
        changed = make_plan(spec)
        assert plan_digest(base) != plan_digest(changed)


class TestLiveSystem:
    @pytest.fixture
    def summary_system(self, tmp_path):
        spec = system(
            "live",
            stages=[stage("parse", entry="ctl.pass"),
                    stage("summary", entry="ctl.summarize")],
            endpoints=[endpoint("ep")],
            links=[link("parse", "summary", "file")],
        )
        local = build_local_system(spec, tmp_path / "work")
        yield local
        local.close()

    def test_ingest_run_collect(self, summary_system, tmp_path):
        local = summary_system
        ctl = local.controller
        count = ctl.ingest(local.handle, [(y, y.encode()) for y in ("2020", "2021", "2022")])
        assert count == 3
        assert ctl.wait_idle(local.handle, timeout=30)
        result = ctl.collect_results(local.handle, tmp_path / "out")
        assert result["records"] == 3
        lines = Path(result["summaries"]).read_text().splitlines()
        ids = [json.loads(line)["scene_id"] for line in lines]
        assert ids == ["S2020", "S2021", "S2022"]  # sorted by scene id
        trends = json.loads(Path(result["trends"]).read_text())
        assert set(trends) == {"28/46/ndwi"}
        assert trends["28/46/ndwi"]["n_points"] == 3
        assert trends["28/46/ndwi"]["slope"] == pytest.approx(1.0, abs=0.05)

    def test_collect_twice_is_byte_identical(self, summary_system, tmp_path):
        local = summary_system
        ctl = local.controller
        ctl.ingest(local.handle, [("2020", b"2020"), ("2021", b"2021")])
        assert ctl.wait_idle(local.handle, timeout=30)
        first = ctl.collect_results(local.handle, tmp_path / "out1")
        second = ctl.collect_results(local.handle, tmp_path / "out2")
        assert Path(first["summaries"]).read_bytes() == Path(second["summaries"]).read_bytes()
        assert Path(first["trends"]).read_bytes() == Path(second["trends"]).read_bytes()

    def test_status_labels_stages_with_endpoints(self, summary_system):
        local = summary_system
        doc = local.controller.status(local.handle)
        assert doc["system"] == "live"
        assert set(doc["stages"]) == {"parse", "summary"}
        assert doc["stages"]["parse"]["endpoint"] == "ep"

    def test_wait_idle_false_while_work_in_flight(self, tmp_path):
        spec = system(
            "slow",
            stages=[stage("nap", entry="ctl.sleepy")],
            endpoints=[endpoint("ep")],
            links=[],
        )
        local = build_local_system(spec, tmp_path / "work")
        try:
            local.controller.ingest(local.handle, [("x", b"payload")])
            assert not local.controller.wait_idle(local.handle, timeout=0.6)
            assert local.controller.wait_idle(local.handle, timeout=30)
        finally:
            local.close()

    def test_teardown_stops_ingest_and_is_idempotent(self, summary_system):
        local = summary_system
        ctl = local.controller
        ctl.teardown(local.handle)
        assert local.handle.state == "stopped"
        with pytest.raises(SystemNotRunning):
            ctl.ingest(local.handle, [("x", b"2020")])
        ctl.teardown(local.handle)  # second call must not raise

    def test_two_sources_require_an_explicit_choice(self, tmp_path):
        spec = system(
            "fanin",
            stages=[stage("left", entry="ctl.pass"), stage("right", entry="ctl.pass"),
                    stage("summary", entry="ctl.summarize")],
            endpoints=[endpoint("ep")],
            links=[link("left", "summary", "file"), link("right", "summary", "file")],
        )
        local = build_local_system(spec, tmp_path / "work")
        try:
            with pytest.raises(SystemNotRunning):
                local.controller.ingest(local.handle, [("x", b"2020")])
            accepted = local.controller.ingest(local.handle, [("x", b"2020")], stage="left")
            assert accepted == 1
            assert local.controller.wait_idle(local.handle, timeout=30)
        finally:
            local.close()
