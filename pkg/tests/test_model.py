"""System spec parsing, validation, and planning."""

import pytest

from geonimbus import model
from conftest import endpoint, link, stage, system

MINIMAL = """
system:
  name: tiny
endpoints:
  - name: ep
    address: 127.0.0.1:7001
    cores: 2
stages:
  - name: only
    kind: function
    entry: tests.echo
    endpoint: ep
"""

SIX_STAGE = """
system:
  name: eos
endpoints:
  - name: alpha
    address: 127.0.0.1:7001
    cores: 4
  - name: gamma
    address: 127.0.0.1:7002
    cores: 4
stages:
  - name: a
    kind: function
    entry: t.a
    endpoint: alpha
  - name: b
    kind: function
    entry: t.b
    endpoint: alpha
  - name: c
    kind: function
    entry: t.c
    endpoint: gamma
links:
  - from_stage: a
    to_stage: b
  - from_stage: b
    to_stage: c
"""


class TestParse:
    def test_minimal_defaults(self):
        spec = model.parse_spec(MINIMAL)
        assert spec.name == "tiny"
        assert len(spec.stages) == 1
        assert spec.stages[0].workers_initial == 1
        assert spec.stages[0].workers_max == "auto"
        assert spec.links == ()

    def test_channel_defaults_follow_placement(self):
        spec = model.parse_spec(SIX_STAGE)
        by_pair = {(l.from_stage, l.to_stage): l.channel for l in spec.links}
        assert by_pair[("a", "b")] == "file"  # same endpoint
        assert by_pair[("b", "c")] == "network"  # crosses endpoints

    def test_not_yaml(self):
        with pytest.raises(model.SpecSyntax):
            model.parse_spec("{unbalanced")

    def test_missing_required_field(self):
        with pytest.raises((model.MissingField, model.SpecSyntax)):
            model.parse_spec("system:\n  name: x\nendpoints: []\n")

    def test_bad_kind_rejected(self):
        doc = MINIMAL.replace("kind: function", "kind: container")
        with pytest.raises(model.SpecSyntax):
            model.parse_spec(doc)

    def test_roundtrip_through_serialize(self):
        spec = model.parse_spec(SIX_STAGE)
        again = model.parse_spec(model.serialize_spec(spec))
        assert again == spec


def codes(spec):
    return sorted(v.code for v in model.validate(spec))


class TestValidate:
    def test_valid_spec_has_no_violations(self):
        assert codes(model.parse_spec(SIX_STAGE)) == []

    def test_unknown_endpoint(self):
        spec = system("s", [stage("a", endpoint="ghost")], [endpoint("ep")])
        assert "UnknownEndpoint" in codes(spec)

    def test_unknown_stage_in_link(self):
        spec = system("s", [stage("a")], [endpoint("ep")], [link("a", "ghost")])
        assert "UnknownStage" in codes(spec)

    def test_cycle_detected(self):
        spec = system(
            "s",
            [stage("a"), stage("b")],
            [endpoint("ep")],
            [link("a", "b"), link("b", "a")],
        )
        assert "CyclicGraph" in codes(spec)

    def test_self_loop_is_a_cycle(self):
        spec = system("s", [stage("a")], [endpoint("ep")], [link("a", "a")])
        assert "CyclicGraph" in codes(spec)

    def test_nonnetwork_channel_across_endpoints(self):
        spec = system(
            "s",
            [stage("a", endpoint="e1"), stage("b", endpoint="e2")],
            [endpoint("e1"), endpoint("e2", port=7002)],
            [link("a", "b", channel="file")],
        )
        assert "ChannelEndpointMismatch" in codes(spec)

    def test_bad_cores(self):
        spec = system("s", [stage("a")], [endpoint("ep", cores=0)])
        assert "BadCores" in codes(spec)

    @pytest.mark.parametrize("address", ["nocolon", ":7001", "host:", "host:notaport", "host:0"])
    def test_bad_address(self, address):
        ep = model.EndpointSpec(name="ep", address=address, cores=2)
        spec = system("s", [stage("a")], [ep])
        assert "BadAddress" in codes(spec)

    def test_worker_bounds_against_declared_max(self):
        spec = system("s", [stage("a", workers_initial=5, workers_max=4)], [endpoint("ep")])
        assert "BadWorkerBounds" in codes(spec)

    def test_worker_bounds_against_auto_max(self):
        # auto resolves to endpoint cores
        spec = system("s", [stage("a", workers_initial=3)], [endpoint("ep", cores=2)])
        assert "BadWorkerBounds" in codes(spec)

    def test_zero_initial_workers(self):
        spec = system("s", [stage("a", workers_initial=0)], [endpoint("ep")])
        assert "BadWorkerBounds" in codes(spec)

    def test_duplicate_names(self):
        spec = system("s", [stage("a"), stage("a")], [endpoint("ep"), endpoint("ep")])
        found = codes(spec)
        assert "DuplicateStageName" in found
        assert "DuplicateEndpointName" in found


class TestPlan:
    def test_respects_links(self):
        spec = model.parse_spec(SIX_STAGE)
        order = model.plan(spec).order
        for l in spec.links:
            assert order.index(l.from_stage) < order.index(l.to_stage)

    def test_declaration_order_breaks_ties(self):
        # two independent roots: declared order wins
        spec = system(
            "s",
            [stage("z"), stage("m"), stage("sink")],
            [endpoint("ep")],
            [link("z", "sink"), link("m", "sink")],
        )
        assert model.plan(spec).order == ("z", "m", "sink")

    def test_plan_is_deterministic(self):
        spec = model.parse_spec(SIX_STAGE)
        assert model.plan(spec) == model.plan(spec)

    def test_groups_cover_all_stages_by_endpoint(self):
        spec = model.parse_spec(SIX_STAGE)
        groups = dict(model.plan(spec).groups)
        assert sorted(groups) == ["alpha", "gamma"]
        assert [s.name for s in groups["alpha"]] == ["a", "b"]
        assert [s.name for s in groups["gamma"]] == ["c"]

    def test_invalid_spec_raises(self):
        spec = system("s", [stage("a", endpoint="ghost")], [endpoint("ep")])
        with pytest.raises(model.InvalidSpec) as err:
            model.plan(spec)
        assert any(v.code == "UnknownEndpoint" for v in err.value.violations)

    def test_bindings_carry_endpoints(self):
        spec = model.parse_spec(SIX_STAGE)
        bindings = {(b.link.from_stage, b.link.to_stage): b for b in model.plan(spec).bindings}
        assert bindings[("b", "c")].from_endpoint == "alpha"
        assert bindings[("b", "c")].to_endpoint == "gamma"

    def test_resolved_workers_max(self):
        ep = endpoint("ep", cores=6)
        assert stage("a").resolved_workers_max(ep) == 6
        assert stage("a", workers_max=3).resolved_workers_max(ep) == 3
