"""
==================================
Declaring and planning a system
==================================

A system is declared in a structured text document: stages, the
endpoints they run on, and the links between them.  Parsing gives a
typed spec, validation returns every problem at once, and planning
produces the deterministic stage order a deployment follows.
"""

from geonimbus import parse_spec, plan, serialize_spec, validate

DOC = """
system:
  name: demo
endpoints:
  - name: box-a
    address: 127.0.0.1:7101
    cores: 4
  - name: box-b
    address: 127.0.0.1:7102
    cores: 2
stages:
  - name: fetch
    kind: function
    entry: eos.downloader
    endpoint: box-a
  - name: unpack
    kind: function
    entry: eos.decompressing
    endpoint: box-a
  - name: reduce
    kind: function
    entry: eos.summary
    endpoint: box-b
    workers_max: auto
links:
  - from_stage: fetch
    to_stage: unpack
  - from_stage: unpack
    to_stage: reduce
"""

# ---------------------------------------------------------------------------
# parse: defaults fill in, channel kind follows stage placement
# ---------------------------------------------------------------------------

spec = parse_spec(DOC)
print(f"system {spec.name!r}: {len(spec.stages)} stages on {len(spec.endpoints)} endpoints")
for stage_spec in spec.stages:
    print(f"  stage {stage_spec.name}: workers {stage_spec.workers_initial}.."
          f"{stage_spec.workers_max} on {stage_spec.endpoint}")
for link in spec.links:
    print(f"  link {link.from_stage} -> {link.to_stage} over {link.channel!r} channel")
# fetch->unpack share box-a, so the default channel is 'file';
# unpack->reduce crosses endpoints, so it defaults to 'network'

# ---------------------------------------------------------------------------
# validate: every violation reported in one pass
# ---------------------------------------------------------------------------

broken = parse_spec(DOC.replace("endpoint: box-b", "endpoint: box-z"))
for violation in validate(broken):
    print(f"violation: {violation}")
print(f"clean spec violations: {validate(spec)}")

# ---------------------------------------------------------------------------
# plan: topological stage order, ties broken by declaration order
# ---------------------------------------------------------------------------

deployment = plan(spec)
print("deployment order:", " -> ".join(deployment.order))
for binding in deployment.bindings:
    print(f"  binding {binding.link.from_stage}@{binding.from_endpoint}"
          f" -> {binding.link.to_stage}@{binding.to_endpoint}")

# the spec serializes back to the same document shape it was parsed from
assert parse_spec(serialize_spec(spec)) == spec
print("serialize/parse roundtrip holds")
