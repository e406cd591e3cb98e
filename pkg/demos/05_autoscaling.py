"""
====================================
Watching the autoscaler decide
====================================

The decision engine works on scripted inputs: per-stage metrics
windows become a smoothed throughput table, the argmin picks the
bottleneck, and a policy turns that into add/remove commands with a
cooldown and a rollback watch.  The second half runs it live against
a deliberately slow stage.
"""

import tempfile
import time
from pathlib import Path

from geonimbus import parse_spec
from geonimbus.autoscaler import (
    BottleneckReport,
    ScalePolicy,
    StageMetrics,
    StageState,
    ThroughputEntry,
    ThroughputTable,
    compute_throughput,
    find_bottleneck,
)
from geonimbus.registry import register
from geonimbus.runner import build_local_system

# ---------------------------------------------------------------------------
# scripted: metrics windows -> throughput table -> bottleneck
# ---------------------------------------------------------------------------


def window(stage, start, end, bytes_processed):
    return StageMetrics(stage=stage, window_start=start, window_end=end,
                        tasks_done=1, bytes_processed=bytes_processed,
                        mean_service_time=0.1, mean_wait_time=0.0,
                        workers=1, queue_depth=2)


windows = {
    "unpack": [window("unpack", 0, 1, 50), window("unpack", 1, 2, 70)],
    "index": [window("index", 0, 1, 20), window("index", 1, 2, 24)],
    "reduce": [window("reduce", 0, 1, 80), window("reduce", 1, 2, 80)],
}
table = compute_throughput(windows)
for name, entry in sorted(table.entries.items()):
    print(f"{name}: smoothed throughput {entry.throughput:.1f} bytes/s")
report = find_bottleneck(table)
print(f"bottleneck (argmin): {report.stage} at {report.throughput:.1f} bytes/s\n")

# ---------------------------------------------------------------------------
# scripted: policy walk with cooldown and a rollback
# ---------------------------------------------------------------------------


def entry(name, throughput):
    return ThroughputEntry(stage=name, throughput=throughput, mean_wait_time=0.0,
                           workers=1, queue_depth=2, active=True)


def bottleneck(name, throughput):
    return BottleneckReport(stage=name, throughput=throughput,
                            table=ThroughputTable({name: entry(name, throughput)}))


policy = ScalePolicy()
trace = [3.0, 2.4]  # throughput falls 20% right after the add
workers = 1
for interval, throughput in enumerate(trace, start=1):
    command = policy.decide(bottleneck("index", throughput),
                            {"index": StageState(workers, 4, 1)}, interval)
    print(f"interval {interval}: throughput {throughput:.1f} -> "
          f"{command.action} (target {command.target_workers}): {command.reason}")
    if command.action != "noop":
        workers = command.target_workers
print()

# ---------------------------------------------------------------------------
# live: a 4x-slower stage attracts workers until its core cap
# ---------------------------------------------------------------------------


@register("demo.fast")
def _fast(input_path, output_dir, ctx):
    time.sleep(0.02)
    (Path(output_dir) / "out").write_bytes(Path(input_path).read_bytes() + b"!")


@register("demo.slow")
def _slow(input_path, output_dir, ctx):
    time.sleep(0.08)


SPEC = """
system:
  name: hotspot
endpoints:
  - name: box
    address: 127.0.0.1:7001
    cores: 4
stages:
  - name: feed
    kind: function
    entry: demo.fast
    endpoint: box
    workers_max: 2
  - name: grind
    kind: function
    entry: demo.slow
    endpoint: box
links:
  - from_stage: feed
    to_stage: grind
    channel: memory
"""

root = Path(tempfile.mkdtemp(prefix="geonimbus-demo-"))
local = build_local_system(parse_spec(SPEC), root, autoscale=True,
                           control_interval=0.5, reporting_interval=0.25)
try:
    items = [(f"i{i:03d}", f"payload {i:03d}".encode()) for i in range(400)]
    local.controller.ingest(local.handle, items)
    grind = local.stage_daemon("grind").runtime("grind")
    start = time.time()
    while grind.worker_count() < 4 and time.time() - start < 60:
        time.sleep(0.5)
    print(f"grind worker count reached {grind.worker_count()} "
          f"after {time.time() - start:.1f}s")
    local.controller.wait_idle(local.handle, timeout=120)
    print("scale commands issued (noops omitted):")
    for command in local.replication.commands:
        if command.action == "noop":
            continue
        print(f"  {command.stage}: {command.action} -> {command.target_workers} "
              f"({command.reason})")
finally:
    local.close()
print(f"autoscaler audit log: {root / 'autoscaler.log'}")
