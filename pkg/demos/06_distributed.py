"""
==========================================
Three daemons, one storage manager
==========================================

The same spec that ran locally deploys onto separate daemon
processes.  This script spawns a storage manager and three daemons on
loopback, rewrites the bundled spec to their addresses, runs the
pipeline through the command-line entry point, and checks the results
byte for byte against a local-mode run of the same inputs.
"""

import json
import socket
import subprocess
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

from geonimbus import cli, model, runner
from geonimbus.eos import scenes

root = Path(tempfile.mkdtemp(prefix="geonimbus-demo-"))


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def wait_for(address, timeout=20.0):
    host, _, port = address.rpartition(":")
    deadline = time.time() + timeout
    while time.time() < deadline:
        try:
            with socket.create_connection((host, int(port)), timeout=1.0):
                return
        except OSError:
            time.sleep(0.1)
    raise TimeoutError(address)


# ---------------------------------------------------------------------------
# inputs: four synthetic scenes plus the query that selects them
# ---------------------------------------------------------------------------

scene_dir = root / "scenes"
scenes.make_fixture_set(scene_dir, 4, fractions=(0.1, 0.3, 0.5, 0.7))
input_dir = root / "input"
input_dir.mkdir()
(input_dir / "query.json").write_text(json.dumps({
    "lat": scenes.DEFAULT_POINT[0],
    "lon": scenes.DEFAULT_POINT[1],
    "start": "2000-01-01",
    "end": "2099-12-31",
    "source_dir": str(scene_dir),
}))

spec_path = Path(cli.__file__).parent / "fixtures" / "eos_cuitzeo.yaml"
spec = runner.load_spec(spec_path)

# ---------------------------------------------------------------------------
# reference run in local mode
# ---------------------------------------------------------------------------

local_report = runner.run_local(spec, input_dir, root / "local")
local_summaries = (Path(local_report.results_dir) / "summaries.jsonl").read_bytes()
print(f"local mode: {local_report.records} records "
      f"in {local_report.response_seconds:.2f}s")

# ---------------------------------------------------------------------------
# distributed: one process per endpoint, addresses patched into the spec
# ---------------------------------------------------------------------------

manager_addr = f"127.0.0.1:{free_port()}"
dist_spec = replace(spec, endpoints=tuple(
    replace(e, address=f"127.0.0.1:{free_port()}") for e in spec.endpoints
))
dist_path = root / "distributed.yaml"
dist_path.write_text(model.serialize_spec(dist_spec))

procs = [subprocess.Popen(
    [sys.executable, "-m", "geonimbus.cli", "storage-manager",
     "--listen", manager_addr, "--root", str(root / "mgr")],
)]
try:
    wait_for(manager_addr)
    for e in dist_spec.endpoints:
        procs.append(subprocess.Popen(
            [sys.executable, "-m", "geonimbus.cli", "daemon",
             "--listen", e.address, "--name", e.name,
             "--cores", str(e.cores),
             "--store-root", str(root / f"{e.name}-store"),
             "--work-root", str(root / f"{e.name}-work"),
             "--manager", manager_addr],
        ))
        print(f"daemon {e.name} starting on {e.address} ({e.cores} cores)")
    for e in dist_spec.endpoints:
        wait_for(e.address)

    rc = cli.main([
        "run", str(dist_path),
        "--input", str(input_dir),
        "--manager", manager_addr,
        "--out", str(root / "dist-results"),
        "--work-root", str(root / "cli-work"),
    ])
    print(f"cli run exit code: {rc}")
finally:
    for proc in procs:
        proc.terminate()
    for proc in procs:
        proc.wait(timeout=10)

dist_summaries = (root / "dist-results" / "summaries.jsonl").read_bytes()
print(f"distributed summaries identical to local: {dist_summaries == local_summaries}")
