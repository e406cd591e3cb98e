"""
========================================
The six-stage water pipeline, locally
========================================

The bundled case-study system chains downloader, decompressing,
indexing, cropping, derivates, and summary stages across three
declared endpoints.  Local mode hosts all of them in one process with
the same contracts as a distributed run, which makes it the fastest
way to see a whole dataflow work.
"""

import json
import tempfile
from pathlib import Path

from geonimbus import cli, runner
from geonimbus.eos import scenes

root = Path(tempfile.mkdtemp(prefix="geonimbus-demo-"))

# ---------------------------------------------------------------------------
# synthesize a few LandSat-like scenes with known water fractions
# ---------------------------------------------------------------------------

scene_dir = root / "scenes"
archives = scenes.make_fixture_set(scene_dir, 4, fractions=(0.0, 0.2, 0.4, 0.6))
print(f"wrote {len(archives)} scene archives:")
for archive in archives:
    print(f"  {archive.name} ({archive.stat().st_size} bytes)")

input_dir = root / "input"
input_dir.mkdir()
(input_dir / "query.json").write_text(json.dumps({
    "lat": scenes.DEFAULT_POINT[0],
    "lon": scenes.DEFAULT_POINT[1],
    "start": "2000-01-01",
    "end": "2099-12-31",
    "source_dir": str(scene_dir),
}, indent=2))

# ---------------------------------------------------------------------------
# run the bundled spec end to end in this process
# ---------------------------------------------------------------------------

spec_path = Path(cli.__file__).parent / "fixtures" / "eos_cuitzeo.yaml"
spec = runner.load_spec(spec_path)
report = runner.run_local(spec, input_dir, root / "run")

print(f"\nsystem {report.system}: {report.records} summary records "
      f"in {report.response_seconds:.2f}s")
for stage_name, (enqueued, done, failed) in sorted(report.counters.items()):
    print(f"  {stage_name}: {done}/{enqueued} tasks done, {failed} failed")

# ---------------------------------------------------------------------------
# the summaries carry one water percentage per scene; the trend file
# fits a least-squares line per (path, row, index) region
# ---------------------------------------------------------------------------

print("\nwater percentages (requested 0%, 20%, 40%, 60%):")
for line in (Path(report.results_dir) / "summaries.jsonl").read_text().splitlines():
    record = json.loads(line)
    print(f"  {record['scene_id']} {record['date']}: {record['water_percent']:.2f}% "
          f"({record['water_pixels']}/{record['total_pixels']} px)")

trends = json.loads((Path(report.results_dir) / "trends.json").read_text())
for region, fit in trends.items():
    print(f"trend {region}: {fit['slope']:+.2f} %/yr over {fit['n_points']} scenes")
