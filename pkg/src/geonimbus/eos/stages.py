"""The six case-study stages, registered as stage functions.

Downloader -> Decompressing -> Indexing -> Cropping -> Derivates -> Summary

Every stage reads one input file and writes its outputs into the task's
output directory; the daemon moves bytes between stages.  Stage tuning
arrives through context params (populated from the daemon environment):

    GEONIMBUS_SCENE_SOURCE          fallback scene directory for download queries
    GEONIMBUS_NDWI_PAIRS            band pairs, e.g. "4:7,3:5"
    GEONIMBUS_WATER_THRESHOLD       classification threshold (default 0.65)
    GEONIMBUS_CROP_BBOX             lon_min,lat_min,lon_max,lat_max
    GEONIMBUS_INDEX_PATH            metadata index file location
    GEONIMBUS_DERIVATES_HASH_BYTES  extra per-scene compute for benchmarks
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from pathlib import Path
from typing import Mapping

from ..registry import StageContext, register
from . import raster, scenes, summary as summary_mod

ENV_SOURCE = "GEONIMBUS_SCENE_SOURCE"
ENV_PAIRS = "GEONIMBUS_NDWI_PAIRS"
ENV_THRESHOLD = "GEONIMBUS_WATER_THRESHOLD"
ENV_CROP = "GEONIMBUS_CROP_BBOX"
ENV_INDEX = "GEONIMBUS_INDEX_PATH"
ENV_HASH_BYTES = "GEONIMBUS_DERIVATES_HASH_BYTES"

_BURN_BLOCK = b"\x5a" * (8 << 20)


# ---------------------------------------------------------------------------
# Metadata index (the desk-scale Geoportal stand-in)
# ---------------------------------------------------------------------------


class MetadataIndex:
    """Append-only JSONL index of scene metadata, queryable and idempotent
    per scene_id.  Writes are serialized; readers see complete lines."""

    def __init__(self, path: str | os.PathLike) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()

    def _load(self) -> dict[str, dict]:
        records: dict[str, dict] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    doc = json.loads(line)
                    records[doc["scene_id"]] = doc
        return records

    def add(self, meta: raster.SceneMeta, products: list[str]) -> dict:
        record = {
            "scene_id": meta.scene_id,
            "date": meta.acquisition_date.isoformat(),
            "path": meta.path,
            "row": meta.row,
            "bbox": list(meta.bbox.as_tuple()),
            "products": sorted(products),
        }
        with self._lock:
            existing = self._load()
            if meta.scene_id not in existing:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
            else:
                record = existing[meta.scene_id]
        return record

    def query(
        self,
        scene_id: str | None = None,
        start: str | None = None,
        end: str | None = None,
        path: int | None = None,
        row: int | None = None,
    ) -> list[dict]:
        with self._lock:
            records = list(self._load().values())
        out = []
        for doc in records:
            if scene_id is not None and doc["scene_id"] != scene_id:
                continue
            if start is not None and doc["date"] < start:
                continue
            if end is not None and doc["date"] > end:
                continue
            if path is not None and doc["path"] != path:
                continue
            if row is not None and doc["row"] != row:
                continue
            out.append(doc)
        return out


def index_scene(meta: raster.SceneMeta, products: list[str], index: MetadataIndex) -> dict:
    """Record a scene in the metadata index; idempotent per scene_id."""
    return index.add(meta, products)


# ---------------------------------------------------------------------------
# Stage bodies
# ---------------------------------------------------------------------------


def _parse_pairs(text: str | None) -> list[tuple[int, int]]:
    if not text:
        return list(raster.DEFAULT_PAIRS)
    pairs = []
    for part in text.split(","):
        a, sep, b = part.strip().partition(":")
        if not sep:
            raise ValueError(f"band pair must look like A:B, got {part!r}")
        pairs.append((int(a), int(b)))
    return pairs


@register("eos.downloader")
def downloader(input_path: str, output_dir: str, ctx: StageContext) -> None:
    """Input: a spatio-temporal query as JSON.  Output: one archive per
    matching scene from the configured source."""
    query = json.loads(Path(input_path).read_text())
    archives = scenes.download(query, source_dir=query.get("source_dir") or ctx.param(ENV_SOURCE))
    for data in archives:
        scene_id, _ = scenes.unpack_bundle(data)
        Path(output_dir, f"{scene_id}.tar.gz").write_bytes(data)


@register("eos.decompressing")
def decompressing(input_path: str, output_dir: str, ctx: StageContext) -> None:
    """Input: gzipped scene archive.  Output: uncompressed band bundle."""
    data = Path(input_path).read_bytes()
    scene_id, files = scenes.unpack_bundle(data)
    meta = scenes.bundle_meta(files)  # validates the sidecar early
    scenes.bundle_bands(files, meta)  # every band file must parse
    Path(output_dir, f"{scene_id}.bundle").write_bytes(scenes.pack_bundle(scene_id, files))


@register("eos.indexing")
def indexing(input_path: str, output_dir: str, ctx: StageContext) -> None:
    """Record scene metadata in the index, then pass the bundle through
    with the index record attached."""
    data = Path(input_path).read_bytes()
    scene_id, files = scenes.unpack_bundle(data)
    meta = scenes.bundle_meta(files)
    index_path = ctx.param(ENV_INDEX) or str(Path(ctx.work_dir) / "geoportal.jsonl")
    record = index_scene(meta, [n for n in files if n.endswith(".band")], MetadataIndex(index_path))
    files = dict(files)
    files["index.json"] = (json.dumps(record, sort_keys=True) + "\n").encode("utf-8")
    Path(output_dir, f"{scene_id}.bundle").write_bytes(scenes.pack_bundle(scene_id, files))


@register("eos.cropping")
def cropping(input_path: str, output_dir: str, ctx: StageContext) -> None:
    """Cut every band down to the configured bounding box."""
    data = Path(input_path).read_bytes()
    scene_id, files = scenes.unpack_bundle(data)
    meta = scenes.bundle_meta(files)
    box_text = ctx.param(ENV_CROP)
    box = raster.GeoBox.parse(box_text) if box_text else scenes.DEFAULT_BBOX
    bands = scenes.bundle_bands(files, meta)
    out_files: dict[str, bytes] = {}
    cut_meta = meta
    for band_id in sorted(bands):
        cut = raster.crop(bands[band_id], box)
        cut_meta = cut.scene
        out_files[f"B{band_id}.band"] = raster.encode_band(cut)
    out_files[scenes.META_NAME] = cut_meta.to_text().encode("utf-8")
    Path(output_dir, f"{scene_id}.bundle").write_bytes(scenes.pack_bundle(scene_id, out_files))


def _burn_cpu(nbytes: int) -> None:
    """Inflate per-scene compute with hashing; runs without the GIL so
    worker threads scale across cores."""
    h = hashlib.sha256()
    remaining = nbytes
    view = memoryview(_BURN_BLOCK)
    while remaining > 0:
        take = min(remaining, len(view))
        h.update(view[:take])
        remaining -= take
    h.hexdigest()


@register("eos.derivates")
def derivates(input_path: str, output_dir: str, ctx: StageContext) -> None:
    """Compute one index raster per configured band pair.

    A pair with both bands absent is skipped; a pair with exactly one
    band present, or no computable pair at all, raises
    :class:`~geonimbus.eos.scenes.MissingBand`.
    """
    data = Path(input_path).read_bytes()
    scene_id, files = scenes.unpack_bundle(data)
    meta = scenes.bundle_meta(files)
    bands = scenes.bundle_bands(files, meta)
    pairs = _parse_pairs(ctx.param(ENV_PAIRS))
    burn = int(ctx.param(ENV_HASH_BYTES) or 0)
    if burn > 0:
        _burn_cpu(burn)
    out_files: dict[str, bytes] = {scenes.META_NAME: meta.to_text().encode("utf-8")}
    for a, b in pairs:
        have_a, have_b = a in bands, b in bands
        if not have_a and not have_b:
            continue
        if have_a != have_b:
            missing = b if have_a else a
            raise scenes.MissingBand(f"{scene_id}: pair ({a},{b}) needs band {missing}")
        index = raster.ndwi(bands[a], bands[b])
        out_files[f"{index.index_name}.index"] = raster.encode_index(index)
    if len(out_files) == 1:
        raise scenes.MissingBand(f"{scene_id}: no configured band pair is computable")
    Path(output_dir, f"{scene_id}.ndwi").write_bytes(scenes.pack_bundle(scene_id, out_files))


@register("eos.summary")
def summarize(input_path: str, output_dir: str, ctx: StageContext) -> None:
    """Classify water pixels per index raster and emit one JSON line each."""
    data = Path(input_path).read_bytes()
    scene_id, files = scenes.unpack_bundle(data)
    meta = scenes.bundle_meta(files)
    threshold = float(ctx.param(ENV_THRESHOLD) or summary_mod.DEFAULT_THRESHOLD)
    lines = []
    for name in sorted(files):
        if not name.endswith(".index"):
            continue
        index = raster.decode_index(files[name], meta)
        lines.append(summary_mod.water_percentage(index, threshold).to_line())
    if not lines:
        raise scenes.CorruptArchive(f"{scene_id}: bundle holds no index rasters")
    Path(output_dir, f"{scene_id}.summary").write_text("\n".join(lines) + "\n")
