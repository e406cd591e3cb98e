"""Scene archives: packing, unpacking, querying, and synthetic fixtures.

A scene archive is a gzip-compressed tar holding ``<scene_id>/B<k>.band``
plus ``<scene_id>/meta.txt``.  Between stages the same layout travels as
an uncompressed tar ("bundle") so content ids stay cheap to recompute.
Archives are written deterministically (zeroed timestamps and owners), so
the same inputs always produce byte-identical bytes.
"""

from __future__ import annotations

import datetime as _dt
import gzip
import io
import os
import tarfile
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ..errors import GeoNimbusError
from .raster import (
    DEFAULT_SCALE,
    BandRaster,
    GeoBox,
    SceneMeta,
    decode_band,
    encode_band,
)

# Reference-region defaults: a box centered on the Lake Cuitzeo coordinates.
DEFAULT_POINT = (19.936739, -101.136399)  # (lat, lon)
DEFAULT_BBOX = GeoBox(
    lon_min=-101.736399,
    lat_min=19.336739,
    lon_max=-100.536399,
    lat_max=20.536739,
)
DEFAULT_PATH = 27
DEFAULT_ROW = 46
DEFAULT_BANDS = (4, 7)
META_NAME = "meta.txt"

# Synthetic pixel model: water pixels carry NDWI in [0.75, 0.95], land in
# [-0.5, 0.4], per-pixel brightness in [0.2, 1.0].  With scale 10000 the
# quantization error on the reconstructed index stays below 1e-3, far
# inside both margins around the 0.65 threshold, so the water count of a
# generated scene is exact.
_WATER_RANGE = (0.75, 0.95)
_LAND_RANGE = (-0.5, 0.4)
_BRIGHTNESS_RANGE = (0.2, 1.0)


class CorruptArchive(GeoNimbusError):
    """Archive bytes cannot be read as the documented layout."""


class MissingBand(GeoNimbusError):
    """A band required by a configured index pair is absent."""


class SourceUnavailable(GeoNimbusError):
    """Scene source directory cannot be read."""


class InvalidSpec(GeoNimbusError):
    """Fixture parameters are out of range."""


# ---------------------------------------------------------------------------
# Bundles and archives
# ---------------------------------------------------------------------------


def pack_bundle(scene_id: str, files: Mapping[str, bytes], *, compress: bool = False) -> bytes:
    """Tar ``files`` under a ``<scene_id>/`` prefix, deterministically.

    ``meta.txt`` is stored first, remaining members in sorted name order.
    """
    raw = io.BytesIO()
    with tarfile.open(fileobj=raw, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        names = sorted(files)
        if META_NAME in files:
            names.remove(META_NAME)
            names.insert(0, META_NAME)
        for name in names:
            payload = files[name]
            info = tarfile.TarInfo(f"{scene_id}/{name}")
            info.size = len(payload)
            info.mtime = 0
            info.uid = info.gid = 0
            info.uname = info.gname = ""
            info.mode = 0o644
            tar.addfile(info, io.BytesIO(payload))
    body = raw.getvalue()
    if not compress:
        return body
    out = io.BytesIO()
    with gzip.GzipFile(fileobj=out, mode="wb", mtime=0, filename="") as gz:
        gz.write(body)
    return out.getvalue()


def unpack_bundle(data: bytes) -> tuple[str, dict[str, bytes]]:
    """Inverse of :func:`pack_bundle`; accepts plain or gzipped tars.

    Raises :class:`CorruptArchive` on anything that is not one scene
    directory of regular files.
    """
    try:
        with tarfile.open(fileobj=io.BytesIO(data), mode="r:*") as tar:
            scene_id = None
            files: dict[str, bytes] = {}
            for member in tar:
                if not member.isfile():
                    continue
                top, _, rest = member.name.partition("/")
                if not rest or "/" in rest or not top or top.startswith((".", "/")):
                    raise CorruptArchive(f"unexpected member path {member.name!r}")
                if scene_id is None:
                    scene_id = top
                elif top != scene_id:
                    raise CorruptArchive(f"mixed scene directories {scene_id!r} and {top!r}")
                stream = tar.extractfile(member)
                if stream is None:
                    raise CorruptArchive(f"unreadable member {member.name!r}")
                files[rest] = stream.read()
    except (tarfile.TarError, gzip.BadGzipFile, EOFError, OSError) as exc:
        raise CorruptArchive(f"unreadable archive: {exc}") from exc
    if scene_id is None or not files:
        raise CorruptArchive("archive holds no scene files")
    return scene_id, files


def bundle_meta(files: Mapping[str, bytes]) -> SceneMeta:
    try:
        return SceneMeta.from_text(files[META_NAME].decode("utf-8"))
    except KeyError:
        raise CorruptArchive(f"archive lacks {META_NAME}") from None
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptArchive(f"bad {META_NAME}: {exc}") from exc


def bundle_bands(files: Mapping[str, bytes], meta: SceneMeta) -> dict[int, BandRaster]:
    """Decode every ``B<k>.band`` member."""
    bands: dict[int, BandRaster] = {}
    for name, payload in files.items():
        if not (name.startswith("B") and name.endswith(".band")):
            continue
        try:
            band_id = int(name[1:-5])
        except ValueError:
            raise CorruptArchive(f"bad band file name {name!r}") from None
        try:
            raster = decode_band(payload, meta)
        except GeoNimbusError as exc:
            raise CorruptArchive(f"{name}: {exc}") from exc
        if raster.band_id != band_id:
            raise CorruptArchive(f"{name} header says band {raster.band_id}")
        bands[band_id] = raster
    return bands


def pack_scene(meta: SceneMeta, bands: Mapping[int, np.ndarray], *, scale: int = DEFAULT_SCALE,
               compress: bool = True) -> bytes:
    files: dict[str, bytes] = {META_NAME: meta.to_text().encode("utf-8")}
    for band_id, grid in bands.items():
        raster = BandRaster(band_id=band_id, scale=scale, values=grid, scene=meta)
        files[f"B{band_id}.band"] = encode_band(raster)
    return pack_bundle(meta.scene_id, files, compress=compress)


def unpack_scene(data: bytes) -> tuple[SceneMeta, dict[int, BandRaster]]:
    _, files = unpack_bundle(data)
    meta = bundle_meta(files)
    return meta, bundle_bands(files, meta)


# ---------------------------------------------------------------------------
# Scene source
# ---------------------------------------------------------------------------


def _as_date(value) -> _dt.date:
    if isinstance(value, _dt.datetime):
        return value.date()
    if isinstance(value, _dt.date):
        return value
    return _dt.date.fromisoformat(str(value))


def download(query: Mapping, source_dir: str | os.PathLike | None = None) -> list[bytes]:
    """Return archives whose bbox contains the query point and whose
    acquisition date falls inside the range.

    ``query`` carries ``lon``, ``lat``, ``start``, ``end`` and optionally
    ``source_dir``; the source falls back to ``GEONIMBUS_SCENE_SOURCE``.
    """
    source = source_dir or query.get("source_dir") or os.environ.get("GEONIMBUS_SCENE_SOURCE")
    if not source:
        raise SourceUnavailable("no scene source configured")
    root = Path(source)
    if not root.is_dir():
        raise SourceUnavailable(f"scene source {root} is not a readable directory")
    lon = float(query["lon"])
    lat = float(query["lat"])
    start = _as_date(query["start"])
    end = _as_date(query["end"])
    out: list[bytes] = []
    for path in sorted(root.glob("*.tar.gz")):
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise SourceUnavailable(f"cannot read {path}: {exc}") from exc
        _, files = unpack_bundle(data)
        meta = bundle_meta(files)
        if meta.bbox.contains_point(lon, lat) and start <= meta.acquisition_date <= end:
            out.append(data)
    return out


# ---------------------------------------------------------------------------
# Synthetic fixtures
# ---------------------------------------------------------------------------


def make_fixture_scene(spec: Mapping) -> bytes:
    """Deterministic synthetic scene archive with an exact water fraction.

    ``spec`` keys: ``width``, ``height``, ``water_fraction``, ``bands``,
    ``date``, ``path``, ``row``, ``seed``; optional ``scene_id``,
    ``bbox``, ``scale``.  The generated scene's NDWI over the (4, 7) pair
    classifies exactly ``round(water_fraction * width * height)`` pixels
    as water at the 0.65 threshold; bands 3 and 5, when requested, mirror
    4 and 7 so the green pair classifies identically.
    """
    try:
        width = int(spec.get("width", 100))
        height = int(spec.get("height", 100))
        fraction = float(spec.get("water_fraction", 0.0))
        bands = tuple(int(b) for b in spec.get("bands", DEFAULT_BANDS))
        date = _as_date(spec.get("date", "2013-01-01"))
        path = int(spec.get("path", DEFAULT_PATH))
        row = int(spec.get("row", DEFAULT_ROW))
        seed = int(spec.get("seed", 1))
        scale = int(spec.get("scale", DEFAULT_SCALE))
    except (TypeError, ValueError) as exc:
        raise InvalidSpec(f"bad fixture field: {exc}") from exc
    if width < 1 or height < 1:
        raise InvalidSpec(f"grid must be at least 1x1, got {width}x{height}")
    if not 0.0 <= fraction <= 1.0:
        raise InvalidSpec(f"water_fraction must lie in [0, 1], got {fraction}")
    if not bands or any(not 1 <= b <= 11 for b in bands):
        raise InvalidSpec(f"bands must be LandSat8 band ids 1..11, got {bands}")
    if scale < 1000:
        raise InvalidSpec(f"scale below 1000 breaks the classification margin, got {scale}")
    if path < 1 or row < 1:
        raise InvalidSpec(f"path/row must be positive, got {path}/{row}")

    bbox = spec.get("bbox", DEFAULT_BBOX)
    if not isinstance(bbox, GeoBox):
        bbox = GeoBox.parse(bbox) if isinstance(bbox, str) else GeoBox(*bbox)
    scene_id = spec.get("scene_id") or f"SYN{path:03d}{row:03d}_{date.strftime('%Y%m%d')}_{seed:04d}"
    meta = SceneMeta(scene_id=scene_id, acquisition_date=date, path=path, row=row, bbox=bbox)

    rng = np.random.default_rng(seed)
    total = width * height
    k = int(round(fraction * total))
    water_at = rng.permutation(total)[:k]
    index = np.empty(total, dtype=np.float64)
    mask = np.zeros(total, dtype=bool)
    mask[water_at] = True
    index[mask] = rng.uniform(*_WATER_RANGE, size=k)
    index[~mask] = rng.uniform(*_LAND_RANGE, size=total - k)
    brightness = rng.uniform(*_BRIGHTNESS_RANGE, size=total)

    band_a = brightness * (1.0 + index) / 2.0
    band_b = brightness * (1.0 - index) / 2.0
    grid_a = np.round(band_a * scale).astype(np.uint16).reshape(height, width)
    grid_b = np.round(band_b * scale).astype(np.uint16).reshape(height, width)

    grids: dict[int, np.ndarray] = {}
    for band_id in sorted(set(bands)):
        if band_id == 4:
            grids[band_id] = grid_a
        elif band_id == 7:
            grids[band_id] = grid_b
        elif band_id == 3:
            grids[band_id] = grid_a.copy()
        elif band_id == 5:
            grids[band_id] = grid_b.copy()
        else:
            filler = rng.integers(0, scale + 1, size=total, dtype=np.int64)
            grids[band_id] = filler.astype(np.uint16).reshape(height, width)
    return pack_scene(meta, grids, scale=scale)


def make_fixture_set(
    out_dir: str | os.PathLike,
    count: int,
    *,
    width: int = 100,
    height: int = 100,
    fractions: Iterable[float] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7),
    start_year: int = 2013,
    path: int = DEFAULT_PATH,
    row: int = DEFAULT_ROW,
    bands: tuple[int, ...] = DEFAULT_BANDS,
    first_seed: int = 1,
) -> list[Path]:
    """Write ``count`` archives (seeds ``first_seed..``, fractions cycling,
    acquisition dates one year apart) and return their paths."""
    fractions = tuple(fractions)
    if not fractions:
        raise InvalidSpec("need at least one water fraction")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for i in range(count):
        seed = first_seed + i
        spec = {
            "width": width,
            "height": height,
            "water_fraction": fractions[i % len(fractions)],
            "bands": bands,
            "date": _dt.date(start_year + i % 12, 1, 1),
            "path": path,
            "row": row,
            "seed": seed,
        }
        data = make_fixture_scene(spec)
        meta, _ = unpack_scene(data)
        target = out / f"{meta.scene_id}.tar.gz"
        target.write_bytes(data)
        written.append(target)
    return written
