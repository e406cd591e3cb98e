"""Raster containers and band math for the earth-observation stages.

Band files use a small documented container instead of GeoTIFF:

    offset  size  field
    0       4     magic ``GNBR``
    4       2     format version (currently 1), unsigned LE
    6       2     band_id, unsigned LE
    8       4     width in pixels, unsigned LE
    12      4     height in pixels, unsigned LE
    16      4     scale factor, unsigned LE (reflectance = sample / scale)
    20      ...   width*height row-major 16-bit unsigned LE samples

Row 0 is the northernmost row.  Samples never exceed the scale factor,
so reflectance stays in [0, 1].  Real LandSat data converts into this
container by dumping each band's DN grid scaled to [0, scale].

Index rasters (NDWI and friends) use a sibling container:

    0       4     magic ``GNIX``
    4       2     format version (currently 1), unsigned LE
    6       2     length of the index name in bytes, unsigned LE
    8       4     width, unsigned LE
    12      4     height, unsigned LE
    16      n     index name, UTF-8
    16+n    ...   width*height row-major float32 LE values

Undefined pixels carry the fill sentinel -9999.0; every other value lies
in [-1, 1].
"""

from __future__ import annotations

import datetime as _dt
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from ..errors import GeoNimbusError

BAND_MAGIC = b"GNBR"
INDEX_MAGIC = b"GNIX"
FORMAT_VERSION = 1
DEFAULT_SCALE = 10000
FILL_VALUE = -9999.0

_BAND_HEADER = struct.Struct("<4sHHIII")
_INDEX_HEADER = struct.Struct("<4sHHII")

# index_name by (band_a, band_b) pair; a is the first operand of (a-b)/(a+b)
NDWI_PAIRS: dict[tuple[int, int], str] = {
    (4, 7): "NDWI_red",
    (3, 5): "NDWI_green",
}
DEFAULT_PAIRS = tuple(NDWI_PAIRS)


class BadRaster(GeoNimbusError):
    """Container bytes violate the documented format."""


class ShapeMismatch(GeoNimbusError):
    """Band operands have different pixel dimensions."""


class SceneMismatch(GeoNimbusError):
    """Band operands come from different scenes."""


class NoOverlap(GeoNimbusError):
    """Crop box does not intersect the raster's bounding box."""


@dataclass(frozen=True)
class GeoBox:
    """Geographic bounding box in degrees, min < max on both axes."""

    lon_min: float
    lat_min: float
    lon_max: float
    lat_max: float

    def __post_init__(self) -> None:
        if not (self.lon_min < self.lon_max and self.lat_min < self.lat_max):
            raise ValueError(f"degenerate box {self}")

    def contains_point(self, lon: float, lat: float) -> bool:
        return self.lon_min <= lon <= self.lon_max and self.lat_min <= lat <= self.lat_max

    def intersection(self, other: "GeoBox") -> "GeoBox | None":
        lon_lo = max(self.lon_min, other.lon_min)
        lon_hi = min(self.lon_max, other.lon_max)
        lat_lo = max(self.lat_min, other.lat_min)
        lat_hi = min(self.lat_max, other.lat_max)
        if lon_lo >= lon_hi or lat_lo >= lat_hi:
            return None
        return GeoBox(lon_lo, lat_lo, lon_hi, lat_hi)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lon_min, self.lat_min, self.lon_max, self.lat_max)

    @classmethod
    def parse(cls, text: str) -> "GeoBox":
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"expected lon_min,lat_min,lon_max,lat_max, got {text!r}")
        return cls(*parts)

    def format(self) -> str:
        return ",".join(repr(v) for v in self.as_tuple())


@dataclass(frozen=True)
class SceneMeta:
    scene_id: str
    acquisition_date: _dt.date
    path: int
    row: int
    bbox: GeoBox

    def __post_init__(self) -> None:
        if self.path <= 0 or self.row <= 0:
            raise ValueError(f"path/row must be positive, got {self.path}/{self.row}")

    def to_text(self) -> str:
        return (
            f"scene_id: {self.scene_id}\n"
            f"acquisition_date: {self.acquisition_date.isoformat()}\n"
            f"path: {self.path}\n"
            f"row: {self.row}\n"
            f"bbox: {self.bbox.format()}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "SceneMeta":
        fields: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, sep, value = line.partition(":")
            if not sep:
                raise ValueError(f"bad metadata line {line!r}")
            fields[key.strip()] = value.strip()
        try:
            return cls(
                scene_id=fields["scene_id"],
                acquisition_date=_dt.date.fromisoformat(fields["acquisition_date"]),
                path=int(fields["path"]),
                row=int(fields["row"]),
                bbox=GeoBox.parse(fields["bbox"]),
            )
        except KeyError as exc:
            raise ValueError(f"metadata missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class BandRaster:
    band_id: int
    scale: int
    values: np.ndarray  # uint16, shape (height, width), row 0 = north
    scene: SceneMeta

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    def reflectance(self) -> np.ndarray:
        return self.values.astype(np.float64) / self.scale


@dataclass(frozen=True)
class IndexRaster:
    index_name: str
    values: np.ndarray  # float32, shape (height, width); FILL_VALUE where undefined
    scene: SceneMeta

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


def encode_band(raster: BandRaster) -> bytes:
    values = np.ascontiguousarray(raster.values, dtype="<u2")
    if values.ndim != 2:
        raise BadRaster(f"band grid must be 2-d, got shape {values.shape}")
    if values.size and int(values.max()) > raster.scale:
        raise BadRaster(f"band {raster.band_id}: sample above scale factor {raster.scale}")
    header = _BAND_HEADER.pack(
        BAND_MAGIC, FORMAT_VERSION, raster.band_id, raster.width, raster.height, raster.scale
    )
    return header + values.tobytes()


def decode_band(data: bytes, scene: SceneMeta) -> BandRaster:
    if len(data) < _BAND_HEADER.size:
        raise BadRaster(f"band file truncated at {len(data)} bytes")
    magic, version, band_id, width, height, scale = _BAND_HEADER.unpack_from(data)
    if magic != BAND_MAGIC:
        raise BadRaster(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise BadRaster(f"unsupported format version {version}")
    if scale < 1:
        raise BadRaster(f"scale factor must be positive, got {scale}")
    expected = _BAND_HEADER.size + 2 * width * height
    if len(data) != expected:
        raise BadRaster(f"band payload is {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<u2", offset=_BAND_HEADER.size).reshape(height, width)
    if values.size and int(values.max()) > scale:
        raise BadRaster(f"band {band_id}: sample above scale factor {scale}")
    return BandRaster(band_id=band_id, scale=scale, values=values, scene=scene)


def encode_index(index: IndexRaster) -> bytes:
    values = np.ascontiguousarray(index.values, dtype="<f4")
    name = index.index_name.encode("utf-8")
    header = _INDEX_HEADER.pack(INDEX_MAGIC, FORMAT_VERSION, len(name), index.width, index.height)
    return header + name + values.tobytes()


def decode_index(data: bytes, scene: SceneMeta) -> IndexRaster:
    if len(data) < _INDEX_HEADER.size:
        raise BadRaster(f"index file truncated at {len(data)} bytes")
    magic, version, name_len, width, height = _INDEX_HEADER.unpack_from(data)
    if magic != INDEX_MAGIC:
        raise BadRaster(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise BadRaster(f"unsupported format version {version}")
    expected = _INDEX_HEADER.size + name_len + 4 * width * height
    if len(data) != expected:
        raise BadRaster(f"index payload is {len(data)} bytes, expected {expected}")
    name = data[_INDEX_HEADER.size : _INDEX_HEADER.size + name_len].decode("utf-8")
    values = np.frombuffer(data, dtype="<f4", offset=_INDEX_HEADER.size + name_len).reshape(height, width)
    return IndexRaster(index_name=name, values=values, scene=scene)


# ---------------------------------------------------------------------------
# Band math
# ---------------------------------------------------------------------------


def pair_name(band_a: int, band_b: int) -> str:
    return NDWI_PAIRS.get((band_a, band_b), f"NDWI_{band_a}_{band_b}")


def ndwi(band_a: BandRaster, band_b: BandRaster) -> IndexRaster:
    """Normalized difference (a - b)/(a + b) over reflectance values.

    Pixels where a + b == 0 get :data:`FILL_VALUE`.  Raises
    :class:`ShapeMismatch` or :class:`SceneMismatch` on incompatible
    operands.
    """
    if band_a.values.shape != band_b.values.shape:
        raise ShapeMismatch(
            f"band {band_a.band_id} is {band_a.values.shape}, band {band_b.band_id} is {band_b.values.shape}"
        )
    if band_a.scene.scene_id != band_b.scene.scene_id:
        raise SceneMismatch(f"{band_a.scene.scene_id!r} vs {band_b.scene.scene_id!r}")
    a = band_a.reflectance()
    b = band_b.reflectance()
    total = a + b
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (a - b) / total
    values = np.where(total == 0, FILL_VALUE, ratio).astype(np.float32)
    return IndexRaster(index_name=pair_name(band_a.band_id, band_b.band_id), values=values, scene=band_a.scene)


def crop(raster: BandRaster, bbox: GeoBox) -> BandRaster:
    """Cut the sub-grid covering ``bbox``, rounding outward so partially
    covered pixels are kept.  Raises :class:`NoOverlap` when the boxes are
    disjoint.  The returned raster's scene bbox reflects the actual pixel
    extent, which can be slightly larger than the request."""
    scene_box = raster.scene.bbox
    if scene_box.intersection(bbox) is None:
        raise NoOverlap(f"{bbox.as_tuple()} does not intersect {scene_box.as_tuple()}")
    width, height = raster.width, raster.height
    dx = (scene_box.lon_max - scene_box.lon_min) / width
    dy = (scene_box.lat_max - scene_box.lat_min) / height
    # 1e-9 px of slack keeps exactly aligned boxes from grabbing a neighbor
    x0 = max(0, math.floor((bbox.lon_min - scene_box.lon_min) / dx + 1e-9))
    x1 = min(width, math.ceil((bbox.lon_max - scene_box.lon_min) / dx - 1e-9))
    y0 = max(0, math.floor((scene_box.lat_max - bbox.lat_max) / dy + 1e-9))
    y1 = min(height, math.ceil((scene_box.lat_max - bbox.lat_min) / dy - 1e-9))
    if x0 >= x1 or y0 >= y1:
        raise NoOverlap(f"{bbox.as_tuple()} covers no whole pixel of {scene_box.as_tuple()}")
    cut_box = GeoBox(
        lon_min=scene_box.lon_min + x0 * dx,
        lat_min=scene_box.lat_max - y1 * dy,
        lon_max=scene_box.lon_min + x1 * dx,
        lat_max=scene_box.lat_max - y0 * dy,
    )
    meta = replace(raster.scene, bbox=cut_box)
    return BandRaster(
        band_id=raster.band_id,
        scale=raster.scale,
        values=np.ascontiguousarray(raster.values[y0:y1, x0:x1]),
        scene=meta,
    )
