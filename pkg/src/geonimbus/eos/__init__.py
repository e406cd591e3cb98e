"""Earth-observation pipeline: raster math, scene archives, and the six
case-study stages."""

from .raster import (
    FILL_VALUE,
    BandRaster,
    GeoBox,
    IndexRaster,
    NoOverlap,
    SceneMeta,
    SceneMismatch,
    ShapeMismatch,
    crop,
    decode_band,
    decode_index,
    encode_band,
    encode_index,
    ndwi,
)
from .scenes import (
    CorruptArchive,
    InvalidSpec,
    MissingBand,
    SourceUnavailable,
    download,
    make_fixture_scene,
    make_fixture_set,
    pack_bundle,
    pack_scene,
    unpack_bundle,
    unpack_scene,
)
from .summary import (
    AllFill,
    DegenerateX,
    TrendLine,
    WaterSummary,
    fit_trend,
    fractional_year,
    trend_by_region,
    water_percentage,
)

__all__ = [
    "AllFill",
    "BandRaster",
    "CorruptArchive",
    "DegenerateX",
    "FILL_VALUE",
    "GeoBox",
    "IndexRaster",
    "InvalidSpec",
    "MissingBand",
    "NoOverlap",
    "SceneMeta",
    "SceneMismatch",
    "ShapeMismatch",
    "SourceUnavailable",
    "TrendLine",
    "WaterSummary",
    "crop",
    "decode_band",
    "decode_index",
    "download",
    "encode_band",
    "encode_index",
    "fit_trend",
    "fractional_year",
    "make_fixture_scene",
    "make_fixture_set",
    "ndwi",
    "pack_bundle",
    "pack_scene",
    "trend_by_region",
    "unpack_bundle",
    "unpack_scene",
    "water_percentage",
]
