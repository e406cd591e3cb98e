"""Water classification summaries and trend fitting.

A pixel counts as water when its index value is strictly greater than
the threshold (default 0.65); fill pixels are excluded from both the
water count and the total.  Trends are ordinary least squares over
(fractional year, water percent) points, with the earliest date as the
intercept epoch.
"""

from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..errors import GeoNimbusError
from .raster import FILL_VALUE, IndexRaster, SceneMeta, GeoBox

DEFAULT_THRESHOLD = 0.65


class AllFill(GeoNimbusError):
    """Index raster has no defined pixels to classify."""


class DegenerateX(GeoNimbusError):
    """All sample dates are equal; no slope exists."""


@dataclass(frozen=True)
class WaterSummary:
    scene: SceneMeta
    index_name: str
    threshold: float
    water_pixels: int
    total_pixels: int
    water_percent: float

    def to_record(self) -> dict:
        """Flat mapping, one JSON line per scene in summary output files."""
        return {
            "scene_id": self.scene.scene_id,
            "date": self.scene.acquisition_date.isoformat(),
            "path": self.scene.path,
            "row": self.scene.row,
            "bbox": list(self.scene.bbox.as_tuple()),
            "index_name": self.index_name,
            "threshold": self.threshold,
            "water_pixels": self.water_pixels,
            "total_pixels": self.total_pixels,
            "water_percent": self.water_percent,
        }

    def to_line(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def from_record(cls, doc: dict) -> "WaterSummary":
        scene = SceneMeta(
            scene_id=doc["scene_id"],
            acquisition_date=_dt.date.fromisoformat(doc["date"]),
            path=int(doc["path"]),
            row=int(doc["row"]),
            bbox=GeoBox(*doc["bbox"]),
        )
        return cls(
            scene=scene,
            index_name=doc["index_name"],
            threshold=float(doc["threshold"]),
            water_pixels=int(doc["water_pixels"]),
            total_pixels=int(doc["total_pixels"]),
            water_percent=float(doc["water_percent"]),
        )


@dataclass(frozen=True)
class TrendLine:
    slope: float  # percent per year
    intercept: float  # percent at the earliest sample date
    n_points: int


def water_percentage(index: IndexRaster, threshold: float = DEFAULT_THRESHOLD) -> WaterSummary:
    """Classify and count water pixels.  Raises :class:`AllFill` when the
    raster has no defined pixels."""
    defined = index.values[index.values != FILL_VALUE]
    total = int(defined.size)
    if total == 0:
        raise AllFill(f"{index.index_name} over {index.scene.scene_id} has only fill pixels")
    water = int(np.count_nonzero(defined > threshold))
    return WaterSummary(
        scene=index.scene,
        index_name=index.index_name,
        threshold=threshold,
        water_pixels=water,
        total_pixels=total,
        water_percent=100.0 * water / total,
    )


def fractional_year(value) -> float:
    """Calendar date -> year + elapsed fraction (Jan 1 lands on the integer).

    Accepts ``datetime.date``, ISO date strings, or numbers already in
    fractional years.
    """
    if isinstance(value, bool):
        raise TypeError("bool is not a date")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        value = _dt.date.fromisoformat(value)
    if isinstance(value, _dt.datetime):
        value = value.date()
    if isinstance(value, _dt.date):
        year_days = 366 if _dt.date(value.year, 12, 31).timetuple().tm_yday == 366 else 365
        return value.year + (value.timetuple().tm_yday - 1) / year_days
    raise TypeError(f"cannot interpret {value!r} as a date")


def fit_trend(points: Sequence[tuple[object, float]]) -> TrendLine:
    """Least-squares line through (date, water_percent) samples.

    Dates convert to fractional years measured from the earliest sample,
    so the intercept is the fitted percent at that epoch.  Raises
    :class:`DegenerateX` when every date is equal, ``ValueError`` on
    fewer than two points.
    """
    if len(points) < 2:
        raise ValueError(f"need at least 2 points, got {len(points)}")
    xs = np.array([fractional_year(date) for date, _ in points], dtype=np.float64)
    ys = np.array([float(y) for _, y in points], dtype=np.float64)
    xs = xs - xs.min()
    x_mean = xs.mean()
    y_mean = ys.mean()
    var = float(((xs - x_mean) ** 2).sum())
    if var == 0.0 or math.isclose(var, 0.0, abs_tol=1e-18):
        raise DegenerateX("all sample dates are equal")
    slope = float(((xs - x_mean) * (ys - y_mean)).sum()) / var
    intercept = y_mean - slope * x_mean
    return TrendLine(slope=slope, intercept=intercept, n_points=len(points))


def trend_by_region(summaries: Iterable[WaterSummary]) -> dict[tuple[int, int, str], TrendLine]:
    """Fit one trend per (path, row, index_name) group with >= 2 distinct
    dates; groups that cannot support a fit are skipped."""
    groups: dict[tuple[int, int, str], list[WaterSummary]] = {}
    for s in summaries:
        groups.setdefault((s.scene.path, s.scene.row, s.index_name), []).append(s)
    out: dict[tuple[int, int, str], TrendLine] = {}
    for key, members in groups.items():
        dates = {m.scene.acquisition_date for m in members}
        if len(members) < 2 or len(dates) < 2:
            continue
        out[key] = fit_trend([(m.scene.acquisition_date, m.water_percent) for m in members])
    return out
