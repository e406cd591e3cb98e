"""
===============================
NDWI, thresholds, and trends
===============================

The raster layer is plain numpy: a normalized difference of two bands
with a fill value where the denominator vanishes, a strict threshold
that counts water pixels, and an ordinary least-squares line over the
per-scene percentages.
"""

import datetime

import numpy as np

from geonimbus.eos.raster import (
    FILL_VALUE,
    BandRaster,
    GeoBox,
    SceneMeta,
    crop,
    ndwi,
)
from geonimbus.eos.summary import fit_trend, water_percentage

meta = SceneMeta(
    scene_id="DEMO_SCENE",
    acquisition_date=datetime.date(2021, 3, 14),
    path=27,
    row=46,
    bbox=GeoBox(0.0, 0.0, 4.0, 4.0),
)


def band(values, band_id):
    return BandRaster(band_id=band_id, scale=10000,
                      values=np.asarray(values, dtype=np.uint16), scene=meta)


# ---------------------------------------------------------------------------
# NDWI = (green - nir) / (green + nir); zero-sum pixels become FILL
# ---------------------------------------------------------------------------

green = band([[9000, 2000, 0, 5000]] * 4, band_id=4)
nir = band([[1000, 6000, 0, 5000]] * 4, band_id=7)
index = ndwi(green, nir)
print("NDWI row:", np.array2string(index.values[0], precision=3))
print(f"zero-sum pixel became the fill value: {index.values[0, 2] == FILL_VALUE}")

# antisymmetry: swapping the bands flips the sign on every defined pixel
flipped = ndwi(nir, green)
defined = index.values != FILL_VALUE
print(f"antisymmetric: {np.allclose(index.values[defined], -flipped.values[defined])}")

# ---------------------------------------------------------------------------
# water percentage counts strictly-above-threshold pixels, fill excluded
# ---------------------------------------------------------------------------

summary = water_percentage(index, threshold=0.65)
print(f"water: {summary.water_pixels}/{summary.total_pixels} px "
      f"= {summary.water_percent:.2f}% at threshold {summary.threshold}")

# ---------------------------------------------------------------------------
# cropping rounds outward so the requested box is always covered
# ---------------------------------------------------------------------------

sub = crop(green, GeoBox(1.4, 1.4, 2.6, 2.6))
print(f"crop of 4x4 to a 1.2-unit box keeps a {sub.values.shape} window "
      f"covering {sub.scene.bbox.as_tuple()}")

# ---------------------------------------------------------------------------
# the case-study trend: 57.20% in 2021 falling to 19.95% in 2024
# ---------------------------------------------------------------------------

line = fit_trend([(2021, 57.20), (2024, 19.95)])
print(f"two-point slope: {line.slope:.4f} %/yr (expected -12.4167)")

years = [(datetime.date(2013 + i, 1, 1), 55.0 - 4.0 * i) for i in range(8)]
line = fit_trend(years)
print(f"eight-year synthetic series: slope {line.slope:+.3f} %/yr, "
      f"intercept {line.intercept:.2f}% at the first sample")
