"""rainquant: quantile rain retrieval from passive-microwave imagery.

A numpy library covering the full desk-scale pipeline: swath data model and
file formats, radar-to-radiometer co-location, synthetic scene generation,
a from-scratch convolutional quantile-regression network trained with the
pinball loss, quantile post-processing into confidence intervals, and a
verification battery (contingency scores, conditional bias/RMSE, coverage,
histograms, density scatters, gridded difference maps, MAE time series).
"""

from rainquant.swath import (
    EARTH_RADIUS_KM,
    LAND,
    OCEAN,
    QUANTILE_LEVELS,
    GridField,
    QuantileField,
    RainField,
    SurfaceMask,
    TbScene,
    crop_to_tile,
    haversine_km,
    mask_from_boxes,
    mask_lookup,
    read_mask,
    read_swath,
    write_mask,
    write_swath,
)

__all__ = [
    "EARTH_RADIUS_KM",
    "LAND",
    "OCEAN",
    "QUANTILE_LEVELS",
    "GridField",
    "QuantileField",
    "RainField",
    "SurfaceMask",
    "TbScene",
    "crop_to_tile",
    "haversine_km",
    "mask_from_boxes",
    "mask_lookup",
    "read_mask",
    "read_swath",
    "write_mask",
    "write_swath",
]

__version__ = "0.1.0"
