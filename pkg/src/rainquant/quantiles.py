"""Post-processing of the 99-quantile output: point estimates, monotone
CDFs, numerical PDFs, and confidence intervals.

The raw network output may cross (quantile j+1 below quantile j) and dip
below zero; :func:`monotonize` repairs both by per-pixel sorting followed
by clamping at zero, preserving the multiset of values.  The per-pixel
CDF is the piecewise-linear interpolant through (value_j, j/100), flat
outside the first/last quantile, so the mass between quantiles 0.01 and
0.99 is exactly 0.98.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from rainquant.swath import QUANTILE_LEVELS, QuantileField, RainField


@dataclass(frozen=True)
class ConfidenceBand:
    """A central confidence interval read off two retrieved quantiles:
    level 0.50 spans quantiles (0.25, 0.75), level 0.90 spans (0.05, 0.95)."""

    level: float
    lower: RainField
    upper: RainField

    def __post_init__(self):
        if self.lower.shape != self.upper.shape:
            raise ValueError("band bounds must share one grid")


def monotonize(qf: QuantileField) -> QuantileField:
    """Sort each pixel's 99 values ascending, then clamp negatives to 0."""
    q = np.sort(qf.q, axis=0)
    q = np.maximum(q, 0.0)
    return replace(qf, q=q)


def _plane(qf: QuantileField, level: float) -> np.ndarray:
    j = int(round(level * 100))
    if j < 1 or j > 99 or abs(level * 100 - j) > 1e-9:
        raise ValueError(f"level {level} is not one of 0.01 ... 0.99")
    return qf.q[j - 1]


def point_estimate(qf: QuantileField, level: float = 0.50) -> RainField:
    """The quantile plane nearest ``level`` as a rain field (median default).

    Expects a monotonized field.
    """
    rain = _plane(qf, level)
    return RainField(qf.granule_id, rain, qf.lat, qf.lon, qf.scan_time,
                     provenance="retrieval")


_BAND_LEVELS = {0.50: (0.25, 0.75), 0.90: (0.05, 0.95)}


def confidence_band(qf: QuantileField, level: float) -> ConfidenceBand:
    """The 50% band (q25, q75) or the 90% band (q5, q95) of a monotonized field."""
    if level not in _BAND_LEVELS:
        raise ValueError(f"supported band levels are {sorted(_BAND_LEVELS)}, got {level}")
    lo, hi = _BAND_LEVELS[level]
    lower = RainField(qf.granule_id, _plane(qf, lo), qf.lat, qf.lon, qf.scan_time,
                      provenance="retrieval")
    upper = RainField(qf.granule_id, _plane(qf, hi), qf.lat, qf.lon, qf.scan_time,
                      provenance="retrieval")
    return ConfidenceBand(level, lower, upper)


def cdf_at(values: np.ndarray, x: float, levels=QUANTILE_LEVELS) -> np.ndarray:
    """CDF of each pixel at ``x``: linear between quantile knots, flat tails.

    ``values`` is (n_levels, ...) monotone along axis 0.  At a tied knot
    (an atom), the CDF jumps to the highest level carrying that value.
    """
    values = np.asarray(values, dtype=np.float64)
    n = len(levels)
    flat = values.reshape(n, -1)
    below = (flat <= x).sum(axis=0)  # index of first knot above x
    out = np.empty(flat.shape[1], dtype=np.float64)
    out[below == 0] = levels[0]
    out[below == n] = levels[-1]
    mid = (below > 0) & (below < n)
    if np.any(mid):
        cols = np.flatnonzero(mid)
        hi = below[cols]
        v_lo = flat[hi - 1, cols]
        v_hi = flat[hi, cols]
        l_lo = levels[hi - 1]
        l_hi = levels[hi]
        span = v_hi - v_lo
        frac = np.where(span > 0, (x - v_lo) / np.where(span > 0, span, 1.0), 0.0)
        out[cols] = l_lo + (l_hi - l_lo) * frac
    return out.reshape(values.shape[1:])


def pdf_from_cdf(qf: QuantileField, edges) -> np.ndarray:
    """Per-pixel density histogram from the quantile-sampled CDF.

    The density over [e_k, e_{k+1}) is (F(e_{k+1}) - F(e_k)) / width with F
    linearly interpolated between quantile knots and flat outside, so bins
    spanning [q_0.01, q_0.99] integrate to 0.98.  Returns
    (n_bins, n_scan, n_pix); expects a monotonized field.
    """
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("edges must be strictly increasing with >= 2 entries")
    cdf = np.stack([cdf_at(qf.q, e) for e in edges])
    widths = np.diff(edges)[:, None, None]
    return np.diff(cdf, axis=0) / widths


def rain_mask(field, threshold: float = 1e-4) -> np.ndarray:
    """Boolean rain/no-rain split: value > threshold; NaN counts as no-rain."""
    values = field.rain if isinstance(field, RainField) else np.asarray(field)
    return values > threshold
