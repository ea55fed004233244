"""Spatial and temporal co-location of reference rain with swath pixels.

Point samples (radar pixels, mosaic cell centers) are radius-averaged onto
radiometer pixel centers; gridded ground mosaics are matched in time and
converted from 5-minute accumulations to rates; point estimates are
aggregated onto regular lat/lon grids for difference maps.

The radius query runs on a fixed lat/lon bucket grid whose bucket size is
at least the query radius converted to degrees at the worst-case latitude
of the data, so a 3x3 bucket neighborhood is guaranteed to contain every
candidate.  The indexed path returns exactly the same contributor sets and
means as a brute-force all-pairs scan.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rainquant.swath import EARTH_RADIUS_KM, GridField, RainField, TbScene, haversine_km


@dataclass(frozen=True)
class PointSample:
    """One geolocated rain observation (mm/hr) at a point in time."""

    lat: float
    lon: float
    value: float
    time: float = 0.0


@dataclass(frozen=True)
class MosaicFrame:
    """One time slice of a ground-radar mosaic on a regular lat/lon grid.

    ``acc`` holds 5-minute accumulations in mm (NaN where missing) and
    ``quality`` per-cell reliability in percent [0, 100].
    """

    acc: np.ndarray
    quality: np.ndarray
    lat0: float
    lon0: float
    cell: float
    time: float

    def __post_init__(self):
        acc = np.asarray(self.acc, dtype=np.float32)
        quality = np.asarray(self.quality, dtype=np.uint8)
        acc.setflags(write=False)
        quality.setflags(write=False)
        object.__setattr__(self, "acc", acc)
        object.__setattr__(self, "quality", quality)
        if self.acc.ndim != 2 or self.acc.shape != self.quality.shape:
            raise ValueError("acc and quality must be matching 2-D grids")
        if self.cell <= 0:
            raise ValueError("cell size must be > 0")
        finite = self.acc[np.isfinite(self.acc)]
        if finite.size and finite.min() < 0:
            raise ValueError("accumulations must be >= 0 or NaN")
        if self.quality.max(initial=0) > 100:
            raise ValueError("quality must lie in [0, 100]")

    @property
    def rows(self) -> int:
        return self.acc.shape[0]

    @property
    def cols(self) -> int:
        return self.acc.shape[1]

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        lat = self.lat0 + (np.arange(self.rows) + 0.5) * self.cell
        lon = self.lon0 + (np.arange(self.cols) + 0.5) * self.cell
        return lat, lon


def _sample_arrays(samples):
    """Accept a sequence of PointSample or a (lat, lon, value) array tuple."""
    if isinstance(samples, tuple) and len(samples) in (3, 4):
        lat, lon, val = samples[0], samples[1], samples[2]
        return (
            np.asarray(lat, dtype=np.float64).ravel(),
            np.asarray(lon, dtype=np.float64).ravel(),
            np.asarray(val, dtype=np.float64).ravel(),
        )
    lat = np.array([s.lat for s in samples], dtype=np.float64)
    lon = np.array([s.lon for s in samples], dtype=np.float64)
    val = np.array([s.value for s in samples], dtype=np.float64)
    return lat, lon, val


class _BucketIndex:
    """Fixed lat/lon bucket grid for radius queries.

    Row height is the radius in latitude degrees; column width is the
    radius in longitude degrees at the largest |lat| seen in the data
    (columns wrap around the antimeridian).  When that latitude is too
    close to a pole for a finite width, the index degenerates to one
    column, which stays correct (it just prunes less).
    """

    def __init__(self, lat, lon, radius_km, extra_lat):
        self.lat = lat
        self.lon = lon
        theta = radius_km / EARTH_RADIUS_KM
        max_abs_lat = 0.0
        if lat.size:
            max_abs_lat = float(np.abs(lat).max())
        if extra_lat.size:
            max_abs_lat = max(max_abs_lat, float(np.abs(extra_lat).max()))
        self.row_h = np.degrees(theta)
        cos_phi = np.cos(np.radians(max_abs_lat))
        s = np.sin(theta / 2.0)
        if cos_phi <= s:
            self.n_cols = 1
            self.col_w = 360.0
        else:
            self.col_w = np.degrees(2.0 * np.arcsin(s / cos_phi))
            self.n_cols = max(1, int(np.floor(360.0 / self.col_w)))
            self.col_w = 360.0 / self.n_cols
        self.n_rows = max(1, int(np.ceil(180.0 / self.row_h)))
        rows = np.floor((lat + 90.0) / self.row_h).astype(np.int64)
        rows = np.clip(rows, 0, self.n_rows - 1)
        cols = np.floor((lon + 180.0) / self.col_w).astype(np.int64) % self.n_cols
        order = np.argsort(rows * self.n_cols + cols, kind="stable")
        keys = (rows * self.n_cols + cols)[order]
        uniq, starts = np.unique(keys, return_index=True)
        self._order = order
        self._buckets = {int(k): (int(s), int(e)) for k, s, e in
                         zip(uniq, starts, np.append(starts[1:], keys.size))}

    def candidates(self, lat, lon):
        r0 = int(np.floor((lat + 90.0) / self.row_h))
        c0 = int(np.floor((lon + 180.0) / self.col_w)) % self.n_cols
        chunks = []
        if self.n_cols <= 3:
            col_range = range(self.n_cols)
        else:
            col_range = ((c0 - 1) % self.n_cols, c0, (c0 + 1) % self.n_cols)
        for r in range(max(r0 - 1, 0), min(r0 + 1, self.n_rows - 1) + 1):
            base = r * self.n_cols
            for c in col_range:
                hit = self._buckets.get(base + c)
                if hit is not None:
                    chunks.append(self._order[hit[0]:hit[1]])
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(chunks)


def radius_query(sample_lat, sample_lon, target_lat, target_lon,
                 radius_km=5.0, method="index"):
    """Indices of samples within ``radius_km`` (inclusive) of each target.

    Returns a list of sorted int arrays, one per target pixel (targets in
    row-major order for 2-D inputs).  ``method`` is "index" (bucket grid)
    or "brute" (all-pairs scan); both produce identical sets.
    """
    if radius_km <= 0:
        raise ValueError("radius_km must be > 0")
    slat = np.asarray(sample_lat, dtype=np.float64).ravel()
    slon = np.asarray(sample_lon, dtype=np.float64).ravel()
    tlat = np.asarray(target_lat, dtype=np.float64).ravel()
    tlon = np.asarray(target_lon, dtype=np.float64).ravel()
    out = []
    if method == "brute":
        for la, lo in zip(tlat, tlon):
            d = haversine_km(la, lo, slat, slon)
            out.append(np.flatnonzero(d <= radius_km))
        return out
    if method != "index":
        raise ValueError(f"unknown method {method!r}")
    index = _BucketIndex(slat, slon, radius_km, extra_lat=tlat)
    for la, lo in zip(tlat, tlon):
        cand = index.candidates(la, lo)
        if cand.size == 0:
            out.append(cand)
            continue
        d = haversine_km(la, lo, slat[cand], slon[cand])
        hits = cand[d <= radius_km]
        hits.sort()
        out.append(hits)
    return out


def radius_mean(samples, target_lat, target_lon, radius_km=5.0, method="index"):
    """Mean sample value within ``radius_km`` of each target pixel center.

    NaN samples are dropped before the query; pixels with no contributor
    are NaN.  Output shape follows ``target_lat``.
    """
    slat, slon, sval = _sample_arrays(samples)
    keep = ~np.isnan(sval)
    slat, slon, sval = slat[keep], slon[keep], sval[keep]
    tlat = np.asarray(target_lat, dtype=np.float64)
    hits = radius_query(slat, slon, tlat, target_lon, radius_km, method=method)
    out = np.full(tlat.size, np.nan)
    for i, idx in enumerate(hits):
        if idx.size:
            out[i] = np.mean(sval[idx])
    return out.reshape(tlat.shape)


def colocate_radius_mean(samples, scene: TbScene, radius_km=5.0,
                         method="index") -> RainField:
    """Radius-average point samples onto a scene's pixel grid.

    Each pixel gets the arithmetic mean of all sample values within
    ``radius_km`` (inclusive) of its center; empty neighborhoods are NaN.
    """
    rain = radius_mean(samples, scene.lat, scene.lon, radius_km, method=method)
    return RainField(scene.granule_id, rain.astype(np.float32), scene.lat,
                     scene.lon, scene.scan_time, provenance="reference")


def overpass_mid_time(scene) -> float:
    """Middle time of an overpass: mean of first and last scan times."""
    return 0.5 * (float(scene.scan_time[0]) + float(scene.scan_time[-1]))


def nearest_time_frame(frames, overpass_mid: float) -> MosaicFrame:
    """The frame minimizing |frame time - overpass_mid|; ties go earlier.

    ``frames`` must be non-empty and sorted by time.
    """
    if len(frames) == 0:
        raise ValueError("no mosaic frames to match")
    times = np.array([f.time for f in frames], dtype=np.float64)
    if np.any(np.diff(times) < 0):
        raise ValueError("frames must be sorted by time")
    i = int(np.searchsorted(times, overpass_mid))
    best = max(i - 1, 0)
    if i < len(frames) and abs(times[i] - overpass_mid) < abs(times[best] - overpass_mid):
        best = i
    return frames[best]


def mosaic_to_rate(frame: MosaicFrame, quality_min: float = 80.0) -> np.ndarray:
    """Convert 5-minute accumulations (mm) to rates (mm/hr): rate = acc * 12.

    Cells with quality below ``quality_min`` (or NaN accumulation) are NaN.
    """
    rate = frame.acc.astype(np.float64) * 12.0
    rate[frame.quality < quality_min] = np.nan
    return rate


def mosaic_points(frame: MosaicFrame, quality_min: float = 80.0):
    """Mosaic cells as point samples at cell centers: (lat, lon, rate) arrays.

    Cells failing the quality threshold or with NaN accumulation are dropped.
    """
    rate = mosaic_to_rate(frame, quality_min)
    lat_c, lon_c = frame.cell_centers()
    lat = np.repeat(lat_c, frame.cols)
    lon = np.tile(lon_c, frame.rows)
    val = rate.ravel()
    keep = ~np.isnan(val)
    return lat[keep], lon[keep], val[keep]


def grid_average(values, lat, lon, cell_deg=1.0, min_value=1e-3) -> GridField:
    """Average geolocated pixel values onto a global regular grid.

    Only pixels with value > ``min_value`` contribute (pass ``None`` to
    keep every finite value, e.g. for difference fields).  Cells with no
    contributor have count 0 and NaN mean.
    """
    if cell_deg <= 0:
        raise ValueError("cell_deg must be > 0")
    values = np.asarray(values, dtype=np.float64).ravel()
    lat = np.asarray(lat, dtype=np.float64).ravel()
    lon = np.asarray(lon, dtype=np.float64).ravel()
    n_rows = int(round(180.0 / cell_deg))
    n_cols = int(round(360.0 / cell_deg))
    keep = ~np.isnan(values)
    if min_value is not None:
        keep &= values > min_value
    values, lat, lon = values[keep], lat[keep], lon[keep]
    r = np.clip(np.floor((lat + 90.0) / cell_deg).astype(np.int64), 0, n_rows - 1)
    c = np.clip(np.floor((lon + 180.0) / cell_deg).astype(np.int64), 0, n_cols - 1)
    flat = r * n_cols + c
    count = np.bincount(flat, minlength=n_rows * n_cols).astype(np.int64)
    total = np.bincount(flat, weights=values, minlength=n_rows * n_cols)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count
    mean[count == 0] = np.nan
    return GridField(-90.0, -180.0, cell_deg,
                     mean.reshape(n_rows, n_cols), count.reshape(n_rows, n_cols))


def overpass_coverage(scene, box) -> int:
    """Number of scene pixel centers inside the closed lat/lon box.

    ``box`` is (lat_min, lat_max, lon_min, lon_max).
    """
    lat_min, lat_max, lon_min, lon_max = box
    if lat_min > lat_max or lon_min > lon_max:
        raise ValueError("box must be (lat_min, lat_max, lon_min, lon_max)")
    inside = (scene.lat >= lat_min) & (scene.lat <= lat_max) \
        & (scene.lon >= lon_min) & (scene.lon <= lon_max)
    return int(inside.sum())


_MOS_MAGIC = b"MOS1"


def write_mosaic(frame: MosaicFrame, path) -> None:
    import struct

    blob = bytearray()
    blob += _MOS_MAGIC
    blob += struct.pack("<II", frame.rows, frame.cols)
    blob += struct.pack("<dddd", frame.lat0, frame.lon0, frame.cell, frame.time)
    blob += np.ascontiguousarray(frame.acc, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(frame.quality, dtype=np.uint8).tobytes()
    Path(path).write_bytes(bytes(blob))


def read_mosaic(path) -> MosaicFrame:
    import struct

    from rainquant.swath import BadMagicError, TruncatedFileError

    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != _MOS_MAGIC:
        raise BadMagicError(f"{path}: not a MOS1 file")
    header = struct.Struct("<IIdddd")
    if len(raw) < 4 + header.size:
        raise TruncatedFileError(f"{path}: truncated header")
    rows, cols, lat0, lon0, cell, time = header.unpack_from(raw, 4)
    expected = 4 + header.size + rows * cols * 5
    if len(raw) != expected:
        raise TruncatedFileError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    off = 4 + header.size
    acc = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
    off += 4 * rows * cols
    quality = np.frombuffer(raw, dtype=np.uint8, count=rows * cols, offset=off)
    return MosaicFrame(acc, quality.reshape(rows, cols), lat0, lon0, cell, time)


def write_grid_csv(grid: GridField, path) -> None:
    """Export a GridField as CSV: row, col, lat_center, lon_center, mean, count.

    Only nonempty cells are written.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "lat_center", "lon_center", "mean", "count"])
        rows, cols = np.nonzero(grid.count)
        lat, lon = grid.cell_center(rows, cols)
        for r, c, la, lo in zip(rows, cols, lat, lon):
            w.writerow([r, c, f"{la:.6f}", f"{lo:.6f}",
                        repr(float(grid.mean[r, c])), int(grid.count[r, c])])
