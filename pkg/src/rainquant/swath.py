"""Core swath data model, geodesy helper, and bit-exact file formats.

All N-dimensional payloads are numpy arrays that are adopted by the
container types and frozen (made read-only) at construction, so every
object in this package is safe to share across threads.  Missing data is
NaN everywhere; sentinel values are never used.

File formats (little-endian throughout):

SWT1 swath file
    magic ``SWT1`` (4 bytes), u32 n_scan, u32 n_pix, u32 n_chan,
    u8 kind (0 = brightness temperature, 1 = rain, 2 = quantile),
    n_chan planes of f32 row-major (scan-major), f32 lat plane,
    f32 lon plane, n_scan f64 scan times.

MSK1 surface-mask file
    magic ``MSK1``, u32 rows, u32 cols, f64 origin lat, f64 origin lon,
    f64 cell size (degrees), u8 classes row-major (0 = ocean, 1 = land).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

EARTH_RADIUS_KM = 6371.0

CHANNEL_NAMES = ("37V", "37H", "89V", "89H")
N_CHANNELS = 4
N_QUANTILES = 99
QUANTILE_LEVELS = np.arange(1, 100) / 100.0
QUANTILE_LEVELS.setflags(write=False)

TB_MIN_K = 50.0
TB_MAX_K = 350.0

OCEAN = 0
LAND = 1

RAIN_PROVENANCES = ("reference", "retrieval", "external-estimator")


class SwathError(Exception):
    """Base class for swath data errors."""


class SwathFormatError(SwathError):
    """A serialized swath/mask file violates its format."""


class BadMagicError(SwathFormatError):
    pass


class TruncatedFileError(SwathFormatError):
    pass


class DimensionMismatchError(SwathFormatError):
    pass


class TileSizeError(SwathError):
    """A tile is too small (or not shaped) for the requested operation."""


def _frozen(values, dtype) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _check_latlon(lat: np.ndarray, lon: np.ndarray) -> None:
    if lat.shape != lon.shape:
        raise ValueError(f"lat shape {lat.shape} != lon shape {lon.shape}")
    if not np.all(np.isfinite(lat)) or not np.all(np.isfinite(lon)):
        raise ValueError("geolocation must be finite")
    if lat.min() < -90.0 or lat.max() > 90.0:
        raise ValueError("latitude outside [-90, 90]")
    if lon.min() < -180.0 or lon.max() >= 180.0:
        raise ValueError("longitude outside [-180, 180)")


@dataclass(frozen=True)
class TbScene:
    """A radiometer swath tile: 4 brightness-temperature planes plus geolocation.

    ``tb`` has shape (4, n_scan, n_pix) in kelvin with fixed channel order
    37V, 37H, 89V, 89H; missing values are NaN; finite values must lie in
    [50, 350] K.  ``scan_time`` is seconds since the epoch, one per scan.
    """

    granule_id: str
    tb: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    scan_time: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tb", _frozen(self.tb, np.float32))
        object.__setattr__(self, "lat", _frozen(self.lat, np.float32))
        object.__setattr__(self, "lon", _frozen(self.lon, np.float32))
        object.__setattr__(self, "scan_time", _frozen(self.scan_time, np.float64))
        if self.tb.ndim != 3 or self.tb.shape[0] != N_CHANNELS:
            raise ValueError(f"tb must be ({N_CHANNELS}, n_scan, n_pix), got {self.tb.shape}")
        n_scan, n_pix = self.tb.shape[1:]
        if n_scan < 1 or n_pix < 1:
            raise ValueError("n_scan and n_pix must be >= 1")
        if self.lat.shape != (n_scan, n_pix):
            raise ValueError("lat/lon shape must match the tb planes")
        _check_latlon(self.lat, self.lon)
        if self.scan_time.shape != (n_scan,):
            raise ValueError("scan_time must have one entry per scan")
        finite = self.tb[np.isfinite(self.tb)]
        if finite.size and (finite.min() < TB_MIN_K or finite.max() > TB_MAX_K):
            raise ValueError(f"finite TB values must lie in [{TB_MIN_K}, {TB_MAX_K}] K")

    @property
    def n_scan(self) -> int:
        return self.tb.shape[1]

    @property
    def n_pix(self) -> int:
        return self.tb.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_scan, self.n_pix)


@dataclass(frozen=True)
class RainField:
    """Per-pixel surface rain rate (mm/hr) on a swath grid.

    Shares geolocation with its TbScene.  ``provenance`` records whether the
    values are the reference target, this package's retrieval, or an
    external estimator.  Non-NaN values must be >= 0.
    """

    granule_id: str
    rain: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    scan_time: np.ndarray
    provenance: str = "reference"

    def __post_init__(self):
        object.__setattr__(self, "rain", _frozen(self.rain, np.float32))
        object.__setattr__(self, "lat", _frozen(self.lat, np.float32))
        object.__setattr__(self, "lon", _frozen(self.lon, np.float32))
        object.__setattr__(self, "scan_time", _frozen(self.scan_time, np.float64))
        if self.rain.ndim != 2:
            raise ValueError(f"rain must be (n_scan, n_pix), got {self.rain.shape}")
        n_scan, n_pix = self.rain.shape
        if n_scan < 1 or n_pix < 1:
            raise ValueError("n_scan and n_pix must be >= 1")
        if self.lat.shape != self.rain.shape:
            raise ValueError("lat/lon shape must match the rain plane")
        _check_latlon(self.lat, self.lon)
        if self.scan_time.shape != (n_scan,):
            raise ValueError("scan_time must have one entry per scan")
        finite = self.rain[np.isfinite(self.rain)]
        if finite.size and finite.min() < 0.0:
            raise ValueError("rain rates must be >= 0 or NaN")
        if self.provenance not in RAIN_PROVENANCES:
            raise ValueError(f"provenance must be one of {RAIN_PROVENANCES}")

    @property
    def n_scan(self) -> int:
        return self.rain.shape[0]

    @property
    def n_pix(self) -> int:
        return self.rain.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.rain.shape


@dataclass(frozen=True)
class QuantileField:
    """Per-pixel vector of 99 rain-rate quantiles at levels 0.01 ... 0.99.

    ``q`` has shape (99, n_scan, n_pix).  Raw model output may violate
    monotonicity and positivity; both are restored by
    :func:`rainquant.quantiles.monotonize`.
    """

    granule_id: str
    q: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    scan_time: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _frozen(self.q, np.float32))
        object.__setattr__(self, "lat", _frozen(self.lat, np.float32))
        object.__setattr__(self, "lon", _frozen(self.lon, np.float32))
        object.__setattr__(self, "scan_time", _frozen(self.scan_time, np.float64))
        if self.q.ndim != 3 or self.q.shape[0] != N_QUANTILES:
            raise ValueError(f"q must be ({N_QUANTILES}, n_scan, n_pix), got {self.q.shape}")
        n_scan, n_pix = self.q.shape[1:]
        if n_scan < 1 or n_pix < 1:
            raise ValueError("n_scan and n_pix must be >= 1")
        if self.lat.shape != (n_scan, n_pix):
            raise ValueError("lat/lon shape must match the quantile planes")
        _check_latlon(self.lat, self.lon)
        if self.scan_time.shape != (n_scan,):
            raise ValueError("scan_time must have one entry per scan")

    @property
    def levels(self) -> np.ndarray:
        return QUANTILE_LEVELS

    @property
    def n_scan(self) -> int:
        return self.q.shape[1]

    @property
    def n_pix(self) -> int:
        return self.q.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_scan, self.n_pix)


@dataclass(frozen=True)
class SurfaceMask:
    """Global land/ocean raster on a regular lat/lon grid.

    The raster must tile [-90, 90] x [-180, 180) exactly: origin at
    (-90, -180) and rows*cell == 180, cols*cell == 360.
    """

    classes: np.ndarray
    lat0: float = -90.0
    lon0: float = -180.0
    cell: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "classes", _frozen(self.classes, np.uint8))
        if self.classes.ndim != 2:
            raise ValueError("classes must be a 2-D raster")
        if self.cell <= 0:
            raise ValueError("cell size must be > 0")
        rows, cols = self.classes.shape
        if abs(self.lat0 + 90.0) > 1e-9 or abs(self.lon0 + 180.0) > 1e-9:
            raise ValueError("mask origin must be (-90, -180) for gapless global coverage")
        if abs(rows * self.cell - 180.0) > 1e-6 or abs(cols * self.cell - 360.0) > 1e-6:
            raise ValueError("mask must cover [-90,90] x [-180,180) with no gaps")
        if not np.isin(self.classes, (OCEAN, LAND)).all():
            raise ValueError("mask classes must be 0 (ocean) or 1 (land)")

    @property
    def rows(self) -> int:
        return self.classes.shape[0]

    @property
    def cols(self) -> int:
        return self.classes.shape[1]


@dataclass(frozen=True)
class GridField:
    """Regular lat/lon grid of (mean value, contributing-pixel count)."""

    lat0: float
    lon0: float
    cell: float
    mean: np.ndarray
    count: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean, np.float64))
        object.__setattr__(self, "count", _frozen(self.count, np.int64))
        if self.cell <= 0:
            raise ValueError("cell size must be > 0")
        if self.mean.ndim != 2 or self.mean.shape != self.count.shape:
            raise ValueError("mean and count must be matching 2-D grids")
        if self.count.min() < 0:
            raise ValueError("counts must be >= 0")
        empty = self.count == 0
        if not np.all(np.isnan(self.mean[empty])):
            raise ValueError("mean must be NaN exactly where count == 0")
        if np.any(np.isnan(self.mean[~empty])):
            raise ValueError("mean must be finite where count > 0")

    @property
    def n_rows(self) -> int:
        return self.mean.shape[0]

    @property
    def n_cols(self) -> int:
        return self.mean.shape[1]

    def cell_center(self, row, col) -> tuple[np.ndarray, np.ndarray]:
        lat = self.lat0 + (np.asarray(row) + 0.5) * self.cell
        lon = self.lon0 + (np.asarray(col) + 0.5) * self.cell
        return lat, lon


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km on a sphere of radius 6371.0 km.

    Broadcasts over array inputs; coordinates are degrees.
    """
    lat1 = np.deg2rad(np.asarray(lat1, dtype=np.float64))
    lon1 = np.deg2rad(np.asarray(lon1, dtype=np.float64))
    lat2 = np.deg2rad(np.asarray(lat2, dtype=np.float64))
    lon2 = np.deg2rad(np.asarray(lon2, dtype=np.float64))
    sdlat = np.sin(0.5 * (lat2 - lat1))
    sdlon = np.sin(0.5 * (lon2 - lon1))
    h = sdlat * sdlat + np.cos(lat1) * np.cos(lat2) * sdlon * sdlon
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    if d.ndim == 0:
        return float(d)
    return d


def crop_to_tile(scene, multiple: int = 16):
    """Crop a scene-like object so both dims are multiples of ``multiple``.

    Trailing rows/columns (highest indices) are dropped.  Raises
    :class:`TileSizeError` if a dimension is smaller than ``multiple``.
    Accepts TbScene, RainField, or QuantileField and returns the same type.
    """
    if multiple < 1:
        raise ValueError("multiple must be >= 1")
    n_scan, n_pix = scene.shape
    new_scan = (n_scan // multiple) * multiple
    new_pix = (n_pix // multiple) * multiple
    if new_scan == 0 or new_pix == 0:
        raise TileSizeError(
            f"tile {n_scan}x{n_pix} is smaller than the required multiple of {multiple}"
        )
    if (new_scan, new_pix) == (n_scan, n_pix):
        return scene
    fields = {
        "lat": scene.lat[:new_scan, :new_pix],
        "lon": scene.lon[:new_scan, :new_pix],
        "scan_time": scene.scan_time[:new_scan],
    }
    if isinstance(scene, TbScene):
        fields["tb"] = scene.tb[:, :new_scan, :new_pix]
    elif isinstance(scene, RainField):
        fields["rain"] = scene.rain[:new_scan, :new_pix]
    elif isinstance(scene, QuantileField):
        fields["q"] = scene.q[:, :new_scan, :new_pix]
    else:
        raise TypeError(f"cannot crop object of type {type(scene).__name__}")
    return replace(scene, **fields)


_SWT_MAGIC = b"SWT1"
_MSK_MAGIC = b"MSK1"
_SWT_HEADER = struct.Struct("<IIIB")

KIND_TB = 0
KIND_RAIN = 1
KIND_QUANTILE = 2

_KIND_BY_TYPE = {TbScene: KIND_TB, RainField: KIND_RAIN, QuantileField: KIND_QUANTILE}
_CHANNELS_BY_KIND = {KIND_TB: N_CHANNELS, KIND_RAIN: 1, KIND_QUANTILE: N_QUANTILES}


def _planes_of(obj) -> np.ndarray:
    if isinstance(obj, TbScene):
        return obj.tb
    if isinstance(obj, RainField):
        return obj.rain[None, :, :]
    if isinstance(obj, QuantileField):
        return obj.q
    raise TypeError(f"not a swath object: {type(obj).__name__}")


def write_swath(obj, path) -> None:
    """Serialize a TbScene, RainField, or QuantileField to an SWT1 file.

    The format does not carry the granule id (taken from the file stem on
    read) nor the rain provenance tag.
    """
    planes = _planes_of(obj)
    n_chan = planes.shape[0]
    kind = _KIND_BY_TYPE[type(obj)]
    blob = bytearray()
    blob += _SWT_MAGIC
    blob += _SWT_HEADER.pack(obj.n_scan, obj.n_pix, n_chan, kind)
    blob += np.ascontiguousarray(planes, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(obj.lat, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(obj.lon, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(obj.scan_time, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def read_swath(path, provenance: str = "reference"):
    """Read an SWT1 file; the concrete type is chosen by the kind byte.

    ``provenance`` applies only to rain files (the tag is not persisted).
    The granule id is the file stem.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != _SWT_MAGIC:
        raise BadMagicError(f"{path}: not an SWT1 file")
    if len(raw) < 4 + _SWT_HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    n_scan, n_pix, n_chan, kind = _SWT_HEADER.unpack_from(raw, 4)
    if kind not in _CHANNELS_BY_KIND:
        raise DimensionMismatchError(f"{path}: unknown kind byte {kind}")
    if n_chan != _CHANNELS_BY_KIND[kind]:
        raise DimensionMismatchError(
            f"{path}: kind {kind} requires {_CHANNELS_BY_KIND[kind]} channels, header says {n_chan}"
        )
    if n_scan < 1 or n_pix < 1:
        raise DimensionMismatchError(f"{path}: empty grid {n_scan}x{n_pix}")
    offset = 4 + _SWT_HEADER.size
    n_grid = n_scan * n_pix
    expected = offset + 4 * n_grid * (n_chan + 2) + 8 * n_scan
    if len(raw) != expected:
        raise TruncatedFileError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    planes = np.frombuffer(raw, dtype="<f4", count=n_chan * n_grid, offset=offset)
    planes = planes.reshape(n_chan, n_scan, n_pix)
    offset += 4 * n_chan * n_grid
    lat = np.frombuffer(raw, dtype="<f4", count=n_grid, offset=offset).reshape(n_scan, n_pix)
    offset += 4 * n_grid
    lon = np.frombuffer(raw, dtype="<f4", count=n_grid, offset=offset).reshape(n_scan, n_pix)
    offset += 4 * n_grid
    scan_time = np.frombuffer(raw, dtype="<f8", count=n_scan, offset=offset)
    granule_id = path.stem
    if kind == KIND_TB:
        return TbScene(granule_id, planes, lat, lon, scan_time)
    if kind == KIND_RAIN:
        return RainField(granule_id, planes[0], lat, lon, scan_time, provenance=provenance)
    return QuantileField(granule_id, planes, lat, lon, scan_time)


def write_mask(mask: SurfaceMask, path) -> None:
    blob = bytearray()
    blob += _MSK_MAGIC
    blob += struct.pack("<II", mask.rows, mask.cols)
    blob += struct.pack("<ddd", mask.lat0, mask.lon0, mask.cell)
    blob += np.ascontiguousarray(mask.classes, dtype=np.uint8).tobytes()
    Path(path).write_bytes(bytes(blob))


def read_mask(path) -> SurfaceMask:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != _MSK_MAGIC:
        raise BadMagicError(f"{path}: not an MSK1 file")
    header = struct.Struct("<IIddd")
    if len(raw) < 4 + header.size:
        raise TruncatedFileError(f"{path}: truncated header")
    rows, cols, lat0, lon0, cell = header.unpack_from(raw, 4)
    expected = 4 + header.size + rows * cols
    if len(raw) != expected:
        raise TruncatedFileError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    classes = np.frombuffer(raw, dtype=np.uint8, count=rows * cols, offset=4 + header.size)
    return SurfaceMask(classes.reshape(rows, cols), lat0, lon0, cell)


def mask_lookup(mask: SurfaceMask, lat, lon):
    """Class of the raster cell containing each point.

    A point exactly on a cell edge belongs to the cell whose lower edge it
    is: index = floor((coord - origin) / cell).  The top latitude edge
    (+90) is claimed by the last row.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    r = np.floor((lat - mask.lat0) / mask.cell).astype(np.int64)
    c = np.floor((lon - mask.lon0) / mask.cell).astype(np.int64)
    r = np.clip(r, 0, mask.rows - 1)
    c = np.clip(c, 0, mask.cols - 1)
    out = mask.classes[r, c]
    if out.ndim == 0:
        return int(out)
    return out


def mask_from_boxes(cell: float, land_boxes=()) -> SurfaceMask:
    """Build a global mask that is ocean except inside the given land boxes.

    Boxes are (lat_min, lat_max, lon_min, lon_max) in degrees; a raster cell
    is land when its center falls inside any box.
    """
    rows = int(round(180.0 / cell))
    cols = int(round(360.0 / cell))
    classes = np.full((rows, cols), OCEAN, dtype=np.uint8)
    lat_c = -90.0 + (np.arange(rows) + 0.5) * cell
    lon_c = -180.0 + (np.arange(cols) + 0.5) * cell
    for lat_min, lat_max, lon_min, lon_max in land_boxes:
        rsel = (lat_c >= lat_min) & (lat_c <= lat_max)
        csel = (lon_c >= lon_min) & (lon_c <= lon_max)
        classes[np.ix_(rsel, csel)] = LAND
    return SurfaceMask(classes, -90.0, -180.0, cell)
