"""Scene selection, dataset splitting, input normalization, and a
calibrated synthetic scene generator that stands in for real swath
archives at desk scale.

The generator draws rain fields as sums of rotated elliptical Gaussian
cells, then maps rain to brightness temperatures with a monotone,
analytically invertible forward model

    TB_ch = TB0_ch + land_offset_ch - a_ch * rain^b + noise(0, sigma_ch)

clamped to the physical TB range.  The scattering-driven depression is
stronger at 89 GHz than at 37 GHz (a_89 > a_37), so the high-frequency
channels carry most of the rain signal.  Everything is deterministic
given (config, seed): scene i uses an rng seeded with (seed, i).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from rainquant.swath import (
    CHANNEL_NAMES,
    TB_MAX_K,
    TB_MIN_K,
    RainField,
    SurfaceMask,
    TbScene,
    mask_lookup,
)

SCAN_PERIOD_S = 1.8


@dataclass(frozen=True)
class SceneSelectionRule:
    """Keep scenes with enough rainy pixels or enough extreme pixels."""

    light_thresh: float = 0.1
    light_count: int = 100
    heavy_thresh: float = 100.0
    heavy_count: int = 10

    def __post_init__(self):
        if self.light_thresh <= 0 or self.heavy_thresh <= 0:
            raise ValueError("thresholds must be > 0")
        if self.light_count < 1 or self.heavy_count < 1:
            raise ValueError("counts must be >= 1")


def select_scene(rain: RainField | np.ndarray, rule: SceneSelectionRule = SceneSelectionRule()) -> bool:
    """True iff the scene has >= light_count pixels above light_thresh or
    >= heavy_count pixels above heavy_thresh.  NaN pixels count as no-rain."""
    values = rain.rain if isinstance(rain, RainField) else np.asarray(rain)
    light = int(np.sum(values > rule.light_thresh))
    heavy = int(np.sum(values > rule.heavy_thresh))
    return light >= rule.light_count or heavy >= rule.heavy_count


def split_dataset(scenes, fractions=(0.7, 0.15, 0.15), seed=0):
    """Deterministic shuffle-and-partition into train/val/test.

    Fractions must sum to 1.  The partition is disjoint and exhaustive;
    the test split must never feed normalization or training statistics.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no scenes to split")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(scenes)
    order = np.random.default_rng(seed).permutation(n)
    b1 = int(round(fractions[0] * n))
    b2 = int(round((fractions[0] + fractions[1]) * n))
    b2 = min(max(b2, b1), n)
    return {
        "train": [scenes[i] for i in order[:b1]],
        "val": [scenes[i] for i in order[b1:b2]],
        "test": [scenes[i] for i in order[b2:]],
    }


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic scene generator.

    All values are artifact calibration, chosen so that generated scenes
    pass the selection rule with high probability, the rain -> TB map is
    invertible, and the 89 GHz depression dominates.
    """

    size: tuple[int, int] = (64, 64)
    pixel_km: float = 5.0
    cells_mean: float = 5.0
    peak_log_mean: float = 1.1
    peak_log_sigma: float = 0.7
    cell_radius_km: tuple[float, float] = (10.0, 35.0)
    tb0: tuple[float, float, float, float] = (270.0, 265.0, 280.0, 275.0)
    depression: tuple[float, float, float, float] = (4.0, 4.0, 12.0, 12.0)
    depression_exp: float = 0.6
    noise_std: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    land_offset: tuple[float, float, float, float] = (0.0, 10.0, 0.0, 10.0)
    domain: tuple[float, float, float, float] = (35.0, 55.0, -10.0, 15.0)
    time_range: tuple[float, float] = (1546300800.0, 1577836800.0)
    seed: int = 0

    def __post_init__(self):
        if self.size[0] < 1 or self.size[1] < 1:
            raise ValueError("size must be positive")
        if self.pixel_km <= 0 or self.cells_mean < 0:
            raise ValueError("pixel_km must be > 0 and cells_mean >= 0")
        if self.cell_radius_km[0] <= 0 or self.cell_radius_km[1] < self.cell_radius_km[0]:
            raise ValueError("cell_radius_km must be a positive (lo, hi) range")
        if any(s < 0 for s in self.noise_std):
            raise ValueError("noise std must be >= 0")
        if self.depression_exp <= 0:
            raise ValueError("depression_exp must be > 0")


def rain_from_cells(shape, cells) -> np.ndarray:
    """Sum of rotated elliptical Gaussian cells on a pixel grid.

    ``cells`` is an iterable of (row, col, peak, sigma_row_px,
    sigma_col_px, theta).  The result is clamped at 0.
    """
    n_scan, n_pix = shape
    rows = np.arange(n_scan, dtype=np.float64)[:, None]
    cols = np.arange(n_pix, dtype=np.float64)[None, :]
    out = np.zeros(shape, dtype=np.float64)
    for row, col, peak, s_row, s_col, theta in cells:
        dy = rows - row
        dx = cols - col
        ct, st = math.cos(theta), math.sin(theta)
        u = dy * ct + dx * st
        v = -dy * st + dx * ct
        out += peak * np.exp(-0.5 * ((u / s_row) ** 2 + (v / s_col) ** 2))
    return np.maximum(out, 0.0)


def _scene_geolocation(cfg: SynthConfig, rng):
    n_scan, n_pix = cfg.size
    lat_min, lat_max, lon_min, lon_max = cfg.domain
    dlat = cfg.pixel_km / 111.195
    lat0 = rng.uniform(lat_min, max(lat_min, lat_max - n_scan * dlat))
    mid_lat = lat0 + 0.5 * n_scan * dlat
    dlon = cfg.pixel_km / (111.195 * math.cos(math.radians(mid_lat)))
    lon0 = rng.uniform(lon_min, max(lon_min, lon_max - n_pix * dlon))
    lat = lat0 + np.arange(n_scan)[:, None] * dlat + np.zeros((1, n_pix))
    lon = lon0 + np.arange(n_pix)[None, :] * dlon + np.zeros((n_scan, 1))
    t0 = rng.uniform(*cfg.time_range)
    scan_time = t0 + np.arange(n_scan) * SCAN_PERIOD_S
    return lat, lon, scan_time


def synth_rain(cfg: SynthConfig, rng, granule_id="synth") -> RainField:
    """Draw one synthetic reference rain field.

    Cell count is Poisson(cells_mean); peaks are lognormal; cell radii are
    uniform in ``cell_radius_km`` and converted to pixels.  Statistics are
    fully reproducible given the rng state.
    """
    n_scan, n_pix = cfg.size
    lat, lon, scan_time = _scene_geolocation(cfg, rng)
    n_cells = rng.poisson(cfg.cells_mean)
    cells = []
    for _ in range(n_cells):
        row = rng.uniform(0, n_scan - 1)
        col = rng.uniform(0, n_pix - 1)
        peak = rng.lognormal(cfg.peak_log_mean, cfg.peak_log_sigma)
        s_row = rng.uniform(*cfg.cell_radius_km) / cfg.pixel_km
        s_col = rng.uniform(*cfg.cell_radius_km) / cfg.pixel_km
        theta = rng.uniform(0, math.pi)
        cells.append((row, col, peak, s_row, s_col, theta))
    rain = rain_from_cells((n_scan, n_pix), cells)
    return RainField(granule_id, rain.astype(np.float32), lat, lon, scan_time,
                     provenance="reference")


def tb_forward(rain_values, is_land, cfg: SynthConfig) -> np.ndarray:
    """Noise-free forward model: 4 TB planes from rain and surface class."""
    rain = np.nan_to_num(np.asarray(rain_values, dtype=np.float64), nan=0.0)
    planes = np.empty((4,) + rain.shape, dtype=np.float64)
    for ch in range(4):
        tb = cfg.tb0[ch] + cfg.land_offset[ch] * is_land \
            - cfg.depression[ch] * rain ** cfg.depression_exp
        planes[ch] = tb
    return planes


def tb_invert(tb_values, is_land, cfg: SynthConfig, channel: int) -> np.ndarray:
    """Closed-form inverse of the noise-free forward model for one channel."""
    base = cfg.tb0[channel] + cfg.land_offset[channel] * np.asarray(is_land)
    depression = (base - np.asarray(tb_values, dtype=np.float64)) / cfg.depression[channel]
    return np.maximum(depression, 0.0) ** (1.0 / cfg.depression_exp)


def synth_tb(rain: RainField, mask: SurfaceMask, cfg: SynthConfig, rng) -> TbScene:
    """Brightness temperatures for a rain field: forward model plus noise,
    clamped to the physical TB range."""
    is_land = mask_lookup(mask, rain.lat, rain.lon).astype(np.float64)
    planes = tb_forward(rain.rain, is_land, cfg)
    for ch in range(4):
        if cfg.noise_std[ch] > 0:
            planes[ch] += rng.normal(0.0, cfg.noise_std[ch], size=rain.shape)
    planes = np.clip(planes, TB_MIN_K, TB_MAX_K)
    return TbScene(rain.granule_id, planes.astype(np.float32), rain.lat, rain.lon,
                   rain.scan_time)


def synth_scene(cfg: SynthConfig, mask: SurfaceMask, seed, index,
                granule_id=None) -> tuple[TbScene, RainField]:
    """Scene ``index`` of the dataset for ``seed``: rng is seeded (seed, index)."""
    rng = np.random.default_rng([seed, index])
    gid = granule_id if granule_id is not None else f"synth-{index:05d}"
    rain = synth_rain(cfg, rng, granule_id=gid)
    scene = synth_tb(rain, mask, cfg, rng)
    return scene, rain


@dataclass(frozen=True)
class Normalizer:
    """Per-channel standardization statistics computed on the train split."""

    mean: tuple[float, float, float, float]
    std: tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.mean) != 4 or len(self.std) != 4:
            raise ValueError("need one mean/std per channel")
        if any(s <= 0 for s in self.std):
            raise ValueError("channel std must be > 0")

    def to_dict(self):
        return {"mean": list(self.mean), "std": list(self.std),
                "channels": list(CHANNEL_NAMES)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["mean"]), tuple(d["std"]))


def fit_normalizer(scenes) -> Normalizer:
    """Per-channel mean/std (population) over the pixels of >= 2 scenes."""
    total = np.zeros(4)
    total_sq = np.zeros(4)
    count = np.zeros(4)
    n_scenes = 0
    for scene in scenes:
        n_scenes += 1
        tb = scene.tb.astype(np.float64)
        valid = np.isfinite(tb)
        total += np.where(valid, tb, 0.0).sum(axis=(1, 2))
        total_sq += np.where(valid, tb * tb, 0.0).sum(axis=(1, 2))
        count += valid.sum(axis=(1, 2))
    if n_scenes < 2:
        raise ValueError("need at least 2 scenes to fit a normalizer")
    if np.any(count == 0):
        raise ValueError("a channel has no valid pixels")
    mean = total / count
    var = total_sq / count - mean * mean
    if np.any(var < 1e-12):
        bad = CHANNEL_NAMES[int(np.argmin(var))]
        raise ValueError(f"zero-variance channel {bad}: cannot standardize")
    std = np.sqrt(var)
    return Normalizer(tuple(mean.tolist()), tuple(std.tolist()))


def apply_normalizer(scene: TbScene, norm: Normalizer) -> np.ndarray:
    """Standardized (4, n_scan, n_pix) float32 planes."""
    mean = np.asarray(norm.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(norm.std, dtype=np.float32)[:, None, None]
    return ((scene.tb - mean) / std).astype(np.float32)


@dataclass
class DatasetManifest:
    """Listing of scene files, split assignment, and build parameters."""

    seed: int
    synth: SynthConfig
    selection: SceneSelectionRule
    fractions: tuple[float, float, float]
    normalizer: Normalizer
    scenes: list = field(default_factory=list)
    mask_path: str | None = None
    n_generated: int = 0

    def to_json(self) -> str:
        doc = {
            "format": "rainquant-dataset-v1",
            "seed": self.seed,
            "synth": asdict(self.synth),
            "selection": asdict(self.selection),
            "fractions": list(self.fractions),
            "normalizer": self.normalizer.to_dict(),
            "mask_path": self.mask_path,
            "n_generated": self.n_generated,
            "scenes": self.scenes,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        if doc.get("format") != "rainquant-dataset-v1":
            raise ValueError("not a rainquant dataset manifest")
        synth_doc = dict(doc["synth"])
        for key in ("size", "cell_radius_km", "tb0", "depression", "noise_std",
                    "land_offset", "domain", "time_range"):
            synth_doc[key] = tuple(synth_doc[key])
        return cls(
            seed=doc["seed"],
            synth=SynthConfig(**synth_doc),
            selection=SceneSelectionRule(**doc["selection"]),
            fractions=tuple(doc["fractions"]),
            normalizer=Normalizer.from_dict(doc["normalizer"]),
            scenes=doc["scenes"],
            mask_path=doc.get("mask_path"),
            n_generated=doc.get("n_generated", 0),
        )

    def split_records(self, split: str) -> list:
        return [rec for rec in self.scenes if rec["split"] == split]


def load_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_json(Path(path).read_text())
