"""Verification battery: contingency tables and skill scores, conditional
bias/RMSE, false-alarm/missed-detection statistics, confidence-interval
coverage, intensity histograms, 2-D density scatters with regression,
gridded difference maps, and MAE time series, each stratifiable by land/
ocean class.

Conventions: the reference sits on rows of the 2x2 contingency table and
the estimator on columns; rain means value > threshold (1e-4 mm/hr by
default) and NaN on either side excludes the pixel.  Undefined scores are
NaN, never 0 or an error, because degenerate categories are expected on
small tiles.  Every table exports as CSV mirroring the layout it is
usually reported in.
"""

from __future__ import annotations

import csv
import datetime
from dataclasses import dataclass

import numpy as np

from rainquant.colocation import overpass_mid_time
from rainquant.quantiles import point_estimate, rain_mask
from rainquant.swath import GridField, QuantileField, RainField, SurfaceMask, mask_lookup

DEFAULT_RAIN_THRESHOLD = 1e-4
DEFAULT_COVERAGE_BINS = (0.0, 0.1, 1.0, 10.0, np.inf)


def _values(field) -> np.ndarray:
    return field.rain if isinstance(field, RainField) else np.asarray(field)


@dataclass(frozen=True)
class ContingencyTable:
    """Rain/no-rain cross-classification; reference on rows, estimator on
    columns.  Counts may be raw pixel counts or percentages (scores are
    scale-invariant)."""

    tp: float
    fn: float
    fp: float
    tn: float
    threshold: float = DEFAULT_RAIN_THRESHOLD

    @property
    def total(self) -> float:
        return self.tp + self.fn + self.fp + self.tn

    def as_percent(self) -> "ContingencyTable":
        if self.total == 0:
            raise ValueError("empty contingency table")
        s = 100.0 / self.total
        return ContingencyTable(self.tp * s, self.fn * s, self.fp * s, self.tn * s,
                                self.threshold)


def contingency(est, ref, threshold: float = DEFAULT_RAIN_THRESHOLD) -> ContingencyTable:
    """Count TP/FN/FP/TN between estimator and reference.

    Pixels where either side is NaN are excluded; raises ValueError when no
    co-located pixel remains.
    """
    est_v = _values(est)
    ref_v = _values(ref)
    if est_v.shape != ref_v.shape:
        raise ValueError(f"shape mismatch: est {est_v.shape}, ref {ref_v.shape}")
    valid = ~(np.isnan(est_v) | np.isnan(ref_v))
    if not valid.any():
        raise ValueError("no co-located pixels")
    er = rain_mask(est_v, threshold) & valid
    rr = rain_mask(ref_v, threshold) & valid
    tp = int(np.sum(rr & er))
    fn = int(np.sum(rr & ~er & valid))
    fp = int(np.sum(~rr & er & valid))
    tn = int(np.sum(~rr & ~er & valid))
    return ContingencyTable(tp, fn, fp, tn, threshold)


@dataclass(frozen=True)
class ScoreSet:
    """POD = TP/(TP+FN), FAR = FP/(FP+TP), precision = TP/(TP+FP),
    F1 = 2*precision*POD/(precision+POD); NaN where the denominator is 0."""

    pod: float
    far: float
    precision: float
    f1: float


def _ratio(num, den) -> float:
    return num / den if den > 0 else float("nan")


def scores(tbl: ContingencyTable) -> ScoreSet:
    pod = _ratio(tbl.tp, tbl.tp + tbl.fn)
    far = _ratio(tbl.fp, tbl.fp + tbl.tp)
    precision = _ratio(tbl.tp, tbl.tp + tbl.fp)
    denom = precision + pod
    f1 = 2.0 * precision * pod / denom if denom > 0 else float("nan")
    return ScoreSet(pod, far, precision, f1)


@dataclass(frozen=True)
class BiasRmse:
    """Bias = mean(ref - est) and RMSE over true-positive pixels."""

    bias: float
    rmse: float
    n: int


def conditional_bias_rmse(est, ref, threshold: float = DEFAULT_RAIN_THRESHOLD) -> BiasRmse:
    """Bias/RMSE of the estimator on mutual-rain (true positive) pixels.

    The sign convention is reference minus estimator: a positive bias means
    the estimator underestimates.
    """
    est_v = _values(est)
    ref_v = _values(ref)
    if est_v.shape != ref_v.shape:
        raise ValueError(f"shape mismatch: est {est_v.shape}, ref {ref_v.shape}")
    tp = rain_mask(est_v, threshold) & rain_mask(ref_v, threshold)
    n = int(tp.sum())
    if n == 0:
        return BiasRmse(float("nan"), float("nan"), 0)
    diff = ref_v[tp].astype(np.float64) - est_v[tp].astype(np.float64)
    return BiasRmse(float(diff.mean()), float(np.sqrt(np.mean(diff * diff))), n)


@dataclass(frozen=True)
class ErrorConditionalStats:
    """False-alarm (FA) statistics of the estimator values where the
    reference is dry, and the mean reference value on missed detections
    (BD).  NaN when a category is empty."""

    fa_mean: float
    fa_rmse: float
    fa_n: int
    bd_mean: float
    bd_n: int


def error_conditional_stats(est, ref,
                            threshold: float = DEFAULT_RAIN_THRESHOLD) -> ErrorConditionalStats:
    est_v = _values(est)
    ref_v = _values(ref)
    valid = ~(np.isnan(est_v) | np.isnan(ref_v))
    er = rain_mask(est_v, threshold)
    rr = rain_mask(ref_v, threshold)
    fa = er & ~rr & valid
    bd = rr & ~er & valid
    fa_vals = est_v[fa].astype(np.float64)
    bd_vals = ref_v[bd].astype(np.float64)
    fa_mean = float(fa_vals.mean()) if fa_vals.size else float("nan")
    fa_rmse = float(np.sqrt(np.mean(fa_vals ** 2))) if fa_vals.size else float("nan")
    bd_mean = float(bd_vals.mean()) if bd_vals.size else float("nan")
    return ErrorConditionalStats(fa_mean, fa_rmse, int(fa_vals.size),
                                 bd_mean, int(bd_vals.size))


@dataclass(frozen=True)
class CoverageTable:
    """Empirical coverage (%) of the 50% and 90% bands per rain-intensity
    bin, over true-positive pixels, plus the pixel-weighted "All" row."""

    bin_edges: tuple
    labels: tuple
    n: tuple
    cov50: tuple
    cov90: tuple
    all_n: int
    all_cov50: float
    all_cov90: float


def _bin_label(lo, hi) -> str:
    if np.isinf(hi):
        return f"{lo:g} and above"
    return f"{lo:g} to {hi:g}"


def coverage_masks(qf: QuantileField, ref: RainField,
                   threshold: float = DEFAULT_RAIN_THRESHOLD):
    """True-positive selector plus in-band flags for one scene.

    Returns (tp, in50, in90) boolean fields; true positive means both the
    reference and the retrieved median exceed the threshold.  Expects a
    monotonized quantile field.
    """
    ref_v = _values(ref)
    if qf.shape != ref_v.shape:
        raise ValueError(f"shape mismatch: quantiles {qf.shape}, ref {ref_v.shape}")
    med = qf.q[49]
    tp = rain_mask(ref_v, threshold) & rain_mask(med, threshold)
    q5, q25, q75, q95 = qf.q[4], qf.q[24], qf.q[74], qf.q[94]
    in50 = (q25 <= ref_v) & (ref_v <= q75)
    in90 = (q5 <= ref_v) & (ref_v <= q95)
    return tp, in50, in90


def coverage_from_arrays(ref_vals, in50, in90, bins=DEFAULT_COVERAGE_BINS) -> CoverageTable:
    """Assemble a CoverageTable from flat true-positive arrays (mergeable
    across scenes by concatenation)."""
    ref_vals = np.asarray(ref_vals, dtype=np.float64).ravel()
    in50 = np.asarray(in50, dtype=bool).ravel()
    in90 = np.asarray(in90, dtype=bool).ravel()
    edges = tuple(bins)
    labels, ns, cov50, cov90 = [], [], [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (ref_vals >= lo) & (ref_vals < hi)
        n = int(sel.sum())
        labels.append(_bin_label(lo, hi))
        ns.append(n)
        cov50.append(100.0 * in50[sel].mean() if n else float("nan"))
        cov90.append(100.0 * in90[sel].mean() if n else float("nan"))
    all_n = ref_vals.size
    all50 = 100.0 * in50.mean() if all_n else float("nan")
    all90 = 100.0 * in90.mean() if all_n else float("nan")
    return CoverageTable(edges, tuple(labels), tuple(ns), tuple(cov50), tuple(cov90),
                         all_n, all50, all90)


def coverage_table(qf: QuantileField, ref: RainField,
                   bins=DEFAULT_COVERAGE_BINS,
                   threshold: float = DEFAULT_RAIN_THRESHOLD) -> CoverageTable:
    """Fraction of true positives whose reference value falls inside the
    (q25, q75) and (q5, q95) bands, binned by reference intensity.

    Expects a monotonized quantile field; true positive means both the
    reference and the retrieved median exceed the threshold.
    """
    ref_v = _values(ref)
    tp, in50, in90 = coverage_masks(qf, ref, threshold)
    return coverage_from_arrays(ref_v[tp], in50[tp], in90[tp], bins)


@dataclass(frozen=True)
class IntensityHistogram:
    edges: np.ndarray
    counts: dict
    density: dict


def intensity_histogram(fields: dict, edges=None,
                        threshold: float = DEFAULT_RAIN_THRESHOLD) -> IntensityHistogram:
    """Per-estimator histograms of rainy-pixel intensity on shared bins.

    ``fields`` maps estimator name to RainField/array; the default bins
    focus on light rain, 40 bins over [0, 2] mm/hr.  Densities integrate
    to 1 over the covered range.
    """
    if edges is None:
        edges = np.linspace(0.0, 2.0, 41)
    edges = np.asarray(edges, dtype=np.float64)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("edges must be strictly increasing")
    counts, density = {}, {}
    for name, field in fields.items():
        v = _values(field).astype(np.float64).ravel()
        v = v[rain_mask(v, threshold)]
        c, _ = np.histogram(v, bins=edges)
        counts[name] = c
        total = c.sum()
        widths = np.diff(edges)
        density[name] = c / (total * widths) if total else np.full(c.shape, np.nan)
    return IntensityHistogram(edges, counts, density)


@dataclass(frozen=True)
class DensityScatter:
    """2-D histogram of (reference, estimator) pairs with the OLS line
    est = slope * ref + intercept and R^2 = 1 - SS_res/SS_tot."""

    x_edges: np.ndarray
    y_edges: np.ndarray
    counts: np.ndarray
    slope: float
    intercept: float
    r2: float
    n: int


def density_scatter(est_values, ref_values, bins: int = 50,
                    scale: str = "linear") -> DensityScatter:
    """Paired density scatter plus least-squares regression.

    Non-finite pairs are dropped; needs n >= 2.  ``scale`` "log" uses
    log-spaced bins over the positive values (pairs with a non-positive
    member are excluded from the histogram but kept in the regression).
    Zero variance in the reference makes the regression NaN; a constant
    estimator yields R^2 = 0.
    """
    est_v = np.asarray(est_values, dtype=np.float64).ravel()
    ref_v = np.asarray(ref_values, dtype=np.float64).ravel()
    keep = np.isfinite(est_v) & np.isfinite(ref_v)
    est_v, ref_v = est_v[keep], ref_v[keep]
    n = est_v.size
    if n < 2:
        raise ValueError("need at least 2 paired values")
    if scale == "log":
        pos = (est_v > 0) & (ref_v > 0)
        if not pos.any():
            raise ValueError("log scale needs positive pairs")
        lo = min(est_v[pos].min(), ref_v[pos].min())
        hi = max(est_v[pos].max(), ref_v[pos].max())
        hi = hi if hi > lo else lo * 10
        x_edges = y_edges = np.geomspace(lo, hi, bins + 1)
        hist_x, hist_y = ref_v[pos], est_v[pos]
    elif scale == "linear":
        lo = min(est_v.min(), ref_v.min())
        hi = max(est_v.max(), ref_v.max())
        hi = hi if hi > lo else lo + 1.0
        x_edges = y_edges = np.linspace(lo, hi, bins + 1)
        hist_x, hist_y = ref_v, est_v
    else:
        raise ValueError("scale must be 'linear' or 'log'")
    counts, _, _ = np.histogram2d(hist_x, hist_y, bins=[x_edges, y_edges])
    var_ref = np.var(ref_v)
    if var_ref == 0:
        slope = intercept = r2 = float("nan")
    else:
        slope = float(np.cov(ref_v, est_v, bias=True)[0, 1] / var_ref)
        intercept = float(est_v.mean() - slope * ref_v.mean())
        resid = est_v - (slope * ref_v + intercept)
        ss_res = float(np.sum(resid ** 2))
        ss_tot = float(np.sum((est_v - est_v.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return DensityScatter(x_edges, y_edges, counts.astype(np.int64),
                          slope, intercept, r2, n)


def grid_difference(ref_grid: GridField, est_grid: GridField) -> GridField:
    """Cellwise reference-minus-estimator difference of two mean grids.

    Both grids must share origin, cell size, and shape; cells empty on
    either side are NaN with count 0, otherwise the count is the smaller
    of the two contributor counts.
    """
    same_geom = (ref_grid.lat0 == est_grid.lat0 and ref_grid.lon0 == est_grid.lon0
                 and ref_grid.cell == est_grid.cell
                 and ref_grid.mean.shape == est_grid.mean.shape)
    if not same_geom:
        raise ValueError("grid geometry mismatch")
    both = (ref_grid.count > 0) & (est_grid.count > 0)
    diff = np.where(both, ref_grid.mean - est_grid.mean, np.nan)
    count = np.where(both, np.minimum(ref_grid.count, est_grid.count), 0)
    return GridField(ref_grid.lat0, ref_grid.lon0, ref_grid.cell, diff, count)


@dataclass(frozen=True)
class MaePoint:
    bucket: str
    mae: float
    n: int


def _bucket_key(timestamp: float, bucket: str) -> str:
    dt = datetime.datetime.fromtimestamp(timestamp, tz=datetime.timezone.utc)
    if bucket == "month":
        return f"{dt.year:04d}-{dt.month:02d}"
    if bucket == "day":
        return f"{dt.year:04d}-{dt.month:02d}-{dt.day:02d}"
    raise ValueError("bucket must be 'month' or 'day'")


def mae_by_time(pairs, bucket: str = "month",
                threshold: float = DEFAULT_RAIN_THRESHOLD) -> list[MaePoint]:
    """Mean absolute error per calendar bucket over mutual-rain pixels.

    ``pairs`` holds (est, ref) RainField pairs (the overpass middle time is
    derived from the estimator's scan times) or explicit (est, ref, time)
    tuples.  Buckets with overpasses but no mutual-rain pixels are NaN.
    """
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for pair in pairs:
        if len(pair) == 3:
            est, ref, t = pair
        else:
            est, ref = pair
            t = overpass_mid_time(est)
        key = _bucket_key(float(t), bucket)
        est_v = _values(est)
        ref_v = _values(ref)
        sel = rain_mask(est_v, threshold) & rain_mask(ref_v, threshold)
        sums.setdefault(key, 0.0)
        counts.setdefault(key, 0)
        if sel.any():
            sums[key] += float(np.abs(est_v[sel].astype(np.float64)
                                      - ref_v[sel].astype(np.float64)).sum())
            counts[key] += int(sel.sum())
    out = []
    for key in sorted(sums):
        n = counts[key]
        out.append(MaePoint(key, sums[key] / n if n else float("nan"), n))
    return out


def surface_partition(ref: RainField, mask: SurfaceMask) -> dict[str, RainField]:
    """Copies of the reference restricted to each surface class (other
    pixels NaN), plus the unrestricted TOTAL.  Restricting the reference is
    enough to stratify any pairwise metric, because every metric excludes
    pixels with a NaN reference."""
    is_land = mask_lookup(mask, ref.lat, ref.lon) == 1
    rain = ref.rain.copy()
    land = np.where(is_land, rain, np.nan).astype(np.float32)
    ocean = np.where(~is_land, rain, np.nan).astype(np.float32)
    mk = lambda v: RainField(ref.granule_id, v, ref.lat, ref.lon, ref.scan_time,
                             provenance=ref.provenance)
    return {"LAND": mk(land), "OCEAN": mk(ocean), "TOTAL": ref}


def stratify_by_surface(op, mask: SurfaceMask, est, ref: RainField, **kwargs) -> dict:
    """Apply ``op(est, ref, **kwargs)`` per surface class.

    Returns {"LAND": ..., "OCEAN": ..., "TOTAL": ...}; the TOTAL entry is
    the unstratified result.  A class with no pixels at all yields None
    instead of propagating the op's empty-input error.
    """
    parts = surface_partition(ref, mask)
    out = {}
    for name, part in parts.items():
        if name != "TOTAL" and np.all(np.isnan(part.rain)):
            out[name] = None
            continue
        out[name] = op(est, part, **kwargs)
    return out


# ---------------------------------------------------------------------------
# CSV export, mirroring the usual report layouts


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def write_contingency_csv(path, name: str, tbl: ContingencyTable) -> None:
    """2x2 percentage table with POD/FAR/precision/F1 in the margin."""
    pct = tbl.as_percent()
    sc = scores(tbl)
    rows = [
        [f"Ref\\{name}", "Positive", "Negative", "POD"],
        ["Positive", _fmt(pct.tp), _fmt(pct.fn), _fmt(sc.pod)],
        ["Negative", _fmt(pct.fp), _fmt(pct.tn), "FAR"],
        ["Precision", _fmt(sc.precision), "", _fmt(sc.far)],
        ["F1-score", _fmt(sc.f1), "", ""],
    ]
    _write_rows(path, rows)


def write_scores_csv(path, table: dict) -> None:
    """POD/FAR per estimator and surface class.

    ``table`` maps estimator name -> {class name -> ScoreSet}.
    """
    classes = ["OCEAN", "LAND", "TOTAL"]
    present = [c for c in classes if any(c in v for v in table.values())]
    header1 = [""]
    header2 = [""]
    for c in present:
        header1 += [c, ""]
        header2 += ["POD", "FAR"]
    rows = [header1, header2]
    for name, per_class in table.items():
        row = [name]
        for c in present:
            sc = per_class.get(c)
            row += [_fmt(sc.pod), _fmt(sc.far)] if sc else ["", ""]
        rows.append(row)
    _write_rows(path, rows)


def write_bias_rmse_csv(path, table: dict) -> None:
    """Bias/RMSE rows LAND/OCEAN/TOTAL, one column pair per estimator.

    ``table`` maps estimator name -> {class name -> BiasRmse}.
    """
    names = list(table)
    header1 = [""]
    header2 = [""]
    for name in names:
        header1 += [name, ""]
        header2 += ["Bias", "RMSE"]
    rows = [header1, header2]
    for cls in ("LAND", "OCEAN", "TOTAL"):
        row = [cls]
        for name in names:
            br = table[name].get(cls)
            row += [_fmt(br.bias), _fmt(br.rmse)] if br else ["", ""]
        rows.append(row)
    _write_rows(path, rows)


def write_coverage_csv(path, cov: CoverageTable) -> None:
    rows = [["Rain interval mm/hr", "50%", "90%", "n"]]
    for label, c50, c90, n in zip(cov.labels, cov.cov50, cov.cov90, cov.n):
        rows.append([label, _fmt(c50), _fmt(c90), str(n)])
    rows.append(["All", _fmt(cov.all_cov50), _fmt(cov.all_cov90), str(cov.all_n)])
    _write_rows(path, rows)


def write_histogram_csv(path, hist: IntensityHistogram) -> None:
    names = list(hist.counts)
    header = ["bin_lo", "bin_hi"]
    for name in names:
        header += [f"{name}_count", f"{name}_density"]
    rows = [header]
    for k in range(len(hist.edges) - 1):
        row = [_fmt(float(hist.edges[k])), _fmt(float(hist.edges[k + 1]))]
        for name in names:
            row += [str(int(hist.counts[name][k])), _fmt(float(hist.density[name][k]))]
        rows.append(row)
    _write_rows(path, rows)


def write_scatter_csv(path, sc: DensityScatter) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# slope={_fmt(sc.slope)} intercept={_fmt(sc.intercept)} "
                 f"r2={_fmt(sc.r2)} n={sc.n}\n")
        w = csv.writer(fh)
        w.writerow(["x_lo", "x_hi", "y_lo", "y_hi", "count"])
        nz = np.nonzero(sc.counts)
        for i, j in zip(*nz):
            w.writerow([_fmt(float(sc.x_edges[i])), _fmt(float(sc.x_edges[i + 1])),
                        _fmt(float(sc.y_edges[j])), _fmt(float(sc.y_edges[j + 1])),
                        str(int(sc.counts[i, j]))])


def write_mae_csv(path, points_by_name: dict) -> None:
    """``points_by_name`` maps estimator name -> list of MaePoint."""
    rows = [["bucket", "estimator", "mae", "n"]]
    flat = []
    for name, points in points_by_name.items():
        for p in points:
            flat.append((p.bucket, name, p.mae, p.n))
    for bucket, name, mae, n in sorted(flat, key=lambda r: (r[0], r[1])):
        rows.append([bucket, name, _fmt(mae), str(n)])
    _write_rows(path, rows)


def write_error_conditional_csv(path, stats: dict) -> None:
    """``stats`` maps estimator name -> ErrorConditionalStats."""
    rows = [["estimator", "fa_mean", "fa_rmse", "fa_n", "bd_mean", "bd_n"]]
    for name, st in stats.items():
        rows.append([name, _fmt(st.fa_mean), _fmt(st.fa_rmse), str(st.fa_n),
                     _fmt(st.bd_mean), str(st.bd_n)])
    _write_rows(path, rows)


def _write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
