"""Batch front-end: dataset construction, training, retrieval, evaluation
reports, and gridded difference maps.

Every command reads one JSON config file (``--config``), applies the
command-line overrides, writes its outputs plus a ``run_config.json``
receipt with the fully-resolved parameters, and is byte-identical when
rerun with the same config and seeds.  Exit codes: 0 success, 2 usage,
3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from rainquant import colocation, evaluate, quantiles, qunet
from rainquant.dataset import (
    DatasetManifest,
    SceneSelectionRule,
    SynthConfig,
    apply_normalizer,
    fit_normalizer,
    load_manifest,
    select_scene,
    split_dataset,
    synth_scene,
)
from rainquant.swath import (
    RainField,
    SwathError,
    SwathFormatError,
    crop_to_tile,
    mask_from_boxes,
    mask_lookup,
    read_mask,
    read_swath,
    write_mask,
    write_swath,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_receipt(out_dir: Path, command: str, resolved: dict) -> None:
    doc = {"command": command, "config": resolved}
    _atomic_write_text(out_dir / "run_config.json",
                       json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise DataError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise UsageError(f"config is not valid JSON: {err}") from err


def _section(config: dict, name: str) -> dict:
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise UsageError(f"config section {name!r} must be an object")
    return dict(section)


def _build_dataclass(cls, overrides: dict, where: str):
    try:
        return cls(**overrides)
    except TypeError as err:
        raise UsageError(f"bad field in {where}: {err}") from err
    except ValueError as err:
        raise UsageError(f"bad value in {where}: {err}") from err


def _tupleized_synth(overrides: dict) -> SynthConfig:
    fields = dict(overrides)
    for key in ("size", "cell_radius_km", "tb0", "depression", "noise_std",
                "land_offset", "domain", "time_range"):
        if key in fields:
            fields[key] = tuple(fields[key])
    return _build_dataclass(SynthConfig, fields, "synth config")


def _resolve_mask(section: dict, mask_flag, out_dir: Path):
    """Mask precedence: --mask flag, config {"path": ...}, config boxes."""
    spec = dict(section.get("mask", {}))
    if mask_flag:
        spec = {"path": mask_flag}
    if "path" in spec and spec["path"]:
        try:
            return read_mask(spec["path"]), str(spec["path"])
        except FileNotFoundError as err:
            raise DataError(f"mask file not found: {spec['path']}") from err
    cell = float(spec.get("cell_deg", 1.0))
    boxes = spec.get("land_boxes", [[45.0, 90.0, -180.0, 180.0]])
    mask = mask_from_boxes(cell, [tuple(b) for b in boxes])
    return mask, None


def cmd_build_dataset(config: dict, args) -> int:
    section = _section(config, "build")
    if args.seed is not None:
        section["seed"] = args.seed
    if args.out is not None:
        section["out"] = args.out
    out_dir = Path(section.get("out", "dataset"))
    seed = int(section.get("seed", 0))
    n_scenes = int(section.get("n_scenes", 200))
    fractions = tuple(section.get("fractions", (0.7, 0.15, 0.15)))
    synth = _tupleized_synth(section.get("synth", {}))
    rule = _build_dataclass(SceneSelectionRule, section.get("selection", {}),
                            "selection rule")
    max_attempts = int(section.get("max_attempts", max(50, 20 * n_scenes)))

    (out_dir / "scenes" / "tb").mkdir(parents=True, exist_ok=True)
    (out_dir / "scenes" / "rain").mkdir(parents=True, exist_ok=True)
    mask, mask_src = _resolve_mask(section, args.mask, out_dir)
    write_mask(mask, out_dir / "mask.msk1")

    kept = []
    attempts = 0
    while len(kept) < n_scenes and attempts < max_attempts:
        scene, rain = synth_scene(synth, mask, seed, attempts)
        attempts += 1
        if not select_scene(rain, rule):
            continue
        kept.append((scene, rain))
    if not kept:
        raise DataError(f"0 scenes selected after {attempts} attempts; "
                        "loosen the selection rule or retune the generator")
    if len(kept) < n_scenes:
        raise DataError(f"only {len(kept)}/{n_scenes} scenes selected "
                        f"after {attempts} attempts")

    ids = [scene.granule_id for scene, _ in kept]
    splits = split_dataset(ids, fractions, seed)
    split_of = {}
    for name, members in splits.items():
        for gid in members:
            split_of[gid] = name
    by_id = {scene.granule_id: (scene, rain) for scene, rain in kept}
    norm = fit_normalizer([by_id[g][0] for g in splits["train"]])

    records = []
    for scene, rain in kept:
        gid = scene.granule_id
        tb_rel = f"scenes/tb/{gid}.swt1"
        rain_rel = f"scenes/rain/{gid}.swt1"
        write_swath(scene, out_dir / tb_rel)
        write_swath(rain, out_dir / rain_rel)
        records.append({"id": gid, "tb": tb_rel, "rain": rain_rel,
                        "split": split_of[gid]})

    manifest = DatasetManifest(seed=seed, synth=synth, selection=rule,
                               fractions=fractions, normalizer=norm,
                               scenes=records, mask_path="mask.msk1",
                               n_generated=attempts)
    _atomic_write_text(out_dir / "manifest.json", manifest.to_json())
    resolved = {
        "out": str(out_dir), "seed": seed, "n_scenes": n_scenes,
        "fractions": list(fractions), "synth": asdict(synth),
        "selection": asdict(rule), "max_attempts": max_attempts,
        "mask": mask_src or {"cell_deg": mask.cell,
                             "land_boxes": section.get("mask", {}).get(
                                 "land_boxes", [[45.0, 90.0, -180.0, 180.0]])},
    }
    _write_receipt(out_dir, "build-dataset", resolved)
    counts = {k: len(v) for k, v in splits.items()}
    print(f"build-dataset: {len(kept)} scenes ({attempts} generated) -> {out_dir} "
          f"splits {counts}")
    return EXIT_OK


def _manifest_scenes(manifest: DatasetManifest, base: Path, split: str):
    records = manifest.split_records(split)
    out = []
    for rec in records:
        scene = read_swath(base / rec["tb"])
        rain = read_swath(base / rec["rain"])
        out.append((rec["id"], scene, rain))
    return out


def _load_pairs(manifest, base, split, multiple):
    pairs = []
    for gid, scene, rain in _manifest_scenes(manifest, base, split):
        scene = crop_to_tile(scene, multiple)
        rain_c = crop_to_tile(rain, multiple)
        x = qunet.scene_input(apply_normalizer(scene, manifest.normalizer))
        pairs.append((x, rain_c.rain))
    return pairs


def cmd_train(config: dict, args) -> int:
    section = _section(config, "train")
    if args.out is not None:
        section["out"] = args.out
    if args.seed is not None:
        section.setdefault("train", {})
        section["train"] = {**section["train"], "seed": args.seed}
    manifest_path = Path(section.get("manifest", "dataset/manifest.json"))
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    out_dir = Path(section.get("out", "run"))
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg = _build_dataclass(qunet.ModelConfig, section.get("model", {}),
                                 "model config")
    train_cfg = _build_dataclass(qunet.TrainConfig, section.get("train", {}),
                                 "train config")

    train_set = _load_pairs(manifest, base, "train", model_cfg.tile_multiple)
    val_set = _load_pairs(manifest, base, "val", model_cfg.tile_multiple)
    if not train_set:
        raise DataError("manifest has no train scenes")

    resume = section.get("resume")
    if resume:
        model, meta = qunet.load_checkpoint(resume)
        start_epoch = meta["epoch"] or 0
        optimizer_state = meta["optimizer_state"]
        rng = meta["rng"]
        model_cfg = model.config
    else:
        model = qunet.QuantileUNet(model_cfg)
        start_epoch = 0
        optimizer_state = None
        rng = None

    def on_epoch(rec):
        print(f"epoch {rec['epoch']:3d}  train {rec['train_loss']:.6f}  "
              f"val {rec['val_loss']:.6f}", flush=True)

    try:
        history, state, rng = qunet.train(model, train_set, val_set, train_cfg,
                                          start_epoch=start_epoch,
                                          optimizer_state=optimizer_state,
                                          rng=rng, on_epoch=on_epoch)
    except qunet.TrainingDivergedError as err:
        print(f"train: aborted: {err}", file=sys.stderr)
        return EXIT_NUMERIC

    qunet.save_checkpoint(model, out_dir / "model.qnt1", train_cfg=train_cfg,
                          optimizer_state=state, rng=rng, epoch=train_cfg.epochs)
    rows = ["epoch,train_loss,val_loss"]
    for rec in history:
        rows.append(f"{rec['epoch']},{rec['train_loss']!r},{rec['val_loss']!r}")
    _atomic_write_text(out_dir / "history.csv", "\n".join(rows) + "\n")
    resolved = {"manifest": str(manifest_path), "out": str(out_dir),
                "model": asdict(model_cfg), "train": asdict(train_cfg),
                "resume": resume or None}
    _write_receipt(out_dir, "train", resolved)
    print(f"train: {len(history)} epochs -> {out_dir / 'model.qnt1'} "
          f"({model.param_count()} parameters)")
    return EXIT_OK


def cmd_retrieve(config: dict, args) -> int:
    section = _section(config, "retrieve")
    if args.out is not None:
        section["out"] = args.out
    manifest_path = Path(section.get("manifest", "dataset/manifest.json"))
    checkpoint = section.get("checkpoint", "run/model.qnt1")
    split = section.get("split", "test")
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    if not Path(checkpoint).exists():
        raise DataError(f"checkpoint not found: {checkpoint}")
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    out_dir = Path(section.get("out", "retrieval"))
    (out_dir / "quantiles").mkdir(parents=True, exist_ok=True)
    (out_dir / "median").mkdir(parents=True, exist_ok=True)
    model, _ = qunet.load_checkpoint(checkpoint)
    n = 0
    for gid, scene, _rain in _manifest_scenes(manifest, base, split):
        scene = crop_to_tile(scene, model.config.tile_multiple)
        planes = qunet.scene_input(apply_normalizer(scene, manifest.normalizer))
        qf = qunet.retrieve_quantiles(model, scene, planes)
        qf = quantiles.monotonize(qf)
        median = quantiles.point_estimate(qf, 0.50)
        write_swath(qf, out_dir / "quantiles" / f"{gid}.swt1")
        write_swath(median, out_dir / "median" / f"{gid}.swt1")
        n += 1
    if n == 0:
        raise DataError(f"no scenes in split {split!r}")
    resolved = {"manifest": str(manifest_path), "checkpoint": str(checkpoint),
                "out": str(out_dir), "split": split}
    _write_receipt(out_dir, "retrieve", resolved)
    print(f"retrieve: {n} scenes -> {out_dir}")
    return EXIT_OK


def _mosaic_reference(scene, frames, box, min_pixels, quality_min, radius_km):
    """Reference rain from the nearest-in-time mosaic frame, or None when
    the overpass has too few pixels in the mosaic domain."""
    if colocation.overpass_coverage(scene, box) <= min_pixels:
        return None
    frame = colocation.nearest_time_frame(frames, colocation.overpass_mid_time(scene))
    lat, lon, val = colocation.mosaic_points(frame, quality_min)
    return colocation.colocate_radius_mean((lat, lon, val), scene, radius_km)


def cmd_evaluate(config: dict, args) -> int:
    section = _section(config, "evaluate")
    if args.out is not None:
        section["out"] = args.out
    if args.threshold is not None:
        section["threshold"] = args.threshold
    if args.cell_deg is not None:
        section["cell_deg"] = args.cell_deg
    if args.mask is not None:
        section["mask"] = args.mask
    manifest_path = Path(section.get("manifest", "dataset/manifest.json"))
    retrieval = Path(section.get("retrieval", "retrieval"))
    split = section.get("split", "test")
    threshold = float(section.get("threshold", 1e-4))
    cell_deg = float(section.get("cell_deg", 1.0))
    out_dir = Path(section.get("out", "report"))
    out_dir.mkdir(parents=True, exist_ok=True)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent

    mask = None
    mask_src = section.get("mask")
    if mask_src:
        mask = read_mask(mask_src)
    elif manifest.mask_path and (base / manifest.mask_path).exists():
        mask_src = str(base / manifest.mask_path)
        mask = read_mask(mask_src)

    external = {name: Path(p) for name, p in section.get("estimators", {}).items()}

    mosaic_cfg = section.get("mosaic")
    frames = None
    if mosaic_cfg:
        frame_dir = Path(mosaic_cfg["dir"])
        paths = sorted(frame_dir.glob("*.mos1"))
        if not paths:
            raise DataError(f"no mosaic frames in {frame_dir}")
        frames = [colocation.read_mosaic(p) for p in paths]
        frames.sort(key=lambda f: f.time)
        box = tuple(mosaic_cfg.get("domain_box", (39.0, 54.0, -8.0, 12.0)))
        min_pixels = int(mosaic_cfg.get("min_pixels", 50))
        quality_min = float(mosaic_cfg.get("quality_min", 80.0))
        radius_km = float(mosaic_cfg.get("radius_km", 5.0))

    classes = ["TOTAL"] + (["LAND", "OCEAN"] if mask is not None else [])
    estimators = ["retrieval"] + sorted(external)
    cont = {e: {c: np.zeros(4, dtype=np.int64) for c in classes} for e in estimators}
    tp_ref = {e: {c: [] for c in classes} for e in estimators}
    tp_est = {e: {c: [] for c in classes} for e in estimators}
    fa_vals = {e: {c: [] for c in classes} for e in estimators}
    bd_vals = {e: {c: [] for c in classes} for e in estimators}
    cov_ref, cov50, cov90 = [], [], []
    hist_vals = {e: [] for e in estimators + ["reference"]}
    grid_vals = {e: [] for e in estimators + ["reference"]}
    grid_lat, grid_lon = [], []
    diff_vals = {e: [] for e in estimators}
    diff_lat = {e: [] for e in estimators}
    diff_lon = {e: [] for e in estimators}
    mae_pairs = {e: [] for e in estimators}

    n_scenes = 0
    skipped = 0
    for gid, scene, rain_ref in _manifest_scenes(manifest, base, split):
        qf_path = retrieval / "quantiles" / f"{gid}.swt1"
        med_path = retrieval / "median" / f"{gid}.swt1"
        if not qf_path.exists() or not med_path.exists():
            raise DataError(f"retrieval outputs missing for scene {gid}")
        qf = read_swath(qf_path)
        med = read_swath(med_path, provenance="retrieval")
        if frames is not None:
            ref = _mosaic_reference(scene, frames, box, min_pixels, quality_min,
                                    radius_km)
            if ref is None:
                skipped += 1
                continue
            ref_rain = ref.rain[:qf.n_scan, :qf.n_pix]
            lat = ref.lat[:qf.n_scan, :qf.n_pix]
            lon = ref.lon[:qf.n_scan, :qf.n_pix]
        else:
            ref_rain = rain_ref.rain[:qf.n_scan, :qf.n_pix]
            lat = rain_ref.lat[:qf.n_scan, :qf.n_pix]
            lon = rain_ref.lon[:qf.n_scan, :qf.n_pix]
        scan_time = scene.scan_time[:qf.n_scan]
        n_scenes += 1

        fields = {"retrieval": med.rain}
        for name, est_dir in external.items():
            est_path = est_dir / f"{gid}.swt1"
            if not est_path.exists():
                raise DataError(f"external estimator {name!r} missing scene {gid}")
            fields[name] = read_swath(est_path, provenance="external-estimator").rain

        if mask is not None:
            is_land = mask_lookup(mask, lat, lon) == 1
        for est_name in estimators:
            est_v = fields[est_name]
            valid = ~(np.isnan(est_v) | np.isnan(ref_rain))
            er = (est_v > threshold) & valid
            rr = (ref_rain > threshold) & valid
            for cls in classes:
                if cls == "TOTAL":
                    sel = valid
                elif cls == "LAND":
                    sel = valid & is_land
                else:
                    sel = valid & ~is_land
                tp = rr & er & sel
                cont[est_name][cls] += np.array([
                    int(tp.sum()),
                    int((rr & ~er & sel).sum()),
                    int((~rr & er & sel).sum()),
                    int((~rr & ~er & sel).sum()),
                ])
                tp_ref[est_name][cls].append(ref_rain[tp].astype(np.float64))
                tp_est[est_name][cls].append(est_v[tp].astype(np.float64))
                fa_vals[est_name][cls].append(est_v[~rr & er & sel].astype(np.float64))
                bd_vals[est_name][cls].append(ref_rain[rr & ~er & sel].astype(np.float64))
            hist_vals[est_name].append(est_v[valid & (est_v > threshold)].astype(np.float64))
            grid_vals[est_name].append(np.where(valid, est_v, np.nan).ravel())
            d = np.where(valid, ref_rain - est_v, np.nan)
            diff_vals[est_name].append(d.ravel())
            diff_lat[est_name].append(lat.ravel())
            diff_lon[est_name].append(lon.ravel())
            est_field = np.where(valid, est_v, np.nan)
            ref_field = np.where(valid, ref_rain, np.nan)
            mae_pairs[est_name].append(
                (est_field, ref_field, 0.5 * (scan_time[0] + scan_time[-1])))
        ref_valid = ~np.isnan(ref_rain)
        hist_vals["reference"].append(
            ref_rain[ref_valid & (ref_rain > threshold)].astype(np.float64))
        grid_vals["reference"].append(np.where(ref_valid, ref_rain, np.nan).ravel())
        grid_lat.append(lat.ravel())
        grid_lon.append(lon.ravel())

        ref_rf = RainField(gid, ref_rain.astype(np.float32), lat, lon, scan_time)
        tp, in50, in90 = evaluate.coverage_masks(qf, ref_rf, threshold)
        cov_ref.append(ref_rf.rain[tp].astype(np.float64))
        cov50.append(in50[tp])
        cov90.append(in90[tp])

    if n_scenes == 0:
        raise DataError("no scenes evaluated (empty split or all overpasses skipped)")

    def merged(parts):
        return np.concatenate(parts) if parts else np.empty(0)

    # contingency + scores + bias/RMSE + FA/BD per estimator and class
    score_table = {}
    bias_table = {}
    err_stats = {}
    for est_name in estimators:
        score_table[est_name] = {}
        bias_table[est_name] = {}
        for cls in classes:
            tp, fn, fp, tn = (int(v) for v in cont[est_name][cls])
            tbl = evaluate.ContingencyTable(tp, fn, fp, tn, threshold)
            if tbl.total > 0:
                evaluate.write_contingency_csv(
                    out_dir / f"contingency_{est_name}_{cls}.csv", est_name, tbl)
            score_table[est_name][cls] = evaluate.scores(tbl)
            ref_v = merged(tp_ref[est_name][cls])
            est_v = merged(tp_est[est_name][cls])
            if ref_v.size:
                diff = ref_v - est_v
                bias_table[est_name][cls] = evaluate.BiasRmse(
                    float(diff.mean()), float(np.sqrt(np.mean(diff * diff))), diff.size)
            else:
                bias_table[est_name][cls] = evaluate.BiasRmse(float("nan"), float("nan"), 0)
        fa = merged(fa_vals[est_name]["TOTAL"])
        bd = merged(bd_vals[est_name]["TOTAL"])
        err_stats[est_name] = evaluate.ErrorConditionalStats(
            float(fa.mean()) if fa.size else float("nan"),
            float(np.sqrt(np.mean(fa ** 2))) if fa.size else float("nan"),
            int(fa.size),
            float(bd.mean()) if bd.size else float("nan"),
            int(bd.size))
    evaluate.write_scores_csv(out_dir / "scores.csv", score_table)
    evaluate.write_bias_rmse_csv(out_dir / "bias_rmse.csv", bias_table)
    evaluate.write_error_conditional_csv(out_dir / "error_conditional.csv", err_stats)

    cov = evaluate.coverage_from_arrays(merged(cov_ref), merged(cov50), merged(cov90))
    evaluate.write_coverage_csv(out_dir / "coverage.csv", cov)

    hist = evaluate.intensity_histogram(
        {name: merged(vals) for name, vals in hist_vals.items()}, threshold=threshold)
    evaluate.write_histogram_csv(out_dir / "histogram.csv", hist)

    lat_all = merged(grid_lat)
    lon_all = merged(grid_lon)
    ref_grid = colocation.grid_average(merged(grid_vals["reference"]), lat_all,
                                       lon_all, cell_deg, min_value=None)
    for est_name in estimators:
        est_grid = colocation.grid_average(merged(grid_vals[est_name]), lat_all,
                                           lon_all, cell_deg, min_value=None)
        both = (ref_grid.count > 0) & (est_grid.count > 0)
        if both.sum() >= 2 and np.nanstd(ref_grid.mean[both]) > 0:
            sc = evaluate.density_scatter(est_grid.mean[both], ref_grid.mean[both])
            evaluate.write_scatter_csv(out_dir / f"scatter_{est_name}.csv", sc)
        diff_grid = colocation.grid_average(merged(diff_vals[est_name]),
                                            merged(diff_lat[est_name]),
                                            merged(diff_lon[est_name]),
                                            cell_deg, min_value=None)
        colocation.write_grid_csv(diff_grid, out_dir / f"grid_diff_{est_name}.csv")

    mae = {name: evaluate.mae_by_time(pairs, threshold=threshold)
           for name, pairs in mae_pairs.items()}
    evaluate.write_mae_csv(out_dir / "mae_series.csv", mae)

    resolved = {"manifest": str(manifest_path), "retrieval": str(retrieval),
                "out": str(out_dir), "split": split, "threshold": threshold,
                "cell_deg": cell_deg, "mask": mask_src,
                "estimators": {k: str(v) for k, v in external.items()},
                "mosaic": mosaic_cfg or None}
    _write_receipt(out_dir, "evaluate", resolved)
    print(f"evaluate: {n_scenes} scenes ({skipped} skipped) -> {out_dir}")
    return EXIT_OK


def cmd_grid_diff(config: dict, args) -> int:
    section = _section(config, "grid_diff")
    if args.out is not None:
        section["out"] = args.out
    if args.cell_deg is not None:
        section["cell_deg"] = args.cell_deg
    ref_dir = Path(section.get("ref_dir", "dataset/scenes/rain"))
    est_dir = Path(section.get("est_dir", "retrieval/median"))
    cell_deg = float(section.get("cell_deg", 1.0))
    min_value = section.get("min_value", 1e-3)
    mode = section.get("mode", "pixel")
    if mode not in ("pixel", "grid"):
        raise UsageError("grid_diff mode must be 'pixel' or 'grid'")
    out_dir = Path(section.get("out", "grid_diff"))
    out_dir.mkdir(parents=True, exist_ok=True)
    est_paths = sorted(est_dir.glob("*.swt1"))
    if not est_paths:
        raise DataError(f"no estimator swaths in {est_dir}")
    diffs, lats, lons = [], [], []
    refs, ests = [], []
    for est_path in est_paths:
        ref_path = ref_dir / est_path.name
        if not ref_path.exists():
            raise DataError(f"reference missing for {est_path.name}")
        est = read_swath(est_path, provenance="retrieval")
        ref = read_swath(ref_path)
        ns, npx = est.shape
        ref_rain = ref.rain[:ns, :npx]
        valid = ~(np.isnan(est.rain) | np.isnan(ref_rain))
        diffs.append(np.where(valid, ref_rain - est.rain, np.nan).ravel())
        refs.append(np.where(valid, ref_rain, np.nan).ravel())
        ests.append(np.where(valid, est.rain, np.nan).ravel())
        lats.append(est.lat.ravel())
        lons.append(est.lon.ravel())
    lat = np.concatenate(lats)
    lon = np.concatenate(lons)
    if mode == "pixel":
        grid = colocation.grid_average(np.concatenate(diffs), lat, lon,
                                       cell_deg, min_value=None)
    else:
        ref_grid = colocation.grid_average(np.concatenate(refs), lat, lon,
                                           cell_deg, min_value=min_value)
        est_grid = colocation.grid_average(np.concatenate(ests), lat, lon,
                                           cell_deg, min_value=min_value)
        grid = evaluate.grid_difference(ref_grid, est_grid)
    colocation.write_grid_csv(grid, out_dir / "grid_diff.csv")
    resolved = {"ref_dir": str(ref_dir), "est_dir": str(est_dir), "out": str(out_dir),
                "cell_deg": cell_deg, "min_value": min_value, "mode": mode}
    _write_receipt(out_dir, "grid-diff", resolved)
    print(f"grid-diff: {len(est_paths)} scenes -> {out_dir / 'grid_diff.csv'}")
    return EXIT_OK


_COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "retrieve": cmd_retrieve,
    "evaluate": cmd_evaluate,
    "grid-diff": cmd_grid_diff,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rainquant",
        description="Quantile rain retrieval pipeline: build, train, retrieve, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--threshold", type=float, default=None,
                       help="rain/no-rain threshold in mm/hr")
        p.add_argument("--cell-deg", dest="cell_deg", type=float, default=None,
                       help="grid cell size in degrees")
        p.add_argument("--mask", default=None, help="surface mask file (MSK1)")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code) if err.code else EXIT_OK
    try:
        config = _load_config(args.config)
        return _COMMANDS[args.command](config, args)
    except UsageError as err:
        print(f"{args.command}: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"{args.command}: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except SwathFormatError as err:
        print(f"{args.command}: bad file: {err}", file=sys.stderr)
        return EXIT_DATA
    except SwathError as err:
        print(f"{args.command}: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as err:
        print(f"{args.command}: missing file: {err}", file=sys.stderr)
        return EXIT_DATA
    except qunet.TrainingDivergedError as err:
        print(f"{args.command}: numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
