"""drycss command line: stage-by-stage batch pipeline over a workspace.

    drycss synth --out ws          make a synthetic cube + NDVI + samples
    drycss features --out ws       per-sample DFT coefficients
    drycss train --out ws          BLUP/NN training grid -> model bundles
    drycss predict --out ws        CSS maps (per kind + combined)
    drycss calibrate --out ws      reclassification scores + NDVI calibration
    drycss opportunity --out ws    calibrated-CSS-minus-NDVI map
    drycss candidates --out ws     spaced candidate sites (+ rule filtering)
    drycss analogs --out ws        climate-analog matches per candidate
    drycss report --out ws         heatmaps, uplift and overlap summaries

Each stage records itself in ws/manifest.json and refuses to run when
its upstream artifacts are missing (exit 2) or its outputs exist
without --force. Bad flags or config exit 1; numerical failures exit
3. All numeric artifacts are byte-deterministic for a fixed seed; the
manifest differs in timestamps only.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import synth
from .bundles import load_model_bundle, save_model_bundle
from .errors import DataError, NumericalError
from .grid import (GridSpec, TimeAxis, extract_series, load_cube, load_grids,
                   load_ndvi, regrid_ndvi, save_cube, save_grids, save_ndvi)
from .neural import TrainParams
from .opportunity import (CandidateSite, default_rules, extract_candidates,
                          filter_candidates, find_analog, join_attributes,
                          load_attribute_table, load_rules, opportunity_map,
                          uplift_report)
from .pipeline import (Calibration, GridSettings, aggregate_metrics,
                       category_means, ensemble_scores, fit_calibration,
                       load_samples, map_agreement_iou, predict_map,
                       ranking_overlap, run_training_grid, save_run_record,
                       save_samples)
from .spectral import dft_coefficients, truncated_coefficients


class UsageError(Exception):
    """Bad flags or configuration; exits 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; this tool reserves 2 for
    # missing inputs, so route usage failures to exit 1 instead
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _stamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def _load_manifest(out: Path) -> dict:
    path = out / "manifest.json"
    if not path.exists():
        return {"stages": {}}
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt manifest {path}: {e}") from None


def _record_stage(out: Path, stage: str, config: dict, artifacts: list[str]) -> None:
    manifest = _load_manifest(out)
    manifest.setdefault("stages", {})[stage] = {
        "completed_utc": _stamp(),
        "config": config,
        "artifacts": sorted(artifacts),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require(path: Path, what: str, producer: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found: {path} (run `drycss {producer}` first)")
    return path


def _refuse_existing(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise DataError(f"output already exists: {path} (rerun with --force)")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {p} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    return doc


def _cfg(args, config: dict, stage: str, name: str, default, cast=None,
         check=None, describe=""):
    """Flag value, else config[stage][name] or config[name], else default."""
    value = getattr(args, name.replace("-", "_"), None)
    if value is None:
        section = config.get(stage, {})
        if isinstance(section, dict) and name in section:
            value = section[name]
        elif name in config:
            value = config[name]
        else:
            value = default
    if value is None:
        return None
    if cast is not None:
        try:
            value = cast(value)
        except (TypeError, ValueError):
            raise UsageError(f"bad value for {stage}.{name}: {value!r}")
    if check is not None and not check(value):
        raise UsageError(f"{stage}.{name}={value!r} out of range ({describe})")
    return value


def _jobs(args, config: dict, stage: str) -> int:
    value = getattr(args, "jobs", None)
    if value is None:
        section = config.get(stage, {})
        value = section.get("jobs") if isinstance(section, dict) else None
        if value is None:
            value = config.get("jobs")
    if value is None:
        value = os.environ.get("DRYCSS_JOBS")
    if value is None:
        return 1
    try:
        jobs = int(value)
    except (TypeError, ValueError):
        raise UsageError(f"jobs must be an integer, got {value!r}")
    if jobs < 1:
        raise UsageError(f"jobs must be at least 1, got {jobs}")
    return jobs


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def write_pgm(path: Path, values: np.ndarray) -> None:
    """8-bit P5 grayscale; full range maps min->0, max->255, NaN -> 0."""
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    img = np.zeros(v.shape, dtype=np.uint8)
    if finite.any():
        lo = float(v[finite].min())
        hi = float(v[finite].max())
        if hi > lo:
            img[finite] = np.round((v[finite] - lo) / (hi - lo) * 255.0).astype(np.uint8)
        else:
            img[finite] = 128
    header = f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + img.tobytes())


# ---------------------------------------------------------------------------
# stages


def cmd_synth(args, config) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _cfg(args, config, "synth", "seed", 0, int, lambda v: v >= 0, ">= 0")
    grid_size = _cfg(args, config, "synth", "grid_size", 32, int,
                     lambda v: v >= 8, ">= 8")
    steps = _cfg(args, config, "synth", "steps", 2920, int, lambda v: v >= 16, ">= 16")
    invalid_fraction = _cfg(args, config, "synth", "invalid_fraction", 0.0, float,
                            lambda v: 0.0 <= v < 1.0, "in [0, 1)")
    counts = _cfg(args, config, "synth", "counts", (101, 101, 14, 14), _int_list,
                  lambda v: len(v) == 4 and all(c >= 1 for c in v),
                  "four positive integers")
    spacing = _cfg(args, config, "synth", "min_spacing_km", 9.0, float,
                   lambda v: v >= 0, ">= 0")

    for target in (out / "cube", out / "ndvi", out / "truth", out / "samples.csv"):
        _refuse_existing(target, args.force)

    spec = GridSpec(lat_min=20.0, lat_max=20.0 + 0.1 * (grid_size - 1),
                    lon_min=40.0, lon_max=40.0 + 0.1 * (grid_size - 1),
                    n_lat=grid_size, n_lon=grid_size)
    time = TimeAxis(start="2020-01-01T00:00:00Z", step_hours=3.0, n_steps=steps)
    cube, suitability = synth.synth_cube(spec, time, seed=seed,
                                         invalid_fraction=invalid_fraction)
    raster, irrigated, degraded = synth.synth_ndvi(
        spec, suitability, seed=synth_seed_child(seed, "ndvi"),
        n_irrigated=counts[2] + 6, n_degraded=counts[3] + 6)
    summer = regrid_ndvi(raster, spec, years=synth.DEFAULT_NDVI_YEARS)
    samples = synth.sample_reference_sites(
        spec, suitability, summer, irrigated, degraded,
        counts={"HiSuit-HiVeg": counts[0], "LoSuit-LoVeg": counts[1],
                "LoSuit-HiVeg": counts[2], "HiSuit-LoVeg": counts[3]},
        seed=synth_seed_child(seed, "sites"), min_spacing_km=spacing)

    save_cube(cube, out / "cube", force=args.force)
    save_ndvi(raster, out / "ndvi", force=args.force)
    save_grids(out / "truth", spec,
               {"suitability": suitability,
                "irrigated": irrigated.astype(np.float64),
                "degraded": degraded.astype(np.float64)}, force=args.force)
    save_samples(samples, out / "samples.csv")
    _record_stage(out, "synth",
                  {"seed": seed, "grid_size": grid_size, "steps": steps,
                   "invalid_fraction": invalid_fraction, "counts": list(counts),
                   "min_spacing_km": spacing},
                  ["cube", "ndvi", "truth", "samples.csv"])
    print(f"synth: {grid_size}x{grid_size} cube, {len(raster.observations)} NDVI "
          f"observations, {len(samples)} samples -> {out}")
    return 0


def synth_seed_child(seed: int, label: str) -> int:
    from .pipeline import derive_seed
    return derive_seed(seed, "synth", label)


def cmd_features(args, config) -> int:
    out = Path(args.out)
    cube_dir = _require(out / "cube", "climate cube", "synth")
    samples_path = _require(out / "samples.csv", "samples table", "synth")
    feat_dir = out / "features"
    _refuse_existing(feat_dir / "coeffs.npy", args.force)

    cube = load_cube(cube_dir, mmap=True)
    samples = load_samples(samples_path)
    coeffs = np.empty((len(samples), len(cube.variables),
                       cube.time.n_steps // 2 + 1), dtype=np.complex128)
    for i, s in enumerate(samples):
        series, _ = extract_series(cube, s.lat, s.lon)
        coeffs[i] = dft_coefficients(series)
    feat_dir.mkdir(parents=True, exist_ok=True)
    np.save(feat_dir / "coeffs.npy", coeffs)
    meta = {"n_samples": len(samples), "n_steps": cube.time.n_steps,
            "variables": list(cube.variables)}
    (feat_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _record_stage(out, "features", {"n_samples": len(samples)},
                  ["features/coeffs.npy", "features/meta.json"])
    print(f"features: {coeffs.shape[0]} samples x {coeffs.shape[1]} variables "
          f"x {coeffs.shape[2]} bins -> {feat_dir}")
    return 0


def _read_features(out: Path):
    feat_dir = _require(out / "features", "feature cache", "features")
    coeffs = np.load(_require(feat_dir / "coeffs.npy", "feature cache", "features"))
    meta = json.loads((feat_dir / "meta.json").read_text())
    return coeffs, meta


def cmd_train(args, config) -> int:
    out = Path(args.out)
    coeffs, meta = _read_features(out)
    samples = load_samples(_require(out / "samples.csv", "samples table", "synth"))
    if len(samples) != coeffs.shape[0]:
        raise DataError(
            f"feature cache has {coeffs.shape[0]} rows for {len(samples)} samples; "
            "rerun `drycss features`")

    blup_sizes = _cfg(args, config, "train", "blup_sizes", (2, 4, 8, 16, 32, 64),
                      _int_list, lambda v: all(s >= 1 for s in v), "positive")
    nn_sizes = _cfg(args, config, "train", "nn_sizes", (4, 8, 16, 32, 64),
                    _int_list, lambda v: all(s >= 1 for s in v), "positive")
    reps = _cfg(args, config, "train", "repetitions", 10, int, lambda v: v >= 1, ">= 1")
    root_seed = _cfg(args, config, "train", "seed", 0, int, lambda v: v >= 0, ">= 0")
    holdout = _cfg(args, config, "train", "holdout_fraction", 0.1, float,
                   lambda v: 0.0 < v < 1.0, "in (0, 1)")
    epochs = _cfg(args, config, "train", "epochs", 1000, int, lambda v: v >= 1, ">= 1")
    lr = _cfg(args, config, "train", "learning_rate", 1e-3, float,
              lambda v: v > 0, "> 0")
    nn_bins = _cfg(args, config, "train", "nn_feature_bins", 4, int,
                   lambda v: v >= 1, ">= 1")
    blup_lambda = _cfg(args, config, "train", "blup_lambda", "auto")
    if blup_lambda not in ("auto", "loo"):
        try:
            blup_lambda = float(blup_lambda)
        except (TypeError, ValueError):
            raise UsageError(
                f"train.blup_lambda must be 'auto', 'loo', or a number: {blup_lambda!r}")
        if blup_lambda <= 0:
            raise UsageError("train.blup_lambda must be positive")
    jobs = _jobs(args, config, "train")

    runs_dir = out / "runs"
    _refuse_existing(runs_dir, args.force)

    labels = np.array([s.label for s in samples])
    settings = GridSettings(
        variables=tuple(meta["variables"]), n_steps=int(meta["n_steps"]),
        holdout_fraction=holdout, nn_feature_bins=nn_bins,
        blup_lambda=blup_lambda,
        train_params=TrainParams(learning_rate=lr, epochs=epochs))
    runs, models = run_training_grid(
        coeffs, labels, settings, blup_sizes=blup_sizes, nn_sizes=nn_sizes,
        repetitions=reps, root_seed=root_seed, jobs=jobs)

    runs_dir.mkdir(parents=True, exist_ok=True)
    for run, model in zip(runs, models):
        run_dir = runs_dir / run.run_id
        if model is not None:
            save_model_bundle(model, run_dir, force=args.force)
        else:
            run_dir.mkdir(parents=True, exist_ok=True)
        save_run_record(run, run_dir / "predictions.json")

    rows = aggregate_metrics(runs)
    with open(runs_dir / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        header = list(rows[0].keys())
        w.writerow(header)
        for row in rows:
            w.writerow([row[h] if isinstance(row[h], (str, int)) else repr(row[h])
                        for h in header])

    n_failed = sum(1 for r in runs if r.failed)
    _record_stage(out, "train",
                  {"blup_sizes": list(blup_sizes), "nn_sizes": list(nn_sizes),
                   "repetitions": reps, "seed": root_seed,
                   "holdout_fraction": holdout, "epochs": epochs,
                   "learning_rate": lr, "nn_feature_bins": nn_bins,
                   "blup_lambda": blup_lambda, "jobs": jobs},
                  ["runs"])
    print(f"train: {len(runs)} runs ({n_failed} failed) -> {runs_dir}")
    return 0


def _sorted_run_dirs(runs_dir: Path) -> list[Path]:
    dirs = []
    for p in runs_dir.iterdir():
        if not p.is_dir():
            continue
        parts = p.name.rsplit("_", 2)
        if len(parts) != 3:
            continue
        kind, size, rep = parts
        try:
            dirs.append(((0 if kind == "blup" else 1, int(size), int(rep)), p))
        except ValueError:
            continue
    return [p for _, p in sorted(dirs)]


def _load_models(runs_dir: Path):
    models = []
    for run_dir in _sorted_run_dirs(runs_dir):
        if (run_dir / "model.json").exists():
            models.append(load_model_bundle(run_dir))
    if not models:
        raise DataError(f"no model bundles under {runs_dir} (run `drycss train` first)")
    return models


def cmd_predict(args, config) -> int:
    out = Path(args.out)
    cube = load_cube(_require(out / "cube", "climate cube", "synth"), mmap=True)
    models = _load_models(_require(out / "runs", "training runs", "train"))
    jobs = _jobs(args, config, "predict")
    block_rows = _cfg(args, config, "predict", "block_rows", 2, int,
                      lambda v: v >= 1, ">= 1")
    css_dir = out / "maps" / "css"
    _refuse_existing(css_dir, args.force)

    maps = predict_map(models, cube, jobs=jobs, block_rows=block_rows)
    save_grids(css_dir, cube.spec, maps, force=args.force)
    _record_stage(out, "predict", {"jobs": jobs, "block_rows": block_rows,
                                   "n_models": len(models)},
                  [f"maps/css/{name}.f32" for name in sorted(maps)])
    print(f"predict: {len(models)} models -> {css_dir} ({', '.join(sorted(maps))})")
    return 0


def cmd_calibrate(args, config) -> int:
    out = Path(args.out)
    coeffs, _ = _read_features(out)
    samples = load_samples(_require(out / "samples.csv", "samples table", "synth"))
    models = _load_models(_require(out / "runs", "training runs", "train"))
    _refuse_existing(out / "calibration.json", args.force)

    scores = ensemble_scores(models, coeffs)
    cal = fit_calibration(samples, scores["combined"])

    with open(out / "reclassification.csv", "w", newline="") as f:
        w = csv.writer(f)
        names = sorted(k for k in scores if k != "combined") + ["combined"]
        w.writerow(["site_id", "category", "label", "ndvi"]
                   + [f"score_{n}" for n in names])
        for i, s in enumerate(samples):
            w.writerow([s.site_id, s.category, repr(s.label), repr(s.ndvi)]
                       + [repr(float(scores[n][i])) for n in names])
    doc = cal.to_dict()
    doc["category_means"] = category_means(samples, scores["combined"])
    (out / "calibration.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _record_stage(out, "calibrate",
                  {"categories": sorted({s.category for s in samples})},
                  ["calibration.json", "reclassification.csv"])
    print(f"calibrate: slope={cal.slope:.4f} intercept={cal.intercept:.4f} "
          f"r2={cal.r2:.3f} on {cal.n} samples")
    return 0


def cmd_opportunity(args, config) -> int:
    out = Path(args.out)
    spec, css_maps = load_grids(_require(out / "maps" / "css", "CSS maps", "predict"))
    raster = load_ndvi(_require(out / "ndvi", "NDVI stack", "synth"))
    cal_doc = json.loads(_require(out / "calibration.json", "calibration",
                                  "calibrate").read_text())
    cal = Calibration.from_dict(cal_doc)

    years = _cfg(args, config, "opportunity", "years", None, _int_list)
    if years is None:
        years = sorted({obs.year for obs in raster.observations})
    opp_dir = out / "maps" / "opportunity"
    _refuse_existing(opp_dir, args.force)

    summer = regrid_ndvi(raster, spec, years=years)
    opp = opportunity_map(css_maps["combined"], summer, cal)
    save_grids(opp_dir, spec, {"opportunity": opp, "ndvi_summer": summer},
               force=args.force)
    _record_stage(out, "opportunity", {"years": list(years)},
                  ["maps/opportunity/opportunity.f32",
                   "maps/opportunity/ndvi_summer.f32"])
    n_pos = int(np.sum(np.isfinite(opp) & (opp > 0)))
    print(f"opportunity: {n_pos} pixels with positive opportunity -> {opp_dir}")
    return 0


def _candidate_fieldnames(sites: list[CandidateSite]) -> list[str]:
    attr_keys = sorted({k for s in sites for k in s.attributes})
    return (["rank", "lat", "lon", "iy", "ix", "opportunity", "css", "ndvi",
             "retained", "missing_attributes"] + [f"attr_{k}" for k in attr_keys])


def _write_candidates(path: Path, sites: list[CandidateSite]) -> None:
    fields = _candidate_fieldnames(sites)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for s in sites:
            row = [s.rank, repr(s.lat), repr(s.lon), s.iy, s.ix,
                   repr(s.opportunity), repr(s.css), repr(s.ndvi),
                   "" if s.retained is None else str(s.retained),
                   str(s.missing_attributes)]
            for fname in fields[10:]:
                row.append(s.attributes.get(fname[5:], ""))
            w.writerow(row)


def _read_candidates(path: Path) -> list[CandidateSite]:
    if not path.exists():
        raise DataError(f"candidates table not found: {path} "
                        "(run `drycss candidates` first)")
    sites = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            attrs = {k[5:]: v for k, v in row.items() if k.startswith("attr_") and v}
            retained = row.get("retained", "")
            sites.append(CandidateSite(
                rank=int(row["rank"]), lat=float(row["lat"]), lon=float(row["lon"]),
                iy=int(row["iy"]), ix=int(row["ix"]),
                opportunity=float(row["opportunity"]), css=float(row["css"]),
                ndvi=float(row["ndvi"]),
                attributes=attrs,
                retained=None if retained == "" else retained == "True",
                missing_attributes=row.get("missing_attributes") == "True"))
    if not sites:
        raise DataError(f"candidates table is empty: {path}")
    return sites


def cmd_candidates(args, config) -> int:
    out = Path(args.out)
    spec, opp_maps = load_grids(_require(out / "maps" / "opportunity",
                                         "opportunity map", "opportunity"))
    _, css_maps = load_grids(_require(out / "maps" / "css", "CSS maps", "predict"))
    count = _cfg(args, config, "candidates", "count", 25, int, lambda v: v >= 1, ">= 1")
    spacing = _cfg(args, config, "candidates", "min_spacing_km", 9.0, float,
                   lambda v: v >= 0, ">= 0")
    path = out / "candidates.csv"
    _refuse_existing(path, args.force)

    sites = extract_candidates(opp_maps["opportunity"], spec,
                               css=css_maps["combined"],
                               ndvi=opp_maps["ndvi_summer"],
                               count=count, min_spacing_km=spacing)

    attributes_path = _cfg(args, config, "candidates", "attributes", None, str)
    rules_path = _cfg(args, config, "candidates", "rules", None, str)
    filtered = None
    if attributes_path:
        join_key = _cfg(args, config, "candidates", "join", "site", str,
                        lambda v: v in ("site", "coords"), "site or coords")
        join_attributes(sites, load_attribute_table(attributes_path), key=join_key)
    if attributes_path or rules_path:
        rules = load_rules(rules_path) if rules_path else default_rules()
        filtered = filter_candidates(sites, rules)

    _write_candidates(path, sites)
    _record_stage(out, "candidates",
                  {"count": count, "min_spacing_km": spacing,
                   "attributes": attributes_path, "rules": rules_path},
                  ["candidates.csv"])
    if filtered is None:
        print(f"candidates: {len(sites)} sites (no attribute filtering) -> {path}")
    else:
        print(f"candidates: {len(sites)} sites, {len(filtered)} retained -> {path}")
    return 0


def cmd_analogs(args, config) -> int:
    out = Path(args.out)
    cube = load_cube(_require(out / "cube", "climate cube", "synth"), mmap=True)
    _, opp_maps = load_grids(_require(out / "maps" / "opportunity",
                                      "opportunity map", "opportunity"))
    sites = _read_candidates(out / "candidates.csv")
    channels = _cfg(args, config, "analogs", "channels", 32, int,
                    lambda v: v >= 1, ">= 1")
    max_dist = _cfg(args, config, "analogs", "max_climate_distance", None, float,
                    lambda v: v > 0, "> 0")
    percentile = _cfg(args, config, "analogs", "distance_percentile", 10.0, float,
                      lambda v: 0.0 < v <= 100.0, "in (0, 100]")
    margin = _cfg(args, config, "analogs", "ndvi_margin", 0.02, float,
                  lambda v: v >= 0, ">= 0")
    exclude_dir = _cfg(args, config, "analogs", "exclude", None, str)
    exclude_name = _cfg(args, config, "analogs", "exclude_name", "exclusion", str)
    dist_dir = out / "maps" / "analogs"
    _refuse_existing(out / "analogs.csv", args.force)

    # only sites that survived filtering, or all if filtering never ran
    any_filtered = any(s.retained is not None for s in sites)
    targets = [s for s in sites if s.retained] if any_filtered else sites
    if not targets:
        raise DataError("no retained candidates to match; relax the rules")

    max_chan = cube.time.n_steps // 2 + 1
    if channels > max_chan:
        raise UsageError(f"analogs.channels={channels} exceeds {max_chan} bins")

    exclusion = None
    if exclude_dir:
        espec, egrids = load_grids(Path(exclude_dir))
        if espec.shape != cube.spec.shape:
            raise DataError("exclusion grid shape does not match cube grid")
        if exclude_name not in egrids:
            raise DataError(f"exclusion grid {exclude_name!r} not in {exclude_dir}")
        exclusion = egrids[exclude_name] > 0.5

    H, W = cube.spec.shape
    t = cube.time.n_steps
    vectors = np.full((H, W, len(cube.variables) * channels * 2), np.nan)
    block = 2
    for r0 in range(0, H, block):
        r1 = min(r0 + block, H)
        rows_mask = cube.mask[r0:r1]
        flat = np.flatnonzero(rows_mask)
        if flat.size == 0:
            continue
        rr, cc = flat // W, flat % W
        series = np.empty((flat.size, len(cube.variables), t))
        for vi, var in enumerate(cube.variables):
            series[:, vi, :] = cube.values[var][:, r0 + rr, cc].T
        coeffs = dft_coefficients(series)
        vectors[r0 + rr, cc] = truncated_coefficients(coeffs, channels, mode="lowest")

    ndvi = opp_maps["ndvi_summer"]
    results = []
    dist_grids = {}
    for site in targets:
        res, dist = find_analog(site, vectors, cube.spec, ndvi,
                                exclusion=exclusion,
                                max_climate_distance=max_dist,
                                distance_percentile=percentile,
                                ndvi_margin=margin)
        results.append(res)
        dist_grids[f"dist_site_{site.rank}"] = dist

    report = uplift_report(results)
    with open(out / "analogs.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["site", "candidate_lat", "candidate_lon", "analog_lat",
                    "analog_lon", "climate_distance", "spatial_km",
                    "candidate_ndvi", "analog_ndvi", "ratio", "note"])
        by_rank = {s.rank: s for s in targets}
        for res, row in zip(results, report.rows):
            site = by_rank[row["site"]]
            if hasattr(res, "analog_ndvi"):
                w.writerow([row["site"], repr(site.lat), repr(site.lon),
                            repr(res.lat), repr(res.lon),
                            repr(res.climate_distance), repr(res.spatial_km),
                            repr(res.candidate_ndvi), repr(res.analog_ndvi),
                            "" if row["ratio"] is None else repr(row["ratio"]),
                            row["note"]])
            else:
                w.writerow([row["site"], repr(site.lat), repr(site.lon),
                            "", "", "", "", "", "", "", row["note"]])
    save_grids(dist_dir, cube.spec, dist_grids, force=args.force)
    uplift_doc = {"rows": list(report.rows),
                  "mean_of_ratios": report.mean_of_ratios,
                  "ratio_of_means": report.ratio_of_means,
                  "n_used": report.n_used, "n_skipped": report.n_skipped}
    (out / "uplift.json").write_text(json.dumps(uplift_doc, indent=2, sort_keys=True) + "\n")
    _record_stage(out, "analogs",
                  {"channels": channels, "max_climate_distance": max_dist,
                   "distance_percentile": percentile, "ndvi_margin": margin,
                   "exclude": exclude_dir},
                  ["analogs.csv", "uplift.json", "maps/analogs"])
    print(f"analogs: {report.n_used} matches over {len(targets)} candidates; "
          f"mean of ratios {report.mean_of_ratios:.3f}, "
          f"ratio of means {report.ratio_of_means:.3f}")
    return 0


def cmd_report(args, config) -> int:
    out = Path(args.out)
    report_dir = out / "report"
    _refuse_existing(report_dir, args.force)
    report_dir.mkdir(parents=True, exist_ok=True)
    written = []

    _, css_maps = load_grids(_require(out / "maps" / "css", "CSS maps", "predict"))
    for name, grid in sorted(css_maps.items()):
        write_pgm(report_dir / f"css_{name}.pgm", grid)
        written.append(f"report/css_{name}.pgm")
    if "blup" in css_maps and "nn" in css_maps:
        iou = map_agreement_iou(css_maps["blup"], css_maps["nn"])
        (report_dir / "iou.json").write_text(
            json.dumps({"blup_vs_nn_iou_at_0.5": iou}, indent=2, sort_keys=True) + "\n")
        written.append("report/iou.json")

    opp_dir = out / "maps" / "opportunity"
    if opp_dir.exists():
        _, opp_maps = load_grids(opp_dir)
        for name, grid in sorted(opp_maps.items()):
            write_pgm(report_dir / f"{name}.pgm", grid)
            written.append(f"report/{name}.pgm")

    analog_dir = out / "maps" / "analogs"
    if analog_dir.exists():
        _, dist_maps = load_grids(analog_dir)
        for name, grid in sorted(dist_maps.items()):
            write_pgm(report_dir / f"{name}.pgm", grid)
            written.append(f"report/{name}.pgm")

    metrics_path = out / "runs" / "metrics.csv"
    if metrics_path.exists():
        (report_dir / "metrics.csv").write_text(metrics_path.read_text())
        written.append("report/metrics.csv")

    recls_path = out / "reclassification.csv"
    if recls_path.exists():
        samples = load_samples(out / "samples.csv")
        with open(recls_path, newline="") as f:
            rows = list(csv.DictReader(f))
        vegetated = [r for r, s in zip(rows, samples)
                     if s.category == "HiSuit-HiVeg"]
        if len(vegetated) >= 2:
            n = min(20, len(vegetated))
            ids = [int(r["site_id"]) for r in vegetated]
            rankings = {"ndvi": {i: float(r["ndvi"]) for i, r in zip(ids, vegetated)}}
            for name in ("blup", "nn", "combined"):
                col = f"score_{name}"
                if col in vegetated[0]:
                    rankings[name] = {i: float(r[col]) for i, r in zip(ids, vegetated)}
            overlap = ranking_overlap(rankings, n=n)
            with open(report_dir / "rankings.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["end", "subset", "count"])
                for end in ("top", "bottom"):
                    for combo in sorted(overlap[end]):
                        w.writerow([end, "+".join(combo), overlap[end][combo]])
            written.append("report/rankings.csv")

    _record_stage(out, "report", {}, written)
    print(f"report: {len(written)} artifacts -> {report_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(
        prog="drycss",
        description="Climate suitability pipeline: synthetic data, spectral "
                    "features, BLUP/NN ensembles, CSS and opportunity maps, "
                    "candidate sites, and climate analogs.")
    sub = parser.add_subparsers(dest="command", metavar="stage")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="workspace directory")
        p.add_argument("--config", default=None,
                       help="JSON config file; flags override it")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing stage outputs")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic cube, NDVI stack, and samples")
    p.add_argument("--seed", type=int, default=None, help="synthesis seed (default 0)")
    p.add_argument("--grid-size", type=int, default=None,
                   help="nodes per grid side (default 32)")
    p.add_argument("--steps", type=int, default=None,
                   help="time steps, 3-hourly (default 2920 = one year)")
    p.add_argument("--invalid-fraction", type=float, default=None,
                   help="fraction of masked pixels (default 0)")
    p.add_argument("--counts", default=None,
                   help="site counts HiHi,LoLo,LoHi,HiLo (default 101,101,14,14)")
    p.add_argument("--min-spacing-km", type=float, default=None,
                   help="minimum site spacing (default 9)")

    add("features", cmd_features, "extract per-sample DFT coefficients")

    p = add("train", cmd_train, "train the BLUP/NN model grid")
    p.add_argument("--blup-sizes", default=None,
                   help="retained bins per variable (default 2,4,8,16,32,64)")
    p.add_argument("--nn-sizes", default=None,
                   help="autoencoder latent sizes (default 4,8,16,32,64)")
    p.add_argument("--repetitions", type=int, default=None,
                   help="holdout repetitions per cell (default 10)")
    p.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
    p.add_argument("--holdout-fraction", type=float, default=None,
                   help="validation share (default 0.1)")
    p.add_argument("--epochs", type=int, default=None,
                   help="network training epochs (default 1000)")
    p.add_argument("--learning-rate", type=float, default=None,
                   help="Adam learning rate (default 1e-3)")
    p.add_argument("--nn-feature-bins", type=int, default=None,
                   help="retained bins per variable for networks (default 4)")
    p.add_argument("--blup-lambda", default=None,
                   help="shrinkage: auto (= feature count), loo, or a number")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default $DRYCSS_JOBS or 1)")

    p = add("predict", cmd_predict, "score every pixel into CSS maps")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker threads (default $DRYCSS_JOBS or 1)")
    p.add_argument("--block-rows", type=int, default=None,
                   help="grid rows per work block (default 2)")

    add("calibrate", cmd_calibrate, "reclassification scores + NDVI calibration")

    p = add("opportunity", cmd_opportunity, "calibrated CSS minus NDVI map")
    p.add_argument("--years", default=None,
                   help="NDVI years to average (default: all in the stack)")

    p = add("candidates", cmd_candidates, "extract spaced opportunity peaks")
    p.add_argument("--count", type=int, default=None,
                   help="number of candidates (default 25)")
    p.add_argument("--min-spacing-km", type=float, default=None,
                   help="great-circle spacing (default 9)")
    p.add_argument("--attributes", default=None,
                   help="CSV of site attributes to join (optional)")
    p.add_argument("--join", default=None, choices=("site", "coords"),
                   help="attribute join key (default site)")
    p.add_argument("--rules", default=None,
                   help="JSON rules file (default: packaged accessibility rules; "
                        "filtering runs only when attributes or rules are given)")

    p = add("analogs", cmd_analogs, "match candidates to intact climate analogs")
    p.add_argument("--channels", type=int, default=None,
                   help="lowest-frequency bins per variable (default 32)")
    p.add_argument("--max-climate-distance", type=float, default=None,
                   help="absolute distance cap (default: percentile rule)")
    p.add_argument("--distance-percentile", type=float, default=None,
                   help="percentile of the distance map used as cap (default 10)")
    p.add_argument("--ndvi-margin", type=float, default=None,
                   help="required NDVI improvement (default 0.02)")
    p.add_argument("--exclude", default=None,
                   help="grid directory holding an exclusion mask (optional)")
    p.add_argument("--exclude-name", default=None,
                   help="grid name inside --exclude (default exclusion)")

    add("report", cmd_report, "render heatmaps and summary tables")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return 1
        config = _load_config(args.config)
        return args.func(args, config)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
