"""Experiment protocols: dataset generation, training, evaluation,
interpolation test and timing benchmark."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import metrics
from .dataset import (
    DATASET_LOG,
    build_dataset,
    frequency_tag,
    load_split,
    read_field,
    refinement_for,
    same_frequency,
    subject_grid,
    validate_manifest,
    worker_count,
)
from .errors import ConfigError, ConvergenceError, EmuError, ValidationError
from .phantom import AntennaPlacement, load_material_table, default_material_table, random_antenna_locations
from .solver import PmlConfig, compute_field
from .surrogate import encode_input, forward, load_checkpoint, predict, save_checkpoint, train

log = logging.getLogger(__name__)

TIMING_SCHEMA = 1


class DatasetFailure(EmuError):
    category = "solver"


def dataset_dirs(config, outdir):
    out = Path(outdir)
    if len(config.frequencies) == 1:
        return [(config.frequencies[0], out)]
    return [(f, out / frequency_tag(f)) for f in config.frequencies]


def cmd_dataset(config, outdir, deterministic=False):
    """Build one dataset per configured frequency; raise if any solve failed."""
    workers = worker_count(deterministic)
    manifests = []
    failed = 0
    for f, d in dataset_dirs(config, outdir):
        m = build_dataset(config, d, f, workers=workers)
        failed += sum(s["status"] != "ok" for s in m["samples"])
        manifests.append((d, m))
    if failed:
        raise DatasetFailure(f"{failed} sample(s) failed to converge; see manifest")
    return manifests


def _training_data(directory, manifest):
    enc, tg, recs, _ = load_split(directory, manifest, "train")
    venc, vtg, vrecs, _ = load_split(directory, manifest, "val")
    if not recs:
        raise ConfigError("training split is empty")
    val = (venc, vtg) if vrecs else None
    return (enc, tg), val


def cmd_train(dataset_dir, config, model_out, callback=None):
    """Train on a validated dataset; writes the checkpoint and a JSON log."""
    manifest = validate_manifest(dataset_dir)
    if not any(same_frequency(manifest["frequency"], f) for f in config.frequencies):
        raise ConfigError(f"dataset frequency {manifest['frequency']:g} Hz is not in the "
                          f"configured frequencies {config.frequencies}")
    train_data, val_data = _training_data(dataset_dir, manifest)
    t0 = time.perf_counter()
    model = train(train_data, val_data, config.train, manifest["frequency"], callback=callback)
    elapsed = time.perf_counter() - t0
    path = save_checkpoint(model, model_out)
    best = min(model.trace, key=lambda e: e.get("val_mse", e["train_mse"]))
    training_log = {
        "frequency": manifest["frequency"],
        "scale": model.scale,
        "config": config.train.to_dict(),
        "train_samples": len(train_data[0]),
        "val_samples": 0 if val_data is None else len(val_data[0]),
        "best_epoch": best["epoch"],
        "elapsed_s": elapsed,
        "trace": model.trace,
    }
    log_path = Path(str(path) + ".log.json")
    log_path.write_text(json.dumps(training_log, indent=2) + "\n")
    return model, path, log_path


def _checked_model(dataset_dir, checkpoint):
    manifest = validate_manifest(dataset_dir)
    model = load_checkpoint(checkpoint)
    if not same_frequency(model.frequency, manifest["frequency"]):
        raise ValidationError(f"checkpoint is for {model.frequency:g} Hz, dataset for "
                              f"{manifest['frequency']:g} Hz")
    return manifest, model


def _mean_solver_time(dataset_dir):
    path = Path(dataset_dir) / DATASET_LOG
    if not path.is_file():
        return None
    times = [s["wall_time"] for run in json.loads(path.read_text()) for s in run["solves"]]
    return float(np.mean(times)) if times else None


def _timing_block(solver_times, surrogate_times):
    if not solver_times or not surrogate_times:
        return None
    ms, mm, ratio = metrics.timing_comparison(solver_times, surrogate_times)
    return {"solver_mean_s": ms, "surrogate_mean_s": mm, "speedup": ratio}


def evaluate_split(directory, manifest, model, split="val", predictor=None):
    """Per-sample metric records for one split.

    ``predictor(encoding, target)`` overrides the surrogate (used for
    ground-truth self-checks); by default the model's forward pass is timed
    per sample, encoding included.
    """
    d = Path(directory)
    g = manifest["grid"]
    grids = {}
    rows, times = [], []
    for s in manifest["samples"]:
        if s["split"] != split:
            continue
        if s["subject"] not in grids:
            grids[s["subject"]] = subject_grid(d, manifest, s["subject"])
        y = read_field(d / s["field_file"], g["width"], g["height"], manifest["frequency"])
        ant = AntennaPlacement(s["antenna"]["i"], s["antenna"]["j"])
        t0 = time.perf_counter()
        enc = encode_input(grids[s["subject"]], ant)
        yhat = predictor(enc, y) if predictor is not None else forward(model, enc)
        times.append(time.perf_counter() - t0)
        rows.append({"subject": s["subject"], "antenna": [ant.i, ant.j],
                     "trained_ring": s["antenna"].get("trained_ring", True),
                     **metrics.sample_metrics(y, yhat)})
    return rows, times


def cmd_eval(dataset_dir, checkpoint, report_path=None, predictor=None):
    if predictor is None:
        manifest, model = _checked_model(dataset_dir, checkpoint)
    else:
        manifest, model = validate_manifest(dataset_dir), None
    rows, times = evaluate_split(dataset_dir, manifest, model, "val", predictor)
    if not rows:
        raise ValidationError("dataset has no validation samples")
    solver_mean = _mean_solver_time(dataset_dir)
    timing = _timing_block([solver_mean] if solver_mean else [], times)
    report = metrics.build_report("eval", manifest["frequency"], rows, timing)
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report, indent=2) + "\n")
    return report


def _manifest_materials(manifest):
    src = manifest.get("materials", "bundled")
    if src == "bundled":
        return default_material_table(manifest["frequency"])
    return load_material_table(src, manifest["frequency"])


def interp_locations(manifest, grid, subject_index, subject_id, seed, count):
    trained = [(s["antenna"]["i"], s["antenna"]["j"]) for s in manifest["samples"]
               if s["subject"] == subject_id]
    return random_antenna_locations(grid, [seed, subject_index], count,
                                    ring_count=manifest["ring_count"], exclude=trained)


def cmd_interp(dataset_dir, checkpoint, seed, count, report_path=None):
    """Surrogate accuracy at freshly solved, non-ring antenna positions."""
    manifest, model = _checked_model(dataset_dir, checkpoint)
    materials = _manifest_materials(manifest)
    sv = manifest["solver"]
    pml = PmlConfig(sv["pml"]["thickness"], sv["pml"]["order"], sv["pml"]["reflection"])
    refine_cfg = type("R", (), {"refine": sv.get("refine", "off")})
    rows, sol_t, sur_t = [], [], []
    val = [s for s in manifest["subjects"] if s["split"] == "val"]
    if not val:
        raise ValidationError("dataset has no validation subjects")
    for k, subj in enumerate(manifest["subjects"]):
        if subj["split"] != "val":
            continue
        grid = subject_grid(dataset_dir, manifest, subj["id"])
        refine = refinement_for(refine_cfg, grid, materials, manifest["frequency"])
        for ant in interp_locations(manifest, grid, k, subj["id"], seed, count):
            try:
                y, stats = compute_field(grid, materials, manifest["frequency"], ant, pml,
                                         sv["tolerance"], refine=refine)
            except ConvergenceError as exc:
                raise DatasetFailure(f"interpolation solve at ({ant.i}, {ant.j}) failed: "
                                     f"{exc}") from None
            sol_t.append(stats.wall_time)
            t0 = time.perf_counter()
            yhat = forward(model, encode_input(grid, ant))
            sur_t.append(time.perf_counter() - t0)
            rows.append({"subject": subj["id"], "antenna": [ant.i, ant.j],
                         "trained_ring": False, **metrics.sample_metrics(y, yhat)})
    report = metrics.build_report("interp", manifest["frequency"], rows,
                                  _timing_block(sol_t, sur_t))
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report, indent=2) + "\n")
    return report


def cmd_bench(dataset_dir, checkpoints, repetitions=10, refine="off", out_path=None):
    """Time solver runs against surrogate forwards on identical inputs.

    The first validation sample (or first sample) supplies geometry; each
    checkpoint is benchmarked at its own frequency with one warm-up run of
    each path beforehand.
    """
    if repetitions < 5:
        raise ConfigError("bench needs at least 5 repetitions")
    if not checkpoints:
        raise ConfigError("bench needs at least one checkpoint")
    manifest = validate_manifest(dataset_dir)
    samples = [s for s in manifest["samples"] if s["split"] == "val"] or manifest["samples"]
    sample = samples[0]
    grid = subject_grid(dataset_dir, manifest, sample["subject"])
    ant = AntennaPlacement(sample["antenna"]["i"], sample["antenna"]["j"])
    sv = manifest["solver"]
    pml = PmlConfig(sv["pml"]["thickness"], sv["pml"]["order"], sv["pml"]["reflection"])
    mat_src = manifest.get("materials", "bundled")
    refine_cfg = type("R", (), {"refine": refine})
    rows = []
    for ckpt in checkpoints:
        model = load_checkpoint(ckpt)
        f = model.frequency
        materials = (default_material_table(f) if mat_src == "bundled"
                     else load_material_table(mat_src, f))
        factor = refinement_for(refine_cfg, grid, materials, f)

        def run_solver():
            t0 = time.perf_counter()
            compute_field(grid, materials, f, ant, pml, sv["tolerance"], refine=factor)
            return time.perf_counter() - t0

        def run_surrogate():
            t0 = time.perf_counter()
            predict(model, encode_input(grid, ant))
            return time.perf_counter() - t0

        run_solver()
        run_surrogate()
        st = [run_solver() for _ in range(repetitions)]
        su = [run_surrogate() for _ in range(repetitions)]
        ms, mm, ratio = metrics.timing_comparison(st, su)
        rows.append({"frequency": f, "refine": factor, "checkpoint": str(ckpt),
                     "solver_mean_s": ms, "solver_std_s": float(np.std(st)),
                     "surrogate_mean_s": mm, "surrogate_std_s": float(np.std(su)),
                     "speedup": ratio})
    lat = np.array([r["surrogate_mean_s"] for r in rows])
    result = {
        "schema_version": TIMING_SCHEMA,
        "grid": {"width": grid.width, "height": grid.height, "spacing": grid.spacing},
        "repetitions": repetitions,
        "per_frequency": rows,
        "mean_speedup": float(np.mean([r["speedup"] for r in rows])),
        "surrogate_latency_variation": float((lat.max() - lat.min()) / lat.mean()),
    }
    if out_path is not None:
        Path(out_path).write_text(json.dumps(result, indent=2) + "\n")
    return result
