"""On-disk dataset container: raw label/field files plus a JSON manifest.

Layout of a dataset directory::

    manifest.json        schema below; no timestamps
    dataset_log.json     wall times and run timestamps
    s000.labels          raw uint8 labels, row-major, top row first
    s000_a00.field       raw little-endian float32 (re, im) pairs, row-major

The manifest is rewritten in full by a single writer after every run.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ConvergenceError, LabelImportError, ValidationError
from .phantom import (
    MAX_LABEL,
    AntennaPlacement,
    TissueLabelGrid,
    antenna_ring,
    default_material_table,
    generate_phantom,
    load_material_table,
)
from .solver import FieldMap, auto_refinement, compute_field

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
DATASET_LOG = "dataset_log.json"
MANIFEST_SCHEMA = 1
WORKERS_ENV = "EMU_WORKERS"


def import_labels(path, width, height, spacing):
    data = Path(path).read_bytes()
    if len(data) != width * height:
        raise LabelImportError(
            f"{path}: {len(data)} bytes, expected {width}x{height} = {width * height}",
            offset=min(len(data), width * height))
    arr = np.frombuffer(data, dtype=np.uint8)
    bad = np.flatnonzero(arr > MAX_LABEL)
    if bad.size:
        off = int(bad[0])
        raise LabelImportError(
            f"{path}: label {arr[off]} at byte offset {off} exceeds {MAX_LABEL}", offset=off)
    return TissueLabelGrid(arr.reshape(height, width).copy(), float(spacing))


def export_labels(grid, path):
    Path(path).write_bytes(grid.to_bytes())
    return Path(path)


def write_field(field, path):
    Path(path).write_bytes(field.to_bytes())


def read_field(path, width, height, frequency):
    return FieldMap.from_bytes(Path(path).read_bytes(), width, height, frequency)


def frequency_tag(frequency):
    return f"{frequency / 1e6:g}MHz"


def material_table(config, frequency):
    if config.materials:
        return load_material_table(config.materials, frequency)
    return default_material_table(frequency)


def refinement_for(config, grid, materials, frequency):
    if config.refine in (None, "off", 1):
        return 1
    if config.refine == "auto":
        return auto_refinement(grid, materials, frequency)
    table = {float(k): int(v) for k, v in dict(config.refine).items()}
    return table.get(float(frequency), 1)


def worker_count(deterministic=False):
    if deterministic:
        return 1
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _solve_job(job):
    grid, materials, frequency, antenna, pml, tol, maxit, refine = job
    try:
        field, stats = compute_field(grid, materials, frequency, antenna, pml, tol, maxit,
                                     refine=refine)
    except ConvergenceError as exc:
        return None, {"error": str(exc), "residual": exc.best_residual,
                      "iterations": exc.iterations}
    return field.to_bytes(), stats.to_dict()


def _verified(path, nbytes):
    p = Path(path)
    return p.is_file() and p.stat().st_size == nbytes


def build_dataset(config, outdir, frequency, workers=1):
    """Generate (or complete) the dataset for one frequency; returns the manifest."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    w, h = config.width, config.height
    materials = material_table(config, frequency)
    previous = {}
    if (out / MANIFEST).is_file():
        try:
            old = json.loads((out / MANIFEST).read_text())
            previous = {s["field_file"]: s for s in old.get("samples", [])
                        if s.get("status") == "ok"}
        except (json.JSONDecodeError, KeyError):
            previous = {}

    subjects, samples, jobs = [], [], []
    for k in range(config.subjects):
        sid = f"s{k:03d}"
        seed = config.phantom_seed + k
        grid = generate_phantom(seed, w, h, config.spacing)
        labels_file = f"{sid}.labels"
        if not (_verified(out / labels_file, w * h)
                and (out / labels_file).read_bytes() == grid.to_bytes()):
            export_labels(grid, out / labels_file)
        split = "train" if k < config.train_subjects else "val"
        subjects.append({"id": sid, "seed": seed, "split": split, "labels_file": labels_file})
        refine = refinement_for(config, grid, materials, frequency)
        for a, ant in enumerate(antenna_ring(grid, config.antennas)):
            field_file = f"{sid}_a{a:02d}.field"
            rec = {"subject": sid, "split": split,
                   "antenna": {"i": ant.i, "j": ant.j, "trained_ring": True, "ring_index": a},
                   "labels_file": labels_file, "field_file": field_file}
            prior = previous.get(field_file)
            if (prior is not None and prior["antenna"]["i"] == ant.i
                    and prior["antenna"]["j"] == ant.j and _verified(out / field_file, w * h * 8)):
                rec.update(status="ok", solver_stats=prior["solver_stats"])
            else:
                jobs.append((len(samples), (grid, materials, frequency, ant, config.pml,
                                            config.solver_tolerance,
                                            config.solver_max_iterations, refine)))
            samples.append(rec)

    timings = []
    t0 = time.perf_counter()
    if jobs:
        log.info("solving %d samples at %s with %d worker(s)", len(jobs),
                 frequency_tag(frequency), workers)
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                results = list(pool.map(_solve_job, [j for _, j in jobs]))
        else:
            results = [_solve_job(j) for _, j in jobs]
        for (idx, _), (data, stats) in zip(jobs, results):
            rec = samples[idx]
            if data is None:
                rec.update(status="failed", solver_stats={
                    "iterations": stats["iterations"], "residual": stats["residual"]},
                    error=stats["error"])
                continue
            (out / rec["field_file"]).write_bytes(data)
            timings.append({"field_file": rec["field_file"], "wall_time": stats["wall_time"]})
            rec.update(status="ok", solver_stats={"iterations": stats["iterations"],
                                                  "residual": stats["residual"]})

    scale = None
    train_ok = [s for s in samples if s["split"] == "train" and s["status"] == "ok"]
    if train_ok and len(train_ok) == sum(s["split"] == "train" for s in samples):
        peaks = [float(np.abs(read_field(out / s["field_file"], w, h, frequency).values).max())
                 for s in train_ok]
        scale = float(np.median(peaks))

    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "frequency": float(frequency),
        "grid": {"width": w, "height": h, "spacing": config.spacing},
        "scale": scale,
        "ring_count": config.antennas,
        "solver": {"tolerance": config.solver_tolerance, "pml": {
            "thickness": config.pml_thickness, "order": config.pml_order,
            "reflection": config.pml_reflection}, "refine": config.refine},
        "materials": config.materials or "bundled",
        "subjects": subjects,
        "samples": samples,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _append_log(out, {"timestamp": time.time(), "frequency": float(frequency),
                      "solved": len(jobs), "elapsed_s": time.perf_counter() - t0,
                      "solves": timings})
    return manifest


def _append_log(out, entry):
    path = out / DATASET_LOG
    runs = []
    if path.is_file():
        try:
            runs = json.loads(path.read_text())
        except json.JSONDecodeError:
            runs = []
    runs.append(entry)
    path.write_text(json.dumps(runs, indent=2) + "\n")


def load_manifest(directory):
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise ValidationError(f"no {MANIFEST} in {directory}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def validate_manifest(directory, manifest=None):
    """Check file presence/lengths, split disjointness and sample status."""
    d = Path(directory)
    m = manifest if manifest is not None else load_manifest(d)
    if m.get("schema_version") != MANIFEST_SCHEMA:
        raise ValidationError(f"unsupported manifest schema {m.get('schema_version')}")
    w, h = m["grid"]["width"], m["grid"]["height"]
    train = {s["id"] for s in m["subjects"] if s["split"] == "train"}
    val = {s["id"] for s in m["subjects"] if s["split"] == "val"}
    if train & val:
        raise ValidationError(f"subjects in both splits: {sorted(train & val)}")
    for s in m["subjects"]:
        if not _verified(d / s["labels_file"], w * h):
            raise ValidationError(f"labels file {s['labels_file']} missing or not {w * h} bytes")
    for s in m["samples"]:
        if s.get("status") != "ok":
            raise ValidationError(f"sample {s['field_file']} is marked {s.get('status')}")
        if not _verified(d / s["field_file"], w * h * 8):
            raise ValidationError(
                f"field file {s['field_file']} missing or not {w * h * 8} bytes")
    return m


def subject_grid(directory, manifest, subject_id):
    g = manifest["grid"]
    entry = next(s for s in manifest["subjects"] if s["id"] == subject_id)
    return import_labels(Path(directory) / entry["labels_file"], g["width"], g["height"],
                         g["spacing"])


def load_split(directory, manifest, split):
    """Stacked encodings, complex targets and sample records for one split."""
    from .surrogate import encode_input

    d = Path(directory)
    g = manifest["grid"]
    grids = {}
    enc, tg, recs = [], [], []
    for s in manifest["samples"]:
        if s["split"] != split:
            continue
        if s["subject"] not in grids:
            grids[s["subject"]] = subject_grid(d, manifest, s["subject"])
        ant = AntennaPlacement(s["antenna"]["i"], s["antenna"]["j"])
        enc.append(encode_input(grids[s["subject"]], ant))
        tg.append(read_field(d / s["field_file"], g["width"], g["height"],
                             manifest["frequency"]).values)
        recs.append(s)
    if not recs:
        return (np.zeros((0, g["height"], g["width"]), np.float32),
                np.zeros((0, g["height"], g["width"]), complex), [], grids)
    return np.stack(enc), np.stack(tg), recs, grids


def same_frequency(a, b):
    return math.isclose(float(a), float(b), rel_tol=1e-9)
