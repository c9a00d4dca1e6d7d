"""``emu`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, render
from .config import RunConfig
from .dataset import MANIFEST, export_labels, import_labels, read_field, write_field
from .errors import ConfigError, EmuError
from .phantom import AntennaPlacement, default_material_table, generate_phantom, load_material_table
from .solver import PmlConfig, auto_refinement, compute_field

log = logging.getLogger("emu")


def _load_config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "train_subjects": getattr(args, "train_subjects", None),
        "val_subjects": getattr(args, "val_subjects", None),
        "antennas": getattr(args, "antennas", None),
        "frequencies": getattr(args, "frequencies", None),
        "width": getattr(args, "width", None),
        "height": getattr(args, "height", None),
        "spacing": getattr(args, "spacing", None),
        "phantom_seed": getattr(args, "phantom_seed", None),
        "refine": getattr(args, "refine", None),
        "materials": getattr(args, "materials", None),
        "epochs": getattr(args, "epochs", None),
        "learning_rate": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "seed": getattr(args, "seed", None),
    }
    return cfg.override(**overrides)


def _emit(obj):
    print(json.dumps(obj, indent=2))


def cmd_dataset(args):
    cfg = _load_config(args)
    out = []
    for d, m in harness.cmd_dataset(cfg, args.output, deterministic=args.deterministic):
        out.append({"directory": str(d), "frequency": m["frequency"],
                    "samples": len(m["samples"])})
    _emit(out)


def cmd_train(args):
    cfg = _load_config(args)

    def progress(entry):
        log.info("epoch %d train %.4g val %s", entry["epoch"], entry["train_mse"],
                 entry.get("val_mse"))

    model, path, log_path = harness.cmd_train(args.dataset, cfg, args.output, callback=progress)
    _emit({"checkpoint": str(path), "log": str(log_path), "epochs": len(model.trace)})


def cmd_eval(args):
    report = harness.cmd_eval(args.dataset, args.checkpoint, args.output)
    _emit(report["summary"])


def cmd_interp(args):
    report = harness.cmd_interp(args.dataset, args.checkpoint, args.seed, args.count,
                                args.output)
    _emit({"summary": report["summary"], "subjects": report["subjects"]})


def cmd_bench(args):
    refine = "auto" if args.refine == "auto" else "off"
    result = harness.cmd_bench(args.dataset, args.checkpoints, args.repetitions, refine,
                               args.output)
    _emit(result)


def _field_dims(path, width, height):
    if width and height:
        return width, height
    manifest = Path(path).parent / MANIFEST
    if not manifest.is_file():
        raise ConfigError("pass --width/--height or render a file inside a dataset directory")
    g = json.loads(manifest.read_text())["grid"]
    return g["width"], g["height"]


def cmd_render(args):
    w, h = _field_dims(args.field, args.width, args.height)
    field = read_field(args.field, w, h, 0.0)
    ref = read_field(args.reference, w, h, 0.0) if args.reference else None
    render.write_ppm(render.to_rgb(field, args.mode, ref), args.output)
    _emit({"image": args.output, "mode": args.mode, "width": w, "height": h})


def cmd_solve(args):
    if args.labels:
        if not (args.width and args.height):
            raise ConfigError("--labels needs --width and --height")
        grid = import_labels(args.labels, args.width, args.height, args.spacing)
    else:
        grid = generate_phantom(args.phantom_seed, args.width or 64, args.height or 64,
                                args.spacing)
    materials = (load_material_table(args.materials, args.frequency) if args.materials
                 else default_material_table(args.frequency))
    ant = AntennaPlacement(*args.antenna)
    refine = (auto_refinement(grid, materials, args.frequency) if args.refine == "auto"
              else int(args.refine))
    field, stats = compute_field(grid, materials, args.frequency, ant,
                                 PmlConfig(args.pml_thickness), args.tolerance, refine=refine)
    write_field(field, args.output)
    _emit({"field": args.output, "peak": float(np.abs(field.values).max()),
           "refine": refine, **stats.to_dict()})


def cmd_import(args):
    grid = import_labels(args.file, args.width, args.height, args.spacing)
    if args.output:
        export_labels(grid, args.output)
    counts = np.bincount(grid.labels.ravel(), minlength=13)
    _emit({"width": grid.width, "height": grid.height, "spacing": grid.spacing,
           "label_counts": {str(k): int(c) for k, c in enumerate(counts) if c}})


def build_parser():
    p = argparse.ArgumentParser(prog="emu", description="FDFD field solver and U-Net surrogate")
    p.add_argument("--deterministic", action="store_true",
                   help="single worker, fixed execution order")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--train-subjects", type=int)
        sp.add_argument("--val-subjects", type=int)
        sp.add_argument("--antennas", type=int)
        sp.add_argument("--frequencies", type=float, nargs="+")
        sp.add_argument("--width", type=int)
        sp.add_argument("--height", type=int)
        sp.add_argument("--spacing", type=float)
        sp.add_argument("--phantom-seed", type=int)
        sp.add_argument("--refine", help='"off" or "auto"')
        sp.add_argument("--materials", help="material table JSON")

    sp = sub.add_parser("dataset", help="generate phantoms and ground-truth fields")
    run_opts(sp)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_dataset)

    sp = sub.add_parser("train", help="train a surrogate on a dataset")
    sp.add_argument("dataset")
    run_opts(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("-o", "--output", required=True, help="checkpoint path")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    sp.add_argument("dataset")
    sp.add_argument("checkpoint")
    sp.add_argument("-o", "--output", default="report.json")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("interp", help="evaluate at random non-ring antenna positions")
    sp.add_argument("dataset")
    sp.add_argument("checkpoint")
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("-o", "--output", default="interp_report.json")
    sp.set_defaults(func=cmd_interp)

    sp = sub.add_parser("bench", help="time solver against surrogate")
    sp.add_argument("dataset")
    sp.add_argument("checkpoints", nargs="+", help="one checkpoint per frequency")
    sp.add_argument("--repetitions", type=int, default=10)
    sp.add_argument("--refine", choices=("off", "auto"), default="off")
    sp.add_argument("-o", "--output", default="timing.json")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("render", help="write a PPM image of a field or difference map")
    sp.add_argument("field")
    sp.add_argument("--reference", help="ground-truth field for AD/RD/PD")
    sp.add_argument("--mode", choices=render.MODES, default="amplitude-log")
    sp.add_argument("--width", type=int)
    sp.add_argument("--height", type=int)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("solve", help="single FDFD solve")
    sp.add_argument("--labels", help="raw uint8 label file (default: generated phantom)")
    sp.add_argument("--phantom-seed", type=int, default=0)
    sp.add_argument("--width", type=int)
    sp.add_argument("--height", type=int)
    sp.add_argument("--spacing", type=float, default=3e-3)
    sp.add_argument("--frequency", type=float, default=4e8)
    sp.add_argument("--antenna", type=int, nargs=2, required=True, metavar=("I", "J"))
    sp.add_argument("--materials")
    sp.add_argument("--pml-thickness", type=int, default=10)
    sp.add_argument("--tolerance", type=float, default=1e-8)
    sp.add_argument("--refine", default="1", help='odd factor or "auto"')
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("import", help="validate a raw label file")
    sp.add_argument("file")
    sp.add_argument("width", type=int)
    sp.add_argument("height", type=int)
    sp.add_argument("spacing", type=float)
    sp.add_argument("-o", "--output", help="re-export the validated labels here")
    sp.set_defaults(func=cmd_import)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except EmuError as exc:
        print(f"error: {exc.category}: {str(exc).splitlines()[0] if str(exc) else ''}",
              file=sys.stderr)
        return 1
    except (OSError, IndexError) as exc:
        cat = "io" if isinstance(exc, OSError) else "precondition"
        print(f"error: {cat}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
