"""Command-line entry point.

Exit codes: 0 success, 1 config or checkpoint error, 2 data error,
3 numerical abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .bench import benchmark, format_bench
from .checkpoint import load_file
from .data import VoxelDataset
from .errors import ConfigError, DataError, FormatError, LMSCNetError, NumericalError
from .metrics import IOU_ABSENT_MODES, evaluate, report_metrics
from .model import LMSCNet, build, parse_scales
from .ply import export_ply
from .synthetic import write_dataset
from .training import train
from .voxel import SEMANTIC_KITTI_CLASSES, ClassTable, GridDims, LabelGrid, grid_to_input, load_labels, load_occupancy, save_labels

log = logging.getLogger("lmscnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


def _dims(text: str, voxel_size: float = 0.2) -> GridDims:
    try:
        nx, ny, nz = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"dims must look like 256,256,32, got {text!r}") from exc
    return GridDims(nx, ny, nz, voxel_size)


def _classes(text: str | None) -> ClassTable:
    return ClassTable(tuple(text.split(","))) if text else ClassTable(SEMANTIC_KITTI_CLASSES)


def _load_checkpoint(path) -> LMSCNet:
    try:
        model, _ = load_file(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    return model


def _parse_overrides(tokens: list[str]) -> dict:
    """``--key value`` or ``--key=value`` pairs for any dotted config key."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens):
            value = tokens[i + 1]
            i += 2
        else:
            raise ConfigError(f"missing value for {tok}")
        if key not in cfgmod.valid_keys():
            raise ConfigError(f"unknown option --{key}")
        out[key] = cfgmod.parse_value(value)
    return out


def cmd_train(args, extra: list[str]) -> int:
    overrides = _parse_overrides(extra)
    if args.seed is not None:
        overrides["seed"] = args.seed
    run = cfgmod.load(args.config, overrides)
    if run.manifest is None:
        raise ConfigError("no dataset manifest given (data.manifest)")
    dataset = VoxelDataset.from_manifest(run.manifest)
    if dataset.classes.num_semantic != run.model.num_classes or dataset.dims.shape != (run.model.nx, run.model.ny, run.model.nz):
        raise ConfigError(
            f"model expects {run.model.num_classes} classes on {run.model.nx}x{run.model.ny}x{run.model.nz}, "
            f"dataset has {dataset.classes.num_semantic} on {dataset.dims.nx}x{dataset.dims.ny}x{dataset.dims.nz}"
        )
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfgmod.dumps(run))
    result = train(build(run.model), dataset, run.train, out_dir=out)
    print(f"final checkpoint: {result.final_checkpoint}")
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    model = _load_checkpoint(args.checkpoint)
    dataset = VoxelDataset.from_manifest(args.manifest)
    report = evaluate(model, dataset, parse_scales(args.scales), args.iou_absent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.txt", "w") as table, open(out / "metrics.json", "w") as twin:
        text = report_metrics(report, table, twin)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_infer(args, extra) -> int:
    model = _load_checkpoint(args.checkpoint)
    cfg = model.config
    dims = GridDims(cfg.nx, cfg.ny, cfg.nz, args.voxel_size)
    try:
        occ = load_occupancy(Path(args.input).read_bytes(), dims)
    except (OSError, FormatError) as exc:
        raise DataError(f"cannot use input {args.input}: {exc}") from exc
    level = args.scale
    pred = model.predict(grid_to_input(occ), (level,))[level][0]
    Path(args.out).write_bytes(save_labels(LabelGrid(dims.scaled(2**level), pred)))
    print(f"wrote {pred.size} labels at scale 1:{2**level} to {args.out}")
    return EXIT_OK


def cmd_bench(args, extra) -> int:
    if args.checkpoint:
        model = _load_checkpoint(args.checkpoint)
    else:
        model = build(cfgmod.load(args.config, _parse_overrides(extra)).model)
    reports = [benchmark(model, parse_scales(s), args.reps, args.warmup) for s in args.scales]
    sys.stdout.write(format_bench(reports))
    if args.json:
        Path(args.json).write_text("".join(r.to_json() for r in reports))
    return EXIT_OK


def cmd_make_synthetic(args, extra) -> int:
    classes = _classes(args.classes) if args.classes else ClassTable(("road", "building", "car"))
    path = write_dataset(args.out, args.count, _dims(args.dims, args.voxel_size), args.seed, classes)
    print(f"manifest: {path}")
    return EXIT_OK


def cmd_export_ply(args, extra) -> int:
    dims = _dims(args.dims, args.voxel_size)
    classes = _classes(args.classes)
    try:
        grid = load_labels(Path(args.labels).read_bytes(), dims)
        grid.validate(classes.num_classes)
    except (OSError, FormatError) as exc:
        raise DataError(f"cannot use labels {args.labels}: {exc}") from exc
    text = export_ply(grid, classes)
    Path(args.out).write_text(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lmscnet", description="Multiscale semantic scene completion from sparse occupancy.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file; any dotted key can be given as --key value")
    t.add_argument("--config", help="TOML file with flat dotted keys")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--scales", default="0")
    e.add_argument("--iou-absent", choices=IOU_ABSENT_MODES, default="exclude")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict labels for one occupancy file")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--scale", type=int, choices=(0, 1, 2, 3), default=0)
    i.add_argument("--voxel-size", type=float, default=0.2)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="latency, FPS, params and FLOPs per scale set")
    src = b.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--config")
    b.add_argument("--scales", nargs="+", default=["0,1,2,3", "1", "2", "3"],
                   help="scale sets to time, e.g. 0,1,2,3 3")
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--json", help="write the reports as JSON lines here")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("make-synthetic", help="generate procedural scenes and a manifest")
    m.add_argument("--out", required=True)
    m.add_argument("--count", type=int, default=8)
    m.add_argument("--dims", default="64,64,8")
    m.add_argument("--voxel-size", type=float, default=0.2)
    m.add_argument("--classes", help="comma-separated semantic class names (default road,building,car)")
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_synthetic)

    x = sub.add_parser("export-ply", help="write labelled voxels as a coloured PLY point file")
    x.add_argument("--labels", required=True)
    x.add_argument("--dims", required=True)
    x.add_argument("--voxel-size", type=float, default=0.2)
    x.add_argument("--classes", help="comma-separated class names (default: the 19 benchmark classes)")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_ply)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if extra and args.command not in ("train", "bench"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        return args.func(args, extra)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LMSCNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
