"""Command-line entry point: ``jointmae <subcommand> ...``.

Exit status: 0 on success, 1 on a usage error (bad flag, missing file,
invalid config), 2 when the run itself fails.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..engine import checkpoint
from ..geometry import normalize_to_cube, project_depth, read_points, view_from_angles, write_pgm
from .ablate import AXES, run_ablation
from .config import DatasetSpec, RunConfig, preset_config
from .data import stack, synth_dataset
from .model import init_model
from .probe import extract_features, linear_probe
from .reconstruct import reconstruct, write_reconstruction
from .report import plot_ablation, plot_loss_curves, plot_reconstruction
from .train import TrainingAborted, load_checkpoint, pretrain, read_log

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(_existing(args.config)) if args.config else preset_config(args.preset)
    over = {}
    if args.out_dir:
        over["out_dir"] = args.out_dir
    if args.epochs:
        over["epochs"] = args.epochs
        over["warmup_epochs"] = min(cfg.warmup_epochs, max(args.epochs - 1, 0) / 2)
    return replace(cfg, **over) if over else cfg


def _dataset_spec(arg: str | None, fallback: DatasetSpec) -> DatasetSpec:
    """``--dataset`` is a JSON file, inline JSON, or omitted (use the checkpoint's)."""
    if arg is None:
        return fallback
    text = Path(arg).read_text() if Path(arg).is_file() else arg
    try:
        d = json.loads(text)
    except json.JSONDecodeError:
        raise UsageError(f"--dataset is neither a file nor JSON: {arg}") from None
    return replace(fallback, **d)


def parse_view(spec: str, default_size: int):
    """``"azimuth,elevation[,size]"`` in degrees / pixels."""
    try:
        parts = [float(x) for x in spec.split(",")]
    except ValueError:
        raise UsageError(f"bad --view {spec!r}; expected 'azimuth,elevation[,size]'") from None
    if len(parts) not in (2, 3):
        raise UsageError(f"bad --view {spec!r}; expected 'azimuth,elevation[,size]'")
    size = int(parts[2]) if len(parts) == 3 else default_size
    return view_from_angles(parts[0], parts[1], size, size)


# ---------------------------------------------------------------- subcommands


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    resume = _existing(args.resume) if args.resume else None
    res = pretrain(cfg, resume=resume, log=print)
    fig = plot_loss_curves(res.rows, Path(cfg.out_dir) / "loss_curves.png")
    print(f"checkpoint: {res.checkpoint}\nlog: {res.log}\nfigure: {fig}")
    return EXIT_OK


def cmd_probe(args) -> int:
    tree, _, cfg, _ = load_checkpoint(_existing(args.checkpoint))
    spec = _dataset_spec(args.dataset, cfg.dataset)
    train, test = synth_dataset(spec, args.data_seed if args.data_seed is not None else cfg.data_seed,
                                cfg.dims.n_points)
    (xtr, ytr), (xte, yte) = stack(train), stack(test)
    acc = linear_probe(extract_features(tree, cfg.dims, xtr), ytr, extract_features(tree, cfg.dims, xte), yte,
                       args.reg if args.reg is not None else cfg.probe_reg)
    print(f"probe accuracy: {100 * acc:.2f}%")
    if args.baseline:
        rnd = init_model(cfg.dims, cfg.seed, cfg.frozen_pe2d)
        acc0 = linear_probe(extract_features(rnd, cfg.dims, xtr), ytr, extract_features(rnd, cfg.dims, xte), yte,
                            args.reg if args.reg is not None else cfg.probe_reg)
        print(f"random-init accuracy: {100 * acc0:.2f}%")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    tree, _, cfg, _ = load_checkpoint(_existing(args.checkpoint))
    pts = read_points(_existing(args.input))
    rec = reconstruct(tree, cfg, pts, seed=args.seed)
    files = write_reconstruction(rec, args.out_dir)
    fig = plot_reconstruction(rec.inputs, rec.centers, rec.visible, rec.reconstructed, rec.depth_in,
                              rec.depth_out, Path(args.out_dir) / "panels.png")
    for f in files + [fig]:
        print(f)
    return EXIT_OK


def cmd_project(args) -> int:
    pts = normalize_to_cube(read_points(_existing(args.input)))
    view = parse_view(args.view, args.size)
    depth = project_depth(pts, view)
    write_pgm(args.out, depth)
    print(f"{args.out}: {int(np.count_nonzero(depth))} foreground pixels of {depth.size}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from ..gradsuite import run_suite

    results = run_suite(range(args.seeds), include_stack=not args.ops_only, log=print)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else Path(cfg.out_dir) / f"ablate_{args.axis}.csv"
    run_ablation(args.axis, cfg, out, log=print)
    fig = plot_ablation(out, out.with_suffix(".png"))
    print(f"table: {out}\nfigure: {fig}")
    return EXIT_OK


def cmd_report(args) -> int:
    log = _existing(args.log)
    fig = plot_loss_curves(read_log(log), args.out or log.with_name("loss_curves.png"))
    print(fig)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointmae", description="2D-3D joint masked autoencoding for point clouds at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_opts(sp):
        sp.add_argument("--config", help="JSON run configuration (keys override the preset)")
        sp.add_argument("--preset", default="desk", choices=("desk", "full", "tiny"))
        sp.add_argument("--out-dir", help="override the output directory")
        sp.add_argument("--epochs", type=int, help="override the epoch count")

    sp = sub.add_parser("pretrain", help="pre-train and write checkpoints, log.csv and loss_curves.png")
    run_opts(sp)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("probe", help="linear-probe accuracy of a checkpoint's 3D features")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", help="dataset spec as JSON (file or inline); default: the checkpoint's")
    sp.add_argument("--data-seed", type=int)
    sp.add_argument("--reg", type=float)
    sp.add_argument("--baseline", action="store_true", help="also probe a random-init encoder")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("reconstruct", help="dump masked / reconstructed XYZ, PGM and a panel figure")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help="XYZ or OFF point cloud")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int, default=0, help="selects the view and the mask")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("project", help="hard depth projection of a point cloud to PGM")
    sp.add_argument("--input", required=True, help="XYZ or OFF point cloud")
    sp.add_argument("--view", default="30,20", help="'azimuth,elevation[,size]' in degrees")
    sp.add_argument("--size", type=int, default=224, help="image size when --view omits it")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_project)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op and the full stack")
    sp.add_argument("--seeds", type=int, default=10)
    sp.add_argument("--ops-only", action="store_true")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="sweep one ablation axis; writes a CSV and a bar chart")
    run_opts(sp)
    sp.add_argument("--axis", required=True, choices=AXES)
    sp.add_argument("--out", help="CSV path (default: <out-dir>/ablate_<axis>.csv)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="re-render the loss figure from a log.csv")
    sp.add_argument("--log", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
