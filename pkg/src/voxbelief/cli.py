"""Command-line entry point.

Subcommands: voxelize, synth, train, finetune, complete, classify, nbv,
episode, eval.  All output files are written atomically (temp file plus
rename).  Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
failure.  Every piece of randomness derives from the --seed flag, so a
fixed seed reproduces outputs byte for byte, independent of --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import fields

import numpy as np

from voxbelief import evaluation
from voxbelief.camera import CameraPose, load_observation, save_observation
from voxbelief.errors import DataError, NumericError, VoxBeliefError
from voxbelief.geometry import (
    SYNTHETIC_CLASSES,
    GridSpec,
    generate_synthetic,
    load_off,
    load_voxel_grid,
    save_voxel_grid,
    voxel_grid_to_bytes,
    voxelize_mesh,
)
from voxbelief.inference import classify, gibbs_complete
from voxbelief.nbv import ALL_STRATEGIES, NBVBudgets, choose_next_view, plan_episode
from voxbelief.network import (
    build_network,
    desk_architecture,
    load_checkpoint,
    paper_architecture,
    save_checkpoint,
)
from voxbelief.training import (
    TrainConfig,
    discriminative_finetune,
    load_train_config,
    pretrain,
    wake_sleep_finetune,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def atomic_write_bytes(path, data: bytes) -> None:
    """No partially written file is ever observable at ``path``."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-voxbelief-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("ascii"))


def _load_dataset_dir(data_dir):
    """Class subdirectories of .vox files; class indices by sorted name."""
    classes = sorted(d for d in os.listdir(data_dir)
                     if os.path.isdir(os.path.join(data_dir, d)))
    if not classes:
        raise DataError(f"no class subdirectories under {data_dir}")
    grids, labels = [], []
    for ci, cls in enumerate(classes):
        sub = os.path.join(data_dir, cls)
        for name in sorted(os.listdir(sub)):
            if name.endswith(".vox"):
                grids.append(load_voxel_grid(os.path.join(sub, name)))
                labels.append(ci)
    if not grids:
        raise DataError(f"no .vox files under {data_dir}")
    return grids, np.array(labels), classes


def _build_parser() -> _Parser:
    parser = _Parser(prog="voxbelief",
                     description="Generative voxel shape model: train, complete, "
                                 "classify, plan views.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("voxelize", help="voxelize an OFF mesh", formatter_class=fmt)
    p.add_argument("--mesh", required=True, help="input OFF file")
    p.add_argument("--out", required=True, help="output .vox file")
    p.add_argument("--dims", type=int, default=30, help="grid side length")
    p.add_argument("--pad", type=int, default=3, help="padding shell width")

    p = sub.add_parser("synth", help="generate a synthetic shape", formatter_class=fmt)
    p.add_argument("--class", dest="class_id", required=True,
                   choices=[c.replace("_", "-") for c in SYNTHETIC_CLASSES]
                   + list(SYNTHETIC_CLASSES))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, default=30)
    p.add_argument("--pad", type=int, default=3)

    p = sub.add_parser("train", help="pretrain a network on a dataset directory",
                       formatter_class=fmt)
    p.add_argument("--config", required=True, help="key = value training config")
    p.add_argument("--data", required=True, help="dataset directory (class subdirs)")
    p.add_argument("--out", required=True, help="output checkpoint (.cdb)")
    p.add_argument("--arch", choices=["desk", "paper"], default="desk")
    p.add_argument("--diagnostics", default=None, help="CSV diagnostics path")
    p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("finetune", help="fine-tune a pretrained checkpoint",
                       formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["wake-sleep", "discriminative"],
                   default="wake-sleep")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("complete", help="sample shape completions for an observation",
                       formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--obs", required=True, help="observation file (.obs)")
    p.add_argument("--particles", type=int, default=100)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--keep", type=int, default=8, help="completions to write")
    p.add_argument("--labels", default=None, help="comma-separated class names")
    p.add_argument("--out-prefix", required=True,
                   help="prefix for .vox completions and the .jsonl summary")

    p = sub.add_parser("classify", help="estimate the class posterior",
                       formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--particles", type=int, default=100)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None, help="optional JSON output path")

    p = sub.add_parser("nbv", help="score candidate views by mutual information",
                       formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--candidates", type=int, default=8)
    p.add_argument("--radius", type=float, default=26.0)
    p.add_argument("--outer", type=int, default=10)
    p.add_argument("--inner", type=int, default=50)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--image", type=int, default=64, help="render width and height")
    p.add_argument("--focal", type=float, default=64.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None, help="optional JSON output path")

    p = sub.add_parser("episode", help="run a sequential view-planning episode",
                       formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--shape", required=True, help="ground-truth .vox file")
    p.add_argument("--strategy", choices=list(ALL_STRATEGIES) + ["oracle"],
                   default="mi")
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--pose", default=None,
                   help="initial pose as nine decimals (default: seeded random)")
    p.add_argument("--candidates", type=int, default=8)
    p.add_argument("--radius", type=float, default=26.0)
    p.add_argument("--outer", type=int, default=10)
    p.add_argument("--inner", type=int, default=50)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--image", type=int, default=64)
    p.add_argument("--focal", type=float, default=64.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--log", required=True, help="episode log (.jsonl)")

    p = sub.add_parser("eval", help="run the end-to-end desk benchmark",
                       formatter_class=fmt)
    p.add_argument("--config", required=True, help="key = value benchmark config")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--curves-dir", default=None, help="directory for PR curve CSVs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    return parser


def load_benchmark_config(path) -> evaluation.BenchmarkConfig:
    """Flat key = value config covering dataset, training and NBV budgets."""
    cfg = evaluation.BenchmarkConfig()
    train_fields = {f.name for f in fields(TrainConfig)}
    nbv_fields = {f.name for f in fields(NBVBudgets)}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"line {lineno}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            if key == "classes":
                cfg.classes = tuple(v.strip().replace("-", "_")
                                    for v in val.split(","))
            elif key == "dims":
                d = int(val)
                cfg.dims = (d, d, d)
            elif key == "nbv_strategies":
                cfg.nbv_strategies = tuple(v.strip() for v in val.split(","))
            elif key in ("samples_per_class", "payload_origin", "seed",
                         "gibbs_particles", "gibbs_iterations", "knn_k",
                         "svm_epochs", "nbv_episodes", "threads"):
                setattr(cfg, key, int(val))
            elif key in ("train_fraction", "svm_reg"):
                setattr(cfg, key, float(val))
            elif key.startswith("nbv_") and key[4:] in nbv_fields:
                name = key[4:]
                cur = getattr(cfg.nbv, name)
                setattr(cfg.nbv, name, type(cur)(float(val)) if isinstance(cur, float)
                        else int(val))
            elif key in train_fields:
                cur = getattr(cfg.train, key)
                setattr(cfg.train, key, type(cur)(float(val)) if isinstance(cur, float)
                        else int(val))
            else:
                raise DataError(f"line {lineno}: unknown config key {key!r}")
    return cfg


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_voxelize(args) -> int:
    mesh = load_off(args.mesh)
    spec = GridSpec.fit_to_mesh(mesh, dims=(args.dims,) * 3, payload_origin=args.pad)
    grid = voxelize_mesh(mesh, spec)
    atomic_write_bytes(args.out, voxel_grid_to_bytes(grid))
    print(f"voxelized {args.mesh}: {grid.count()} occupied voxels -> {args.out}")
    return 0


def _cmd_synth(args) -> int:
    spec = GridSpec(dims=(args.dims,) * 3, payload_origin=args.pad)
    grid = generate_synthetic(args.class_id, args.seed, spec)
    atomic_write_bytes(args.out, voxel_grid_to_bytes(grid))
    print(f"synthesized {args.class_id} (seed {args.seed}): "
          f"{grid.count()} occupied voxels -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    grids, labels, classes = _load_dataset_dir(args.data)
    dims = grids[0].dims
    arch = desk_architecture(len(classes)) if args.arch == "desk" \
        else paper_architecture(len(classes))
    if tuple(arch.input_dims) != dims:
        raise DataError(f"dataset grids are {dims} but the {args.arch} "
                        f"architecture expects {arch.input_dims}")
    net = build_network(arch, seed=cfg.seed)
    net = pretrain(net, grids, labels, cfg, diagnostics_path=args.diagnostics)
    _save_checkpoint_atomic(net, args.out)
    print(f"trained {args.arch} network on {len(grids)} grids "
          f"({len(classes)} classes) -> {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    net = load_checkpoint(args.model)
    grids, labels, _ = _load_dataset_dir(args.data)
    if args.mode == "wake-sleep":
        net = wake_sleep_finetune(net, grids, labels, cfg)
    else:
        net = discriminative_finetune(net, grids, labels, cfg)
    _save_checkpoint_atomic(net, args.out)
    print(f"{args.mode} fine-tuning done -> {args.out}")
    return 0


def _save_checkpoint_atomic(net, path) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-voxbelief-")
    os.close(fd)
    try:
        save_checkpoint(net, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _class_names(arg, k: int):
    if arg:
        names = [n.strip() for n in arg.split(",")]
        if len(names) != k:
            raise DataError(f"expected {k} class names, got {len(names)}")
        return names
    return [f"class{i}" for i in range(k)]


def _cmd_complete(args) -> int:
    net = load_checkpoint(args.model)
    obs = load_observation(args.obs)
    result = gibbs_complete(net, obs, iterations=args.iters, particles=args.particles,
                            seed=args.seed, threads=args.threads)
    names = _class_names(args.labels, net.K)
    lines = []
    for i, label in enumerate(result.particle_labels):
        lines.append(json.dumps({"particle": i, "label": int(label),
                                 "label_name": names[int(label)]}))
    atomic_write_text(args.out_prefix + ".jsonl", "\n".join(lines) + "\n")
    keep = min(args.keep, len(result.completions))
    for i in range(keep):
        atomic_write_bytes(f"{args.out_prefix}_{i:03d}.vox",
                           voxel_grid_to_bytes(result.completions[i]))
    print(f"winner: {names[result.winner]} "
          f"(p={result.label_dist.probs[result.winner]:.3f}); "
          f"wrote {keep} completions and {args.out_prefix}.jsonl")
    return 0


def _cmd_classify(args) -> int:
    net = load_checkpoint(args.model)
    obs = load_observation(args.obs)
    dist = classify(net, obs, particles=args.particles, iterations=args.iters,
                    seed=args.seed, threads=args.threads)
    payload = json.dumps({"probs": [float(p) for p in dist.probs],
                          "winner": dist.winner()})
    if args.out:
        atomic_write_text(args.out, payload + "\n")
    print(payload)
    return 0


def _cmd_nbv(args) -> int:
    from voxbelief.camera import generate_view_candidates

    net = load_checkpoint(args.model)
    obs = load_observation(args.obs)
    spec = GridSpec(dims=net.input_dims, payload_origin=net.payload_origin)
    budgets = NBVBudgets(outer_samples=args.outer, inner_particles=args.inner,
                         iterations=args.iters, width=args.image, height=args.image,
                         focal_px=args.focal, candidates=args.candidates,
                         radius=args.radius, threads=args.threads)
    candidates = generate_view_candidates(args.candidates, args.radius, spec, args.seed)
    best, scores = choose_next_view(net, obs, candidates, budgets, seed=args.seed)
    payload = json.dumps({
        "best_pose": best.to_string(),
        "scores": [{"pose": s.pose.to_string(),
                    "expected_entropy": s.expected_entropy,
                    "mutual_information": s.mutual_information}
                   for s in scores],
    }, indent=2)
    if args.out:
        atomic_write_text(args.out, payload + "\n")
    print(payload)
    return 0


def _cmd_episode(args) -> int:
    from voxbelief.camera import generate_view_candidates

    net = load_checkpoint(args.model)
    shape = load_voxel_grid(args.shape, net.payload_origin)
    spec = GridSpec(dims=net.input_dims, payload_origin=net.payload_origin)
    budgets = NBVBudgets(outer_samples=args.outer, inner_particles=args.inner,
                         iterations=args.iters, width=args.image, height=args.image,
                         focal_px=args.focal, candidates=args.candidates,
                         radius=args.radius, threads=args.threads)
    if args.pose:
        pose = CameraPose.from_string(args.pose)
    else:
        pose = generate_view_candidates(1, args.radius, spec, args.seed)[0]
    log = plan_episode(net, shape, pose, args.steps, args.strategy, budgets,
                       seed=args.seed)
    atomic_write_text(args.log, log.to_jsonl())
    final = log.steps[-1]
    print(f"episode done: final entropy {final.entropy_after:.4f}, "
          f"winner class {int(np.argmax(final.label_probs))} -> {args.log}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_benchmark_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if args.threads != 1:
        cfg.threads = args.threads
        cfg.nbv.threads = args.threads
    report = evaluation.desk_benchmark(cfg, report_path=args.out,
                                       curves_dir=args.curves_dir)
    if "failed_stage" in report:
        print(f"benchmark failed at stage {report['failed_stage']}: "
              f"{report['error']}", file=sys.stderr)
        return 2
    print(f"benchmark report -> {args.out}")
    return 0


_COMMANDS = {
    "voxelize": _cmd_voxelize,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "complete": _cmd_complete,
    "classify": _cmd_classify,
    "nbv": _cmd_nbv,
    "episode": _cmd_episode,
    "eval": _cmd_eval,
}


def run_command(argv) -> int:
    """Parse and dispatch; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, VoxBeliefError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
