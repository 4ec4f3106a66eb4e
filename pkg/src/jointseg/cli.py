"""Command-line front end.

Subcommands: gen-data, train, infer, eval, grad-check. Exit codes are
category-coded: 0 success, 2 configuration, 3 data files/generation,
4 checkpoints, 5 internal shape/graph contracts, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import SceneFormatError, SceneGenerationError, generate_scene, load_scene, save_scene
from .inference import segment_scene
from .metrics import evaluate
from .train import grad_check, load_network, synthetic_spec, train

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_CONTRACT = 5


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.num_scenes):
        scene = generate_scene(synthetic_spec(cfg, i))
        path = out / f"scene_{i:03d}.scene"
        save_scene(path, scene)
        print(f"wrote {path} ({scene.num_points} points, "
              f"{int(scene.instance_ids.max()) + 1} instances)")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    result = train(cfg, args.out)
    print(f"trained {result.iterations_run} iterations"
          + (" (stopped early)" if result.stopped_early else ""))
    print(f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _save_result(path, seg) -> None:
    with open(path, "w") as f:
        f.write(f"result v1 points={len(seg.semantic)}\n")
        for c, i in zip(seg.semantic, seg.instance):
            f.write(f"{c} {i}\n")


def load_result(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("result v1"):
        raise SceneFormatError(f"{path}: missing result header")
    n = int(lines[0].split("points=")[1])
    if len(lines) < 1 + n:
        raise SceneFormatError(f"{path}: truncated result file")
    rows = np.array([[int(v) for v in line.split()] for line in lines[1: 1 + n]])
    return rows[:, 0], rows[:, 1]


def cmd_infer(args) -> int:
    cfg = _resolve_config(args)
    network = load_network(cfg, args.checkpoint)
    scene = load_scene(args.scene)
    seg = segment_scene(network, scene, block_size=cfg.block_size, stride=cfg.stride,
                        points_per_block=cfg.points_per_block, min_points=cfg.min_block_points,
                        center_xy=cfg.center_xy, mean_shift_cfg=cfg.mean_shift_config(),
                        seed=cfg.seed, voxel_divisions=cfg.voxel_divisions,
                        overlap_threshold=cfg.overlap_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / (Path(args.scene).stem + ".result")
    _save_result(path, seg)
    print(f"segmented {len(seg.semantic)} points into {seg.num_instances} instances "
          f"({seg.uncovered_points} resolved via nearest voxel)")
    print(f"result: {path}")
    return 0


def cmd_eval(args) -> int:
    scene = load_scene(args.scene)
    pred_classes, pred_instances = load_result(args.result)
    if len(pred_classes) != scene.num_points:
        raise SceneFormatError(
            f"result has {len(pred_classes)} points but scene has {scene.num_points}")
    report = evaluate(scene.instance_ids, scene.semantic_labels, pred_instances, pred_classes)
    print(report.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report.to_text() + "\n")
        (out / "report.kv").write_text("\n".join(report.to_kv_lines()) + "\n")
        print(f"report: {out / 'report.txt'}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = _resolve_config(args) if args.config else None
    report = grad_check(cfg)
    print(report.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grad_check.txt").write_text(report.to_text() + "\n")
    return 0 if report.max_rel_error < 1e-5 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointseg",
                                     description="joint instance/semantic point-cloud segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="write synthetic labeled scenes")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment a scene with a trained checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a segmentation result against ground truth")
    p.add_argument("--result", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", default=None, help="optional report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of all gradients")
    common(p, needs_out=False)
    p.add_argument("--out", default=None, help="optional report directory")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SceneFormatError, SceneGenerationError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ad.DimensionError, ad.GraphError) as e:
        print(f"contract error: {e}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
