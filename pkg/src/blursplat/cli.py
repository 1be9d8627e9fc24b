"""Command-line surface: make-synthetic, train, render, eval.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .dataio import (ParseError, SyntheticConfig, UnsupportedFormatError,
                     generate_synthetic, load_colmap_text, load_dataset,
                     read_image, write_image)
from .evaluation import EvalView, evaluate, write_report
from .lie import RigidPose
from .rasterizer import render
from .blur import gamma_correct
from .scene import Camera, load_scene_ply, quat_to_rotmat
from .trainer import (NonFiniteLossError, TrainConfig, config_from_text,
                      init_training, load_checkpoint, save_checkpoint,
                      train_step)

USAGE_ERROR = 2
DATA_ERROR = 3
NUMERICAL_ERROR = 4


def _cmd_make_synthetic(args) -> int:
    config = SyntheticConfig(
        n_gaussians=args.gaussians, n_cameras=args.cameras,
        n_eval_views=args.eval_views, image_size=args.image_size,
        n_subframes=args.subframes,
        blur_rotation_deg=args.blur_rotation,
        blur_translation_frac=args.blur_translation,
        perturb_rotation_deg=args.perturb_rotation,
        perturb_translation_frac=args.perturb_translation,
        seed=args.seed)
    generate_synthetic(config, args.out)
    print(f"wrote synthetic bundle to {args.out}")
    return 0


def _cmd_train(args) -> int:
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        print(f"error: data directory {data_dir} not found", file=sys.stderr)
        return USAGE_ERROR
    dataset = load_dataset(data_dir)
    out_dir = Path(args.out)

    if args.resume and (out_dir / "scene.ply").exists():
        state = load_checkpoint(out_dir, dataset)
        if args.iters is not None:
            from dataclasses import replace
            state.config = replace(state.config, total_iters=args.iters)
    else:
        if args.config:
            cfg_path = Path(args.config)
            if not cfg_path.is_file():
                print(f"error: config file {cfg_path} not found", file=sys.stderr)
                return USAGE_ERROR
            config = config_from_text(cfg_path.read_text())
        else:
            config = TrainConfig()
        if args.iters is not None:
            from dataclasses import replace
            config = replace(config, total_iters=args.iters)
        state = init_training(dataset, config)

    total = state.config.total_iters
    while state.iteration < total:
        report = train_step(state, dataset)
        it = state.iteration
        if it % args.log_every == 0 or it == total:
            print(f"iter {it:6d}  rgb {report.rgb_loss:.6f}  "
                  f"smooth {report.smooth_loss:.6f}  lambda {report.lam:.4f}  "
                  f"gaussians {len(state.scene)}")
        if args.checkpoint_every > 0 and it % args.checkpoint_every == 0:
            save_checkpoint(state, dataset, out_dir)
    save_checkpoint(state, dataset, out_dir)
    print(f"checkpoint written to {out_dir}")
    return 0


def _read_pose_file(path: Path):
    """Two data lines: 'fx fy cx cy width height' then 'qw qx qy qz tx ty tz'."""
    rows = [line.split() for line in path.read_text().splitlines()
            if line.strip() and not line.strip().startswith("#")]
    if len(rows) != 2 or len(rows[0]) != 6 or len(rows[1]) != 7:
        raise ParseError(f"{path}: expected intrinsics line then pose line")
    fx, fy, cx, cy = (float(v) for v in rows[0][:4])
    width, height = int(rows[0][4]), int(rows[0][5])
    cam = Camera(fx, fy, cx, cy, width, height)
    vals = np.array([float(v) for v in rows[1]])
    pose = RigidPose(quat_to_rotmat(vals[:4]), vals[4:])
    return cam, pose


def _cmd_render(args) -> int:
    ckpt = Path(args.ckpt)
    pose_file = Path(args.pose)
    if not (ckpt / "scene.ply").is_file() or not pose_file.is_file():
        print("error: missing checkpoint or pose file", file=sys.stderr)
        return USAGE_ERROR
    scene, _ = load_scene_ply(ckpt / "scene.ply")
    cam, pose = _read_pose_file(pose_file)
    img = gamma_correct(render(scene, pose, cam, np.zeros(3)))
    write_image(img, args.out)
    print(f"wrote {args.out}")
    return 0


def _load_eval_views(data_dir: Path):
    model = load_colmap_text(data_dir / "sparse")
    cam = model.cameras[min(model.cameras)]
    views = []
    pose_file = data_dir / "ground_truth" / "eval_poses.txt"
    for line in pose_file.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        name = parts[0]
        vals = np.array([float(v) for v in parts[1:8]])
        pose = RigidPose(quat_to_rotmat(vals[:4]), vals[4:])
        img = read_image(data_dir / "ground_truth" / "eval" / name)
        views.append(EvalView(name, pose, img))
    return cam, views


def _cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    data_dir = Path(args.data)
    if not (ckpt / "scene.ply").is_file() or not data_dir.is_dir():
        print("error: missing checkpoint or data directory", file=sys.stderr)
        return USAGE_ERROR
    scene, _ = load_scene_ply(ckpt / "scene.ply")
    cam, views = _load_eval_views(data_dir)
    report = evaluate(scene, cam, views, align_iters=args.align_iters)
    write_report(report, args.report)
    print(f"mean PSNR {report.mean_psnr:.2f} dB  mean SSIM {report.mean_ssim:.4f}")
    print(f"report written to {args.report}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blursplat",
        description="Sharp 3D Gaussian scenes from motion-blurred images")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate a synthetic ground-truth bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gaussians", type=int, default=300)
    p.add_argument("--cameras", type=int, default=20)
    p.add_argument("--eval-views", type=int, default=4)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--subframes", type=int, default=21)
    p.add_argument("--blur-rotation", type=float, default=2.0,
                   help="max trajectory rotation (degrees)")
    p.add_argument("--blur-translation", type=float, default=0.02,
                   help="max trajectory translation (fraction of extent)")
    p.add_argument("--perturb-rotation", type=float, default=1.0)
    p.add_argument("--perturb-translation", type=float, default=0.01)
    p.set_defaults(func=_cmd_make_synthetic)

    p = sub.add_parser("train", help="run the joint optimization")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--iters", type=int, default=None,
                   help="override total_iters")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="render a sharp view from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pose", required=True,
                   help="text file: intrinsics line, then qw qx qy qz tx ty tz")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="evaluate held-out sharp views")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--align-iters", type=int, default=200)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, UnsupportedFormatError, FileNotFoundError, IOError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
