"""Command-line entry points: train, render, eval, make-toy.

Exit codes: 0 success, 2 usage, 3 input I/O, 4 numeric failure, 5 provider
failure. Pose files are plain text (azimuth elevation radius in degrees per
line) so evaluation rigs can be swapped freely.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import fileio, metrics
from .cameras import REFERENCE_POSE, CameraIntrinsics, CameraPose
from .constraints import ConstrainedField, ReferenceConditioning, compute_visibility_depth
from .diffusion import DiracProvider, ProviderError, RemoteProvider
from .field import FieldEvalError
from .fileio import FileFormatError
from .toys import MultiViewOracleProvider, make_toy_scene, render_toy
from .training import (
    CheckpointError,
    ConfigError,
    NumericsError,
    TrainConfig,
    config_from_json,
    load_checkpoint,
    make_field,
    train,
)
from .volume import render_view
from .cameras import generate_rays

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4
EXIT_PROVIDER = 5

PREVIEW_RESOLUTION = 64
PREVIEW_NOVEL_AZIMUTHS_DEG = (90.0, 180.0, 270.0)


class InputError(RuntimeError):
    pass


def _load_image(path) -> torch.Tensor:
    try:
        arr = fileio.read_png(path)
    except (OSError, FileFormatError) as err:
        raise InputError(f"cannot read image {path}: {err}") from err
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return torch.from_numpy(arr)


def _load_mask(path) -> torch.Tensor:
    try:
        arr = fileio.read_png(path)
    except (OSError, FileFormatError) as err:
        raise InputError(f"cannot read mask {path}: {err}") from err
    if arr.ndim == 3:
        arr = arr.mean(axis=-1)
    return torch.from_numpy(arr)


def _make_provider(spec: str | None, schedule=None):
    if spec is None:
        url = os.environ.get("CONRAD_PROVIDER_URL")
        if not url:
            raise UsageError("no --provider given and CONRAD_PROVIDER_URL is unset")
        spec = f"remote:{url}"
    if spec.startswith("dirac:"):
        target = _load_image(spec.split(":", 1)[1])
        return DiracProvider(target)
    if spec.startswith("remote:"):
        return RemoteProvider(spec.split(":", 1)[1])
    if spec in ("oracle-sphere", "oracle-cube"):
        shape = spec.split("-", 1)[1]
        intr = CameraIntrinsics(width=PREVIEW_RESOLUTION, height=PREVIEW_RESOLUTION)
        return MultiViewOracleProvider(make_toy_scene(shape), intr)
    raise UsageError(f"unknown provider spec {spec!r} (dirac:<image> | remote:<url> | oracle-sphere)")


class UsageError(RuntimeError):
    pass


def _preview_poses() -> list[CameraPose]:
    novel = [
        CameraPose(azimuth=math.radians(az), elevation=REFERENCE_POSE.elevation,
                   radius=REFERENCE_POSE.radius)
        for az in PREVIEW_NOVEL_AZIMUTHS_DEG
    ]
    return [REFERENCE_POSE] + novel


def _write_previews(out_dir: Path, step: int, field, conditioning, march_cfg) -> None:
    preview_dir = out_dir / "previews"
    preview_dir.mkdir(parents=True, exist_ok=True)
    intr = CameraIntrinsics(width=PREVIEW_RESOLUTION, height=PREVIEW_RESOLUTION)
    ref_rays = generate_rays(conditioning.pose, conditioning.intrinsics)
    with torch.no_grad():
        v_map = compute_visibility_depth(field.density, ref_rays, conditioning.intrinsics,
                                         march_cfg, eta=0.1)
        cfield = ConstrainedField(field, conditioning, v_map, alpha_ws=1.0)
        names = ["ref", "novel1", "novel2", "novel3"]
        for name, pose in zip(names, _preview_poses()):
            view = render_view(pose, intr, cfield, march_cfg)
            fileio.write_png(preview_dir / f"step{step:06d}_{name}.png", view.image.numpy())


def cmd_train(args) -> int:
    try:
        config_text = Path(args.config).read_text()
    except OSError as err:
        raise InputError(f"cannot read config {args.config}: {err}") from err
    config = config_from_json(config_text)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)

    image = _load_image(args.image)
    mask = _load_mask(args.mask)
    if mask.shape != image.shape[:2]:
        raise InputError(
            f"mask size {tuple(mask.shape)} does not match image {tuple(image.shape[:2])}"
        )
    est_depth = None
    if args.depth is not None:
        try:
            est_depth = torch.from_numpy(fileio.read_depth_raw(args.depth))
        except (OSError, FileFormatError) as err:
            raise InputError(f"cannot read depth {args.depth}: {err}") from err
        if est_depth.shape != mask.shape:
            raise InputError("depth map size does not match the image")

    h, w = image.shape[:2]
    conditioning = ReferenceConditioning(
        image=image, mask=mask, est_depth=est_depth,
        pose=REFERENCE_POSE,
        intrinsics=CameraIntrinsics(width=w, height=h),
    )
    provider = _make_provider(args.provider)
    out_dir = Path(args.out)
    eval_march = dataclasses.replace(config.march, stratified=False, perturb=False)

    def on_step(step, field, report):
        if step % config.checkpoint_every == 0 or step == config.total_steps:
            _write_previews(out_dir, step, field, conditioning, eval_march)

    result = train(conditioning, config, provider, run_dir=out_dir, step_callback=on_step)
    print(f"trained {config.total_steps} steps -> {result.checkpoint_path}")
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        ckpt = load_checkpoint(args.ckpt)
    except OSError as err:
        raise InputError(f"cannot read checkpoint {args.ckpt}: {err}") from err
    try:
        poses = fileio.read_pose_file(args.poses)
    except (OSError, FileFormatError) as err:
        raise InputError(f"cannot read pose file {args.poses}: {err}") from err
    if not poses:
        raise InputError(f"pose file {args.poses} is empty")

    field = make_field(ckpt.config)
    field.params.load_flat(ckpt.params)
    res = args.resolution or ckpt.config.render_resolution
    intr = CameraIntrinsics(width=res, height=res)
    march_cfg = dataclasses.replace(ckpt.config.march, stratified=False, perturb=False)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for i, pose in enumerate(poses):
            view = render_view(pose, intr, field, march_cfg)
            fileio.write_png(out_dir / f"view_{i:03d}.png", view.image.numpy())
            fileio.write_depth_raw(out_dir / f"view_{i:03d}.crdd", view.depth_map.numpy())
    print(f"rendered {len(poses)} views -> {out_dir}")
    return EXIT_OK


def _parse_ref_pose(text: str) -> CameraPose:
    parts = text.split()
    if len(parts) != 3:
        raise UsageError("--ref-pose expects 'azimuth_deg elevation_deg radius'")
    az, el, r = (float(p) for p in parts)
    return CameraPose(azimuth=math.radians(az), elevation=math.radians(el), radius=r)


def cmd_eval(args) -> int:
    try:
        gt = metrics.FeatureSet(fileio.read_features(args.gt_features))
        rendered = metrics.FeatureSet(fileio.read_features(args.rendered_features))
        poses = fileio.read_pose_file(args.poses)
    except (OSError, FileFormatError, ValueError) as err:
        raise InputError(str(err)) from err
    ref_pose = _parse_ref_pose(args.ref_pose)

    # reference feature: GT row at the rig pose closest to the reference pose
    def pose_dist(p: CameraPose) -> float:
        return (
            metrics.circular_azimuth_delta(p.azimuth, ref_pose.azimuth)
            + abs(p.elevation - ref_pose.elevation)
            + abs(p.radius - ref_pose.radius)
        )

    ref_idx = min(range(len(poses)), key=lambda i: pose_dist(poses[i]))
    report = metrics.evaluate_feature_sets(
        gt, rendered, poses, ref_pose, gt.features[ref_idx],
        provenance={
            "gt_features": str(args.gt_features),
            "rendered_features": str(args.rendered_features),
            "pose_file": str(args.poses),
            "ref_pose_index": ref_idx,
        },
    )
    Path(args.out).write_text(report.to_json())
    print(report.to_json())
    return EXIT_OK


def cmd_make_toy(args) -> int:
    scene = make_toy_scene(args.shape)
    intr = CameraIntrinsics(width=args.resolution, height=args.resolution)
    image, mask, depth = render_toy(scene, REFERENCE_POSE, intr)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    fileio.write_png(out_dir / "image.png", image.numpy())
    fileio.write_png(out_dir / "mask.png", mask.numpy())
    fileio.write_depth_raw(out_dir / "depth.crdd", depth.numpy())
    fileio.write_pose_file(out_dir / "eval_rig.txt", metrics.canonical_eval_rig())
    print(f"toy {args.shape} inputs -> {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conrad",
                                     description="single-image 3D reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="optimize a radiance field for one image")
    p_train.add_argument("--image", required=True)
    p_train.add_argument("--mask", required=True)
    p_train.add_argument("--depth")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--provider", help="dirac:<image> | remote:<url> | oracle-sphere")
    p_train.add_argument("--seed", type=int)
    p_train.set_defaults(func=cmd_train)

    p_render = sub.add_parser("render", help="render a pose file from a checkpoint")
    p_render.add_argument("--ckpt", required=True)
    p_render.add_argument("--poses", required=True)
    p_render.add_argument("--out", required=True)
    p_render.add_argument("--resolution", type=int)
    p_render.set_defaults(func=cmd_render)

    p_eval = sub.add_parser("eval", help="multi-view feature metrics")
    p_eval.add_argument("--gt-features", required=True)
    p_eval.add_argument("--rendered-features", required=True)
    p_eval.add_argument("--poses", required=True)
    p_eval.add_argument("--ref-pose", required=True, help="'azimuth_deg elevation_deg radius'")
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_toy = sub.add_parser("make-toy", help="emit synthetic reference inputs")
    p_toy.add_argument("--shape", choices=["sphere", "cube"], required=True)
    p_toy.add_argument("--out", required=True)
    p_toy.add_argument("--resolution", type=int, default=64)
    p_toy.set_defaults(func=cmd_make_toy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, FileNotFoundError, CheckpointError, ConfigError, FileFormatError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericsError, FieldEvalError, ArithmeticError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ProviderError as err:
        print(f"provider failure: {err}", file=sys.stderr)
        return EXIT_PROVIDER


if __name__ == "__main__":
    sys.exit(main())
