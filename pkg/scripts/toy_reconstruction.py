"""End-to-end toy reconstruction: sphere reference image + multi-view oracle.

Trains a constrained field on synthetic sphere inputs and reports PSNR of
constrained novel-view renders against the analytic ground truth. This is
the same protocol the acceptance suite runs; the script exists for eyeball
runs and tuning.

Usage: python scripts/toy_reconstruction.py [--steps 1000] [--out runs/toy]
"""

import argparse
import json
import math
import time
from pathlib import Path

import torch

from conrad.cameras import REFERENCE_POSE, CameraIntrinsics, CameraPose, generate_rays
from conrad.constraints import ConstrainedField, ReferenceConditioning, compute_visibility_depth
from conrad.field import HashGridConfig, MlpConfig
from conrad.objectives import LossWeights
from conrad.toys import MultiViewOracleProvider, ToySphere, psnr, render_toy
from conrad.training import TrainConfig, train
from conrad.volume import MarchConfig, render_view

HELD_OUT_POSES = [
    CameraPose(azimuth=math.radians(az), elevation=math.radians(el), radius=3.2)
    for az, el in [(45.0, 10.0), (135.0, 25.0), (225.0, 5.0), (315.0, 35.0)]
]


def toy_train_config(steps: int, seed: int = 0) -> TrainConfig:
    """Reduced-size field sized for a CPU-budget run; thresholds unchanged."""
    return TrainConfig(
        total_steps=steps,
        render_resolution=64,
        checkpoint_every=max(1, steps // 4),
        grid=HashGridConfig(n_levels=6, table_size_log2=15, finest_resolution=181),
        mlp=MlpConfig(n_layers=3, hidden_dim=32),
        march=MarchConfig(n_samples=48, stratified=True, perturb=True),
        loss_weights=LossWeights(),
        normal_sample_cap=2048,
        depth_ray_subset=1024,
        seed=seed,
    )


def render_constrained(field, conditioning, pose, march, resolution=64):
    intr = CameraIntrinsics(width=resolution, height=resolution)
    rays = generate_rays(conditioning.pose, conditioning.intrinsics)
    with torch.no_grad():
        v_map = compute_visibility_depth(field.density, rays, conditioning.intrinsics,
                                         march, eta=0.1)
        cfield = ConstrainedField(field, conditioning, v_map, alpha_ws=1.0)
        return render_view(pose, intr, cfield, march)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=1000)
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    scene = ToySphere()
    intr = CameraIntrinsics(width=64, height=64)
    image, mask, depth = render_toy(scene, REFERENCE_POSE, intr)
    conditioning = ReferenceConditioning(image=image, mask=mask, est_depth=depth,
                                         pose=REFERENCE_POSE, intrinsics=intr)
    provider = MultiViewOracleProvider(scene, intr)
    config = toy_train_config(args.steps, seed=args.seed)

    t0 = time.time()
    result = train(conditioning, config, provider, run_dir=args.out)
    elapsed = time.time() - t0
    print(f"trained {args.steps} steps in {elapsed / 60:.1f} min "
          f"({elapsed / args.steps:.2f} s/step)")

    from conrad.training import make_field
    field = make_field(config)
    field.params.load_flat(result.checkpoint.params)
    eval_march = MarchConfig(n_samples=config.march.n_samples, stratified=False, perturb=False)

    scores = []
    for pose in HELD_OUT_POSES:
        view = render_constrained(field, conditioning, pose, eval_march)
        target, _, _ = render_toy(scene, pose, intr)
        scores.append(psnr(view.image, target))
    print("held-out PSNR (dB):", [round(s, 2) for s in scores])
    print(json.dumps({"psnr": scores, "seconds_per_step": elapsed / args.steps}))
    if args.out:
        Path(args.out, "psnr.json").write_text(json.dumps({"psnr": scores}))


if __name__ == "__main__":
    main()
