"""Procedural test scenes with closed-form renders.

A colored sphere (or cube) rendered by exact ray intersection provides
ground-truth images, masks and depth for fully self-contained runs, plus a
multi-view oracle provider: the analytic optimal denoiser whose target is
the ground-truth render of whichever pose is being optimized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .cameras import CameraIntrinsics, CameraPose, generate_rays
from .diffusion import Conditioning, DiffusionSchedule, ProviderError, ProviderShapeError


@dataclass(frozen=True)
class ToySphere:
    radius: float = 1.0

    def intersect(self, origins: torch.Tensor, dirs: torch.Tensor):
        b = (origins * dirs).sum(-1)
        c = (origins * origins).sum(-1) - self.radius**2
        disc = b * b - c
        hit = disc > 0
        t = -b - torch.sqrt(disc.clamp_min(0.0))
        hit = hit & (t > 0)
        return t, hit

    def surface_color(self, points: torch.Tensor) -> torch.Tensor:
        n = points / points.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return 0.5 * (n + 1.0)

    def density(self, points: torch.Tensor) -> torch.Tensor:
        """Soft indicator useful for analytic-normal checks."""
        return (points.norm(dim=-1) < self.radius).to(points.dtype) * 50.0


@dataclass(frozen=True)
class ToyCube:
    half_extent: float = 0.7

    def intersect(self, origins: torch.Tensor, dirs: torch.Tensor):
        # slab method; degenerate direction components handled by +/-inf
        inv = 1.0 / torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
        t0 = (-self.half_extent - origins) * inv
        t1 = (self.half_extent - origins) * inv
        t_near = torch.minimum(t0, t1).amax(-1)
        t_far = torch.maximum(t0, t1).amin(-1)
        hit = (t_near < t_far) & (t_near > 0)
        return t_near, hit

    def surface_color(self, points: torch.Tensor) -> torch.Tensor:
        # face color keyed by the dominant axis of the hit point
        axis = points.abs().argmax(-1)
        sign_pos = points.gather(-1, axis[..., None]).squeeze(-1) > 0
        palette = torch.tensor([
            [0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.2, 0.9],
            [0.9, 0.9, 0.2], [0.2, 0.9, 0.9], [0.9, 0.2, 0.9],
        ], dtype=points.dtype)
        idx = axis + torch.where(sign_pos, torch.zeros_like(axis), torch.full_like(axis, 3))
        return palette[idx]


def render_toy(scene, pose: CameraPose, intrinsics: CameraIntrinsics,
               background=(1.0, 1.0, 1.0), dtype=torch.float32):
    """Exact render: returns (image [H,W,3], mask [H,W], depth [H,W])."""
    rays = generate_rays(pose, intrinsics, dtype=dtype)
    t, hit = scene.intersect(rays.origins, rays.directions)
    image = torch.tensor(background, dtype=dtype).expand(len(rays), 3).clone()
    if hit.any():
        pts = rays.origins[hit] + t[hit, None] * rays.directions[hit]
        image[hit] = scene.surface_color(pts)
    mask = hit.to(dtype)
    depth = torch.where(hit, t, torch.zeros_like(t))
    h, w = intrinsics.height, intrinsics.width
    return image.reshape(h, w, 3), mask.reshape(h, w), depth.reshape(h, w)


class MultiViewOracleProvider:
    """Analytic optimal denoiser whose target is the GT render of the
    conditioning pose. Same predict_noise surface as every other provider."""

    def __init__(self, scene, intrinsics: CameraIntrinsics,
                 schedule: DiffusionSchedule | None = None, background=(1.0, 1.0, 1.0)):
        self.scene = scene
        self.intrinsics = intrinsics
        self.schedule = schedule or DiffusionSchedule()
        self.background = background

    def target_for(self, pose: CameraPose, dtype=torch.float32) -> torch.Tensor:
        image, _, _ = render_toy(self.scene, pose, self.intrinsics,
                                 background=self.background, dtype=dtype)
        return image

    def predict_noise(self, noisy: torch.Tensor, t: int, cond=None,
                      epsilon: torch.Tensor | None = None) -> torch.Tensor:
        if not isinstance(cond, Conditioning) or cond.pose is None:
            raise ProviderError("multi-view oracle needs the rendered pose in the conditioning")
        target = self.target_for(cond.pose, dtype=noisy.dtype)
        if noisy.shape != target.shape:
            raise ProviderShapeError(
                f"noisy image shape {tuple(noisy.shape)} != render {tuple(target.shape)}"
            )
        a_bar = self.schedule.alpha_bar(t)
        return (noisy - math.sqrt(a_bar) * target) / math.sqrt(1.0 - a_bar)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    mse = float(((a.to(torch.float64) - b.to(torch.float64)) ** 2).mean())
    if mse <= 1e-12:
        return 120.0
    return 10.0 * math.log10(1.0 / mse)


def make_toy_scene(shape: str):
    if shape == "sphere":
        return ToySphere()
    if shape == "cube":
        return ToyCube()
    raise ValueError(f"unknown toy shape {shape!r}")
