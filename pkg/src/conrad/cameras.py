"""Camera models, pose sampling, ray generation and image-plane projection.

Conventions (used everywhere in this package):
  * world is z-up; azimuth rotates about +z starting from +x; elevation is
    measured from the xy-plane,
  * cameras sit at o = r * (cos(el)cos(az), cos(el)sin(az), sin(el)) and look
    at the world origin with world +z as the up hint,
  * pixel (i, j) = (row, col) with row 0 at the top of the image,
  * normalized image coordinates (u, v) live in [-1, 1]^2, u to the right,
    v downward; pixel centers map to u = (2(j+0.5) - W)/W.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

ORIGIN = (0.0, 0.0, 0.0)
WORLD_UP = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class CameraPose:
    azimuth: float  # radians
    elevation: float  # radians
    radius: float  # distance to the look-at point, world units

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")

    def origin(self, dtype=torch.float32) -> torch.Tensor:
        cos_el = math.cos(self.elevation)
        o = (
            self.radius * cos_el * math.cos(self.azimuth),
            self.radius * cos_el * math.sin(self.azimuth),
            self.radius * math.sin(self.elevation),
        )
        return torch.tensor(o, dtype=dtype)

    def basis(self, dtype=torch.float32):
        """Orthonormal (right, up, forward) camera axes in world coordinates."""
        o = self.origin(dtype=torch.float64)
        target = torch.tensor(ORIGIN, dtype=torch.float64)
        forward = target - o
        forward = forward / forward.norm()
        up_hint = torch.tensor(WORLD_UP, dtype=torch.float64)
        right = torch.linalg.cross(forward, up_hint)
        if right.norm() < 1e-8:  # looking straight up/down the z axis
            right = torch.linalg.cross(forward, torch.tensor((0.0, 1.0, 0.0), dtype=torch.float64))
        right = right / right.norm()
        up = torch.linalg.cross(right, forward)
        return right.to(dtype), up.to(dtype), forward.to(dtype)

    def rotation(self, dtype=torch.float32) -> torch.Tensor:
        """World-from-camera rotation, columns (right, up, -forward)."""
        right, up, forward = self.basis(dtype)
        return torch.stack([right, up, -forward], dim=1)


REFERENCE_POSE = CameraPose(azimuth=0.0, elevation=0.0, radius=3.2)


@dataclass(frozen=True)
class CameraIntrinsics:
    vertical_fov: float = math.radians(40.0)  # radians
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not 0 < self.vertical_fov < math.pi:
            raise ValueError(f"fov must be in (0, pi), got {self.vertical_fov}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def tan_half_v(self) -> float:
        return math.tan(self.vertical_fov / 2)

    @property
    def tan_half_h(self) -> float:
        return self.tan_half_v * self.width / self.height


@dataclass
class RayBundle:
    origins: torch.Tensor  # [N, 3]
    directions: torch.Tensor  # [N, 3], unit norm
    pixel_coords: torch.Tensor  # [N, 2] long, (row, col)

    def __post_init__(self):
        if self.origins.shape != self.directions.shape:
            raise ValueError("origins/directions shape mismatch")
        if self.pixel_coords.shape[0] != self.origins.shape[0]:
            raise ValueError("one pixel coordinate per ray required")

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass(frozen=True)
class PoseBounds:
    """Sampling box for random training viewpoints (angles in degrees)."""

    elevation_deg: tuple[float, float] = (-15.0, 45.0)
    azimuth_deg: tuple[float, float] = (0.0, 360.0)
    radius: tuple[float, float] = (3.0, 3.5)

    def __post_init__(self):
        for lo, hi in (self.elevation_deg, self.azimuth_deg, self.radius):
            if lo > hi:
                raise ValueError(f"invalid bounds: min {lo} > max {hi}")


def sample_random_pose(generator: torch.Generator, bounds: PoseBounds | None = None) -> CameraPose:
    """Draw a camera pose uniformly from the bounds box."""
    bounds = bounds or PoseBounds()
    u = torch.rand(3, generator=generator, dtype=torch.float64)

    def lerp(interval, t):
        return interval[0] + (interval[1] - interval[0]) * t

    return CameraPose(
        azimuth=math.radians(lerp(bounds.azimuth_deg, u[0].item())),
        elevation=math.radians(lerp(bounds.elevation_deg, u[1].item())),
        radius=lerp(bounds.radius, u[2].item()),
    )


def ndc_grid(intrinsics: CameraIntrinsics, dtype=torch.float32):
    """Per-pixel normalized coordinates (u to the right, v downward)."""
    h, w = intrinsics.height, intrinsics.width
    rows = torch.arange(h, dtype=dtype)
    cols = torch.arange(w, dtype=dtype)
    v = (2.0 * (rows + 0.5) - h) / h
    u = (2.0 * (cols + 0.5) - w) / w
    vv, uu = torch.meshgrid(v, u, indexing="ij")  # [H, W]
    return uu, vv


def generate_rays(pose: CameraPose, intrinsics: CameraIntrinsics, dtype=torch.float32) -> RayBundle:
    """One ray per pixel through the pixel center, row-major order."""
    right, up, forward = pose.basis(dtype)
    uu, vv = ndc_grid(intrinsics, dtype=dtype)
    th, tv = intrinsics.tan_half_h, intrinsics.tan_half_v

    # [H, W, 3]; minus on v because row index grows downward
    dirs = (
        forward
        + uu[..., None] * (th * right)
        - vv[..., None] * (tv * up)
    )
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    dirs = dirs.reshape(-1, 3)

    origin = pose.origin(dtype)
    origins = origin.expand_as(dirs).contiguous()

    rows = torch.arange(intrinsics.height)
    cols = torch.arange(intrinsics.width)
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    pixel_coords = torch.stack([rr.reshape(-1), cc.reshape(-1)], dim=-1)

    return RayBundle(origins=origins, directions=dirs, pixel_coords=pixel_coords)


def project(pose: CameraPose, intrinsics: CameraIntrinsics, points: torch.Tensor):
    """Project world points into normalized reference-image coordinates.

    Args:
        points: [..., 3] world points.

    Returns:
        (uv, in_frustum): uv is [..., 2] in [-1, 1]^2 for visible points,
        in_frustum is a bool tensor; points behind the camera or outside the
        image rectangle are flagged False (never an error).
    """
    dtype = points.dtype
    right, up, forward = pose.basis(dtype)
    rel = points - pose.origin(dtype)
    depth = rel @ forward
    safe_depth = torch.where(depth.abs() < 1e-12, torch.full_like(depth, 1e-12), depth)
    u = (rel @ right) / (safe_depth * intrinsics.tan_half_h)
    v = -(rel @ up) / (safe_depth * intrinsics.tan_half_v)
    uv = torch.stack([u, v], dim=-1)
    in_frustum = (depth > 0) & (u.abs() <= 1.0) & (v.abs() <= 1.0)
    return uv, in_frustum


def unproject(pose: CameraPose, intrinsics: CameraIntrinsics, uv: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Inverse of project along the pixel ray: point at distance t from the origin."""
    dtype = uv.dtype
    right, up, forward = pose.basis(dtype)
    dirs = (
        forward
        + uv[..., 0:1] * (intrinsics.tan_half_h * right)
        - uv[..., 1:2] * (intrinsics.tan_half_v * up)
    )
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    return pose.origin(dtype) + t[..., None] * dirs


def pixel_from_ndc(uv: torch.Tensor, width: int, height: int) -> torch.Tensor:
    """Continuous (row, col) pixel coordinates for normalized (u, v)."""
    col = (uv[..., 0] + 1.0) * 0.5 * width - 0.5
    row = (uv[..., 1] + 1.0) * 0.5 * height - 0.5
    return torch.stack([row, col], dim=-1)
