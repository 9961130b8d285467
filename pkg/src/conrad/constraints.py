"""Image constraints on the radiance field.

A single reference view pins the field: color at points in front of the
estimated visible surface is replaced by the reference pixel they project
to, and density along background rays is masked out. The visible surface is
tracked per pixel by the *visibility depth* V: the ray depth beyond which at
most a fraction eta of the rendering weight remains. A warm-start scalar
anneals both constraints in from an unconstrained field.

V, the visibility indicator and the mask lookup are all treated as constants
by the backward pass; gradients flow only through the raw color/density.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .cameras import CameraIntrinsics, CameraPose, RayBundle, pixel_from_ndc, project
from .volume import MarchConfig, composite_weights, ray_sphere_bounds, sample_depths

# inclusive comparison margin for dist <= V on a pixel's own ray (float32 roundoff)
V_COMPARE_EPS = 1e-4
# sub-pixel snap for bilinear taps so pixel-center projections read back exactly
SNAP_EPS = 1e-3
MIN_TOTAL_WEIGHT = 1e-4


@dataclass
class ReferenceConditioning:
    """Everything the constraints know about the input view."""

    image: torch.Tensor  # [H, W, 3] in [0, 1]
    mask: torch.Tensor  # [H, W] in [0, 1]
    est_depth: torch.Tensor | None  # [H, W] relative depth, optional
    pose: CameraPose
    intrinsics: CameraIntrinsics
    cond_id: str = "reference"

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if self.image.shape != (h, w, 3):
            raise ValueError("image must be HxWx3")
        if self.mask.shape != (h, w):
            raise ValueError("mask must match the image size")
        if self.est_depth is not None and self.est_depth.shape != (h, w):
            raise ValueError("estimated depth must match the image size")
        if not torch.isfinite(self.image).all():
            raise ValueError("image contains non-finite values")
        if self.mask.min() < 0 or self.mask.max() > 1:
            raise ValueError("mask values must lie in [0, 1]")
        if (self.intrinsics.height, self.intrinsics.width) != (h, w):
            raise ValueError("intrinsics do not match the image size")


@dataclass
class VisibilityDepthMap:
    values: torch.Tensor  # [H, W] world units; invalid pixels carry their far bound
    valid: torch.Tensor  # [H, W] bool


@dataclass(frozen=True)
class WarmStartSchedule:
    total_steps: int
    plateau_fraction: float = 0.5

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0 < self.plateau_fraction <= 1:
            raise ValueError("plateau_fraction must be in (0, 1]")


def warm_alpha(step: int, schedule: WarmStartSchedule) -> float:
    """Constraint strength: linear ramp to 1 over the plateau fraction, then flat."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    ramp = schedule.plateau_fraction * schedule.total_steps
    return min(1.0, step / ramp)


def bilinear_sample(grid: torch.Tensor, rowcol: torch.Tensor, snap_eps: float = SNAP_EPS) -> torch.Tensor:
    """Bilinear lookup of an [H, W] or [H, W, C] grid at continuous (row, col).

    Coordinates within snap_eps of a pixel center collapse onto it, so
    points that should hit a center exactly are immune to float roundoff.
    Out-of-range coordinates clamp to the edge.
    """
    h, w = grid.shape[:2]
    row = rowcol[..., 0]
    col = rowcol[..., 1]
    r0 = row.floor()
    c0 = col.floor()
    fr = row - r0
    fc = col - c0
    fr = torch.where(fr < snap_eps, torch.zeros_like(fr), fr)
    fr = torch.where(fr > 1 - snap_eps, torch.ones_like(fr), fr)
    fc = torch.where(fc < snap_eps, torch.zeros_like(fc), fc)
    fc = torch.where(fc > 1 - snap_eps, torch.ones_like(fc), fc)

    r0 = r0.long().clamp(0, h - 1)
    c0 = c0.long().clamp(0, w - 1)
    r1 = (r0 + 1).clamp(0, h - 1)
    c1 = (c0 + 1).clamp(0, w - 1)

    flat = grid.reshape(h * w, -1)  # [H*W, C]
    v00 = flat[r0 * w + c0]
    v01 = flat[r0 * w + c1]
    v10 = flat[r1 * w + c0]
    v11 = flat[r1 * w + c1]
    fr = fr[..., None]
    fc = fc[..., None]
    out = (
        v00 * (1 - fr) * (1 - fc)
        + v01 * (1 - fr) * fc
        + v10 * fr * (1 - fc)
        + v11 * fr * fc
    )
    return out.squeeze(-1) if grid.dim() == 2 else out


@torch.no_grad()
def visibility_from_densities(sigma: torch.Tensor, ts: torch.Tensor, deltas: torch.Tensor,
                              far: torch.Tensor, eta: float):
    """Crossing-depth core: first sample depth where the cumulative rendering
    weight reaches (1 - eta) of the ray total. Returns (values [R], valid [R])."""
    if not 0 < eta < 1:
        raise ValueError(f"eta must be in (0, 1), got {eta}")
    _, weights = composite_weights(sigma, deltas)
    cum_w = torch.cumsum(weights, dim=-1)
    total = cum_w[:, -1]
    valid = total >= MIN_TOTAL_WEIGHT
    threshold = (1.0 - eta) * total
    crossing = (cum_w >= threshold[:, None]).int().argmax(dim=-1)  # first True
    v = ts.gather(1, crossing[:, None]).squeeze(1)
    return torch.where(valid, v, far), valid


@torch.no_grad()
def compute_visibility_depth(
    density_fn,
    reference_rays: RayBundle,
    intrinsics: CameraIntrinsics,
    config: MarchConfig,
    eta: float = 0.1,
    stratified: bool = False,
    generator: torch.Generator | None = None,
) -> VisibilityDepthMap:
    """Per-pixel depth of the first sample holding >= (1 - eta) of the ray's weight.

    Defaults to deterministic bin midpoints so the map aligns with an
    unjittered reference render; rays with negligible total weight are
    flagged invalid and carry their far bound.
    """
    origins, dirs = reference_rays.origins, reference_rays.directions
    if config.near is not None and config.far is not None:
        near = torch.full(origins.shape[:1], config.near, dtype=origins.dtype)
        far = torch.full(origins.shape[:1], config.far, dtype=origins.dtype)
    else:
        near, far = ray_sphere_bounds(origins, dirs)
    sub_cfg = MarchConfig(
        n_samples=config.n_samples, near=None, far=None,
        stratified=stratified, perturb=stratified,
        background_color=config.background_color,
    )
    ts, deltas = sample_depths(near, far, sub_cfg, generator if stratified else None)
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    sigma = density_fn(pts.reshape(-1, 3)).reshape(ts.shape)
    v, valid = visibility_from_densities(sigma, ts, deltas, far, eta)

    h, w = intrinsics.height, intrinsics.width
    return VisibilityDepthMap(values=v.reshape(h, w), valid=valid.reshape(h, w))


class ConstrainedField:
    """Radiance field with the reference image substituted into one frustum.

    Wraps an unconstrained field; exposes the same density/color surface so
    the renderer cannot tell them apart.
    """

    def __init__(self, field, conditioning: ReferenceConditioning,
                 v_map: VisibilityDepthMap | None, alpha_ws: float = 1.0):
        if not 0.0 <= alpha_ws <= 1.0:
            raise ValueError("alpha_ws must be in [0, 1]")
        self.field = field
        self.cond = conditioning
        self.v_map = v_map
        self.alpha_ws = alpha_ws
        self._origin64 = conditioning.pose.origin(torch.float64)

    def _lookup(self, x: torch.Tensor):
        """Projection data for points x: (pixel rowcol, in_frustum, dist, v_x, m_x)."""
        dtype = x.dtype
        uv, in_frustum = project(self.cond.pose, self.cond.intrinsics, x)
        rowcol = pixel_from_ndc(uv, self.cond.intrinsics.width, self.cond.intrinsics.height)
        dist = (x - self._origin64.to(dtype)).norm(dim=-1)

        m = torch.ones_like(dist)
        v = torch.zeros_like(dist)
        if in_frustum.any():
            rc = rowcol[in_frustum]
            m_in = bilinear_sample(self.cond.mask.to(dtype), rc)
            m = m.masked_scatter(in_frustum, m_in)
            if self.v_map is not None:
                v_in = bilinear_sample(self.v_map.values.to(dtype), rc)
                front = (dist[in_frustum] <= v_in + V_COMPARE_EPS).to(dtype)
                v = v.masked_scatter(in_frustum, front)
        return rowcol, in_frustum, v, m

    def _apply_color(self, x, c_raw, in_frustum, rowcol, v):
        blend = (self.alpha_ws * v)[..., None]
        out = c_raw
        if in_frustum.any():
            ref_rgb = bilinear_sample(self.cond.image.to(x.dtype), rowcol[in_frustum])
            mixed = blend[in_frustum] * ref_rgb + (1.0 - blend[in_frustum]) * c_raw[in_frustum]
            out = c_raw.masked_scatter(in_frustum[..., None].expand_as(c_raw), mixed)
        return out

    def _apply_density(self, sigma_raw, m):
        multiplier = 1.0 - self.alpha_ws * (1.0 - m)
        return multiplier * sigma_raw

    def density(self, x: torch.Tensor) -> torch.Tensor:
        _, _, _, m = self._lookup(x)
        return self._apply_density(self.field.density(x), m)

    def color(self, x: torch.Tensor) -> torch.Tensor:
        rowcol, in_frustum, v, _ = self._lookup(x)
        return self._apply_color(x, self.field.color(x), in_frustum, rowcol, v)

    def density_and_color(self, x: torch.Tensor):
        rowcol, in_frustum, v, m = self._lookup(x)
        sigma_raw, c_raw = self.field.density_and_color(x)
        return self._apply_density(sigma_raw, m), self._apply_color(x, c_raw, in_frustum, rowcol, v)


def constrained_color(x: torch.Tensor, c_raw: torch.Tensor, v_map: VisibilityDepthMap,
                      conditioning: ReferenceConditioning, alpha_ws: float) -> torch.Tensor:
    """Functional form of the color constraint (see ConstrainedField)."""
    cf = ConstrainedField.__new__(ConstrainedField)
    ConstrainedField.__init__(cf, _RawOnly(), conditioning, v_map, alpha_ws)
    rowcol, in_frustum, v, _ = cf._lookup(x)
    return cf._apply_color(x, c_raw, in_frustum, rowcol, v)


def constrained_density(x: torch.Tensor, sigma_raw: torch.Tensor,
                        conditioning: ReferenceConditioning, alpha_ws: float) -> torch.Tensor:
    """Functional form of the density constraint (see ConstrainedField)."""
    cf = ConstrainedField.__new__(ConstrainedField)
    ConstrainedField.__init__(cf, _RawOnly(), conditioning, None, alpha_ws)
    _, _, _, m = cf._lookup(x)
    return cf._apply_density(sigma_raw, m)


class _RawOnly:
    """Placeholder field for the functional constraint helpers."""

    def density(self, x):  # pragma: no cover - never called
        raise RuntimeError("raw field not available")

    color = density
    density_and_color = density
