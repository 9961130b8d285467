"""Volume rendering: quadrature along rays, full-view rendering, FD normals.

The quadrature uses bin edges between near and far, densities/colors sampled
at bin midpoints (or jittered within bins during training):

    a_i = 1 - exp(-sigma_i * delta_i)
    T_i = prod_{j<i} (1 - a_j)
    w_i = T_i * a_i

Color composites over a solid background; depth is the weight-normalized
expected sample depth so semi-transparent rays still carry a value.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .cameras import CameraIntrinsics, CameraPose, RayBundle, generate_rays

BOUND_SPHERE_RADIUS = 1.5


@dataclass(frozen=True)
class MarchConfig:
    n_samples: int = 128
    near: float | None = None  # None: per-ray bounding-sphere intersection
    far: float | None = None
    stratified: bool = True
    perturb: bool = False  # jitter sample positions inside bins (needs a generator)
    background_color: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.near is not None and self.far is not None and not self.near < self.far:
            raise ValueError("near must be < far")


@dataclass
class MarchBatch:
    """Per-ray quadrature outputs; tensors keep autograd connectivity."""

    color: torch.Tensor  # [R, 3]
    depth: torch.Tensor  # [R]
    alpha: torch.Tensor  # [R]
    weights: torch.Tensor  # [R, S]
    sample_alphas: torch.Tensor  # [R, S]
    ts: torch.Tensor  # [R, S]
    points: torch.Tensor  # [R, S, 3]


@dataclass
class MarchResult:
    color: torch.Tensor  # [3]
    depth: float
    alpha: float
    weights: torch.Tensor  # [S]
    ts: torch.Tensor  # [S]


def ray_sphere_bounds(origins: torch.Tensor, directions: torch.Tensor,
                      radius: float = BOUND_SPHERE_RADIUS):
    """Near/far from intersecting the origin-centered bounding sphere.

    Rays that miss fall back to [|o| - radius, |o| + radius].
    """
    b = (origins * directions).sum(-1)  # o . d (d unit)
    c = (origins * origins).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = torch.sqrt(disc.clamp_min(0.0))
    near = torch.where(hit, -b - sq, origins.norm(dim=-1) - radius)
    far = torch.where(hit, -b + sq, origins.norm(dim=-1) + radius)
    return near.clamp_min(1e-3), far


def sample_depths(near: torch.Tensor, far: torch.Tensor, config: MarchConfig,
                  generator: torch.Generator | None = None):
    """Bin edges + sample positions; returns (ts [R,S], deltas [R,S])."""
    n = config.n_samples
    device, dtype = near.device, near.dtype
    frac_edges = torch.linspace(0.0, 1.0, n + 1, dtype=dtype, device=device)
    edges = near[:, None] + (far - near)[:, None] * frac_edges[None, :]  # [R, n+1]
    deltas = edges[:, 1:] - edges[:, :-1]
    if config.stratified and config.perturb and generator is not None:
        offs = torch.rand(near.shape[0], n, generator=generator, dtype=dtype, device=device)
    else:
        offs = torch.full((near.shape[0], n), 0.5, dtype=dtype, device=device)
    ts = edges[:, :-1] + offs * deltas
    return ts, deltas


def composite_weights(sigma: torch.Tensor, deltas: torch.Tensor):
    """Per-sample opacities and rendering weights from densities [R, S]."""
    sample_alphas = 1.0 - torch.exp(-sigma * deltas)
    # exclusive cumulative transmittance; tiny epsilon keeps cumprod grads finite
    trans = torch.cumprod(
        torch.cat([torch.ones_like(sample_alphas[:, :1]), 1.0 - sample_alphas + 1e-10], dim=-1),
        dim=-1,
    )[:, :-1]
    return sample_alphas, trans * sample_alphas


def march_rays(origins: torch.Tensor, directions: torch.Tensor, field, config: MarchConfig,
               generator: torch.Generator | None = None, compute_color: bool = True) -> MarchBatch:
    """Quadrature for a batch of rays; `field` provides density/color at points."""
    if config.near is not None and config.far is not None:
        near = torch.full(origins.shape[:1], config.near, dtype=origins.dtype)
        far = torch.full(origins.shape[:1], config.far, dtype=origins.dtype)
    else:
        near, far = ray_sphere_bounds(origins, directions)

    ts, deltas = sample_depths(near, far, config, generator)
    points = origins[:, None, :] + ts[..., None] * directions[:, None, :]  # [R, S, 3]
    flat = points.reshape(-1, 3)

    if compute_color:
        sigma, rgb = field.density_and_color(flat)
        rgb = rgb.reshape(*ts.shape, 3)
    else:
        sigma = field.density(flat)
        rgb = None
    sigma = sigma.reshape(ts.shape)

    sample_alphas, weights = composite_weights(sigma, deltas)
    alpha = weights.sum(-1)
    depth = (weights * ts).sum(-1) / alpha.clamp_min(1e-6)

    if compute_color:
        bg = torch.tensor(config.background_color, dtype=weights.dtype)
        color = (weights[..., None] * rgb).sum(-2) + (1.0 - alpha)[..., None] * bg
    else:
        color = torch.zeros(ts.shape[0], 3, dtype=weights.dtype)

    return MarchBatch(color=color, depth=depth, alpha=alpha, weights=weights,
                      sample_alphas=sample_alphas, ts=ts, points=points)


def march(origin: torch.Tensor, direction: torch.Tensor, field, config: MarchConfig,
          generator: torch.Generator | None = None) -> MarchResult:
    """Single-ray convenience wrapper around march_rays."""
    batch = march_rays(origin[None], direction[None], field, config, generator)
    return MarchResult(
        color=batch.color[0],
        depth=batch.depth[0].item(),
        alpha=batch.alpha[0].item(),
        weights=batch.weights[0],
        ts=batch.ts[0],
    )


@dataclass
class ViewRender:
    image: torch.Tensor  # [H, W, 3]
    depth_map: torch.Tensor  # [H, W]
    alpha_map: torch.Tensor  # [H, W]


def render_view(pose: CameraPose, intrinsics: CameraIntrinsics, field, config: MarchConfig,
                generator: torch.Generator | None = None, chunk: int = 16384,
                dtype=torch.float32) -> ViewRender:
    """Render every pixel of a view. Chunked; use march_rays directly when the
    whole-image graph is needed for backprop."""
    rays = generate_rays(pose, intrinsics, dtype=dtype)
    colors, depths, alphas = [], [], []
    for start in range(0, len(rays), chunk):
        sl = slice(start, start + chunk)
        batch = march_rays(rays.origins[sl], rays.directions[sl], field, config, generator)
        colors.append(batch.color)
        depths.append(batch.depth)
        alphas.append(batch.alpha)
    h, w = intrinsics.height, intrinsics.width
    return ViewRender(
        image=torch.cat(colors).reshape(h, w, 3),
        depth_map=torch.cat(depths).reshape(h, w),
        alpha_map=torch.cat(alphas).reshape(h, w),
    )


def normals_at(density_fn, x: torch.Tensor, h: float = 1e-3):
    """Finite-difference surface normals of a density field at points x [N, 3].

    Returns (normals [N, 3], degenerate [N]); degenerate points (near-zero
    density gradient) get a zero normal and should be skipped by callers.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    eye = torch.eye(3, dtype=x.dtype)
    offsets = torch.cat([eye, -eye], dim=0)  # +x +y +z -x -y -z
    probes = x[:, None, :] + h * offsets[None]  # [N, 6, 3]
    dens = density_fn(probes.reshape(-1, 3)).reshape(-1, 6)
    g = (dens[:, :3] - dens[:, 3:]) / (2.0 * h)  # [N, 3]
    norm = torch.sqrt((g * g).sum(-1) + 1e-20)
    degenerate = norm < 1e-8
    n = -g / norm[:, None]
    n = torch.where(degenerate[:, None], torch.zeros_like(n), n)
    return n, degenerate
