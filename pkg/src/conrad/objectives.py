"""Training objectives: score-distillation adjoint, depth correlation, regularizers.

The score-distillation term never materializes a scalar loss: it produces an
adjoint image (the pseudo-gradient of the distillation objective w.r.t. the
rendered view) which seeds the backward pass. Everything else is an ordinary
scalar. The depth term is one minus the Pearson correlation between rendered
and estimated reference depth, so it is invariant to the scale/shift
ambiguity of monocular depth estimates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields

import torch

from .diffusion import DiffusionSchedule, ProviderError
from .volume import normals_at

DEFAULT_TIMESTEP_RANGE = (0.02, 0.98)
_ALPHA_CLAMP = 1e-5
_STD_FLOOR = 1e-6


@dataclass(frozen=True)
class LossWeights:
    sds: float = 1.0
    depth: float = 10.0
    entropy: float = 0.01
    orientation: float = 0.01
    smoothness: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


@dataclass
class LossReport:
    """Per-step scalar record; `sds` logs the adjoint's mean absolute value."""

    step: int
    sds: float
    depth: float
    entropy: float
    orientation: float
    smoothness: float
    total: float
    warm_alpha: float
    timestep: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"non-finite loss term {f.name}={v}")

    def to_json_line(self) -> str:
        return json.dumps(
            {f.name: getattr(self, f.name) for f in fields(self)}, sort_keys=False
        )


def sds_adjoint(
    image: torch.Tensor,
    provider,
    schedule: DiffusionSchedule,
    cond,
    generator: torch.Generator,
    t_range: tuple[float, float] = DEFAULT_TIMESTEP_RANGE,
    weight_fn=None,
    max_retries: int = 3,
):
    """Score-distillation pseudo-gradient for a rendered image in [0, 1].

    Draws (t, eps), noises the image, queries the provider's noise estimate
    and returns (w(t) * (eps_hat - eps), t). Provider failures retry with a
    fresh draw up to max_retries before propagating.
    """
    t_lo = max(1, int(round(t_range[0] * schedule.n_steps)))
    t_hi = min(schedule.n_steps, int(round(t_range[1] * schedule.n_steps)))
    clean = image.detach()

    last_err = None
    for _ in range(max_retries + 1):
        t = int(torch.randint(t_lo, t_hi + 1, (1,), generator=generator).item())
        eps = torch.randn(clean.shape, generator=generator, dtype=clean.dtype)
        a_bar = schedule.alpha_bar(t)
        noisy = math.sqrt(a_bar) * clean + math.sqrt(1.0 - a_bar) * eps
        try:
            eps_hat = provider.predict_noise(noisy, t, cond, epsilon=eps)
        except ProviderError as err:
            last_err = err
            continue
        if eps_hat.shape != clean.shape:
            last_err = ProviderError(
                f"provider returned shape {tuple(eps_hat.shape)}, expected {tuple(clean.shape)}"
            )
            continue
        if not torch.isfinite(eps_hat).all():
            last_err = ProviderError("provider returned non-finite noise estimate")
            continue
        w = 1.0 if weight_fn is None else float(weight_fn(t, schedule))
        return w * (eps_hat.to(clean.dtype) - eps), t
    raise last_err


def depth_loss(rendered: torch.Tensor, estimated: torch.Tensor, mask: torch.Tensor,
               alpha_map: torch.Tensor | None = None):
    """1 - Pearson correlation over foreground pixels with valid rendered alpha.

    Returns (loss, degenerate); degenerate cases (too few pixels or
    near-constant maps) contribute zero loss. Gradients flow through
    `rendered` only.
    """
    select = mask >= 0.5
    if alpha_map is not None:
        select = select & (alpha_map.detach() > 1e-4)
    if int(select.sum()) < 2:
        return rendered.new_zeros(()), True
    d = rendered[select]
    e = estimated.detach()[select].to(d.dtype)
    dc = d - d.mean()
    ec = e - e.mean()
    d_std = torch.sqrt((dc * dc).mean())
    e_std = torch.sqrt((ec * ec).mean())
    if d_std < _STD_FLOOR or e_std < _STD_FLOOR:
        return rendered.new_zeros(()), True
    rho = (dc * ec).mean() / (d_std * e_std)
    return 1.0 - rho, False


def entropy_reg(sample_alphas: torch.Tensor) -> torch.Tensor:
    """Mean binary entropy of per-sample opacities; pushes them to 0 or 1."""
    a = sample_alphas.clamp(_ALPHA_CLAMP, 1.0 - _ALPHA_CLAMP)
    return (-a * torch.log(a) - (1 - a) * torch.log(1 - a)).mean()


def orientation_reg(weights: torch.Tensor, normals: torch.Tensor, view_dirs: torch.Tensor,
                    degenerate: torch.Tensor | None = None) -> torch.Tensor:
    """Sum of w * max(<n, d>, 0)^2: penalizes normals facing away from the camera."""
    dot = (normals * view_dirs).sum(-1)
    pen = weights * torch.clamp(dot, min=0.0) ** 2
    if degenerate is not None:
        pen = torch.where(degenerate, torch.zeros_like(pen), pen)
    return pen.sum()


def smoothness_reg(density_fn, points: torch.Tensor, generator: torch.Generator,
                   max_perturb: float = 0.01, fd_step: float = 1e-3,
                   normals0=None) -> torch.Tensor:
    """Mean L1 change of FD normals under a small random position perturbation.

    normals0 optionally reuses (normals, degenerate) already computed at
    `points`, saving one field pass.
    """
    if points.numel() == 0:
        return torch.zeros((), dtype=points.dtype)
    delta = (
        torch.rand(points.shape, generator=generator, dtype=points.dtype) * 2.0 - 1.0
    ) * max_perturb
    n0, deg0 = normals0 if normals0 is not None else normals_at(density_fn, points, h=fd_step)
    n1, deg1 = normals_at(density_fn, points + delta, h=fd_step)
    valid = ~(deg0 | deg1)
    if not valid.any():
        return points.new_zeros(())
    return (n0 - n1).abs().sum(-1)[valid].mean()


def total_loss(sds_term, depth, entropy, orientation, smoothness, weights: LossWeights):
    """Weighted sum of all terms; the SDS term enters through its surrogate scalar
    (inner product of the detached adjoint with the rendered image), whose
    gradient w.r.t. the image is exactly the weighted adjoint."""
    total = (
        weights.sds * sds_term
        + weights.depth * depth
        + weights.entropy * entropy
        + weights.orientation * orientation
        + weights.smoothness * smoothness
    )
    if not torch.isfinite(torch.as_tensor(float(total))):
        raise ArithmeticError("non-finite total loss")
    return total


def sds_surrogate(image: torch.Tensor, adjoint: torch.Tensor) -> torch.Tensor:
    """Scalar whose image-gradient equals the adjoint (for single-pass backward)."""
    return (adjoint.detach() * image).sum()
