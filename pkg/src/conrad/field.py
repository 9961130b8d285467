"""Unconstrained radiance field: multi-resolution hash encoding + two small MLPs.

The encoding follows the usual hash-grid recipe: per level, the 8 cell
corners are spatially hashed into a fixed table (colliding cells share an
entry) and trilinearly blended. One shared encoding feeds a density MLP
(exp head) and a color MLP (sigmoid head). All weights live in a ParamStore
so the optimizer and checkpoints see a single flat vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .autodiff import ParamStore

# classic spatial-hash primes; first axis left unmixed
_PRIMES = (1, 2654435761, 805459861)

_CORNERS = torch.tensor(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.long
)  # [8, 3]


class FieldEvalError(RuntimeError):
    """Raised when the field produces non-finite outputs (diverged training)."""


@dataclass(frozen=True)
class HashGridConfig:
    n_levels: int = 16
    features_per_level: int = 2
    table_size_log2: int = 19
    base_resolution: int = 16
    finest_resolution: int = 2048
    bbox_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    bbox_max: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if self.finest_resolution < self.base_resolution:
            raise ValueError("finest_resolution must be >= base_resolution")
        if any(lo >= hi for lo, hi in zip(self.bbox_min, self.bbox_max)):
            raise ValueError("degenerate bounding box")

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.features_per_level

    def level_resolutions(self) -> list[int]:
        if self.n_levels == 1:
            return [self.base_resolution]
        growth = math.exp(
            (math.log(self.finest_resolution) - math.log(self.base_resolution))
            / (self.n_levels - 1)
        )
        return [int(math.floor(self.base_resolution * growth**lvl)) for lvl in range(self.n_levels)]


@dataclass(frozen=True)
class MlpConfig:
    n_layers: int = 3
    hidden_dim: int = 64

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden_dim < 1:
            raise ValueError("MLP needs at least one layer and one hidden unit")


def _mlp_segments(prefix: str, in_dim: int, out_dim: int, cfg: MlpConfig):
    dims = [in_dim] + [cfg.hidden_dim] * (cfg.n_layers - 1) + [out_dim]
    segs = []
    for k in range(cfg.n_layers):
        segs.append((f"{prefix}/w{k}", (dims[k + 1], dims[k])))
        segs.append((f"{prefix}/b{k}", (dims[k + 1],)))
    return segs


class RadianceField:
    """Maps world points to (color in (0,1)^3, density > 0)."""

    DENSITY_BIAS_INIT = -1.0  # initial sigma ~ e^-1, a mild fog

    def __init__(
        self,
        grid: HashGridConfig | None = None,
        mlp: MlpConfig | None = None,
        dtype=torch.float32,
        generator: torch.Generator | None = None,
    ):
        self.grid = grid or HashGridConfig()
        self.mlp = mlp or MlpConfig()
        self.dtype = dtype
        self.resolutions = self.grid.level_resolutions()

        segments = [
            (f"grid/level{lvl}", (self.grid.table_size, self.grid.features_per_level))
            for lvl in range(self.grid.n_levels)
        ]
        segments += _mlp_segments("density", self.grid.output_dim, 1, self.mlp)
        segments += _mlp_segments("color", self.grid.output_dim, 3, self.mlp)
        self.params = ParamStore(segments, dtype=dtype)
        self.init_parameters(generator)

        self._bbox_min = torch.tensor(self.grid.bbox_min, dtype=dtype)
        self._bbox_size = torch.tensor(self.grid.bbox_max, dtype=dtype) - self._bbox_min

    @torch.no_grad()
    def init_parameters(self, generator: torch.Generator | None = None) -> None:
        g = generator
        for lvl in range(self.grid.n_levels):
            name = f"grid/level{lvl}"
            shape = self.params.layout[name][2]
            table = torch.empty(shape, dtype=self.dtype).uniform_(-1e-4, 1e-4, generator=g)
            self.params.set_segment(name, table)
        for prefix in ("density", "color"):
            k = 0
            while f"{prefix}/w{k}" in self.params.layout:
                w_shape = self.params.layout[f"{prefix}/w{k}"][2]
                fan_in = w_shape[1]
                bound = math.sqrt(6.0 / fan_in)
                w = torch.empty(w_shape, dtype=self.dtype).uniform_(-bound, bound, generator=g)
                self.params.set_segment(f"{prefix}/w{k}", w)
                self.params.set_segment(
                    f"{prefix}/b{k}", torch.zeros(self.params.layout[f"{prefix}/b{k}"][2], dtype=self.dtype)
                )
                k += 1
            # last bias just written is the output head
            if prefix == "density":
                self.params.set_segment(
                    f"density/b{k - 1}", torch.full((1,), self.DENSITY_BIAS_INIT, dtype=self.dtype)
                )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Concatenated trilinear hash features for world points x [N, 3]."""
        x = x.to(self.dtype)
        u = (x - self._bbox_min) / self._bbox_size
        u = u.clamp(0.0, 1.0)
        bx, by, bz = _CORNERS[:, 0], _CORNERS[:, 1], _CORNERS[:, 2]
        mask = self.grid.table_size - 1
        feats = []
        for lvl, res in enumerate(self.resolutions):
            xs = u * res  # [N, 3] in [0, res]
            x0 = xs.floor().long().clamp_(0, res - 1)  # [N, 3]
            frac = xs - x0  # [N, 3] in [0, 1]
            # hashes/weights for the 8 corners assembled from per-axis pairs
            hx = torch.stack((x0[:, 0] * _PRIMES[0], (x0[:, 0] + 1) * _PRIMES[0]), 1)
            hy = torch.stack((x0[:, 1] * _PRIMES[1], (x0[:, 1] + 1) * _PRIMES[1]), 1)
            hz = torch.stack((x0[:, 2] * _PRIMES[2], (x0[:, 2] + 1) * _PRIMES[2]), 1)
            h8 = (hx[:, bx] ^ hy[:, by] ^ hz[:, bz]) & mask  # [N, 8]
            wx = torch.stack((1.0 - frac[:, 0], frac[:, 0]), 1)
            wy = torch.stack((1.0 - frac[:, 1], frac[:, 1]), 1)
            wz = torch.stack((1.0 - frac[:, 2], frac[:, 2]), 1)
            w8 = wx[:, bx] * wy[:, by] * wz[:, bz]  # [N, 8]
            table = self.params.view(f"grid/level{lvl}")
            corner_feats = table[h8.reshape(-1)].reshape(*h8.shape, -1)  # [N, 8, F]
            feats.append((w8[..., None] * corner_feats).sum(dim=1))
        return torch.cat(feats, dim=-1)

    def _mlp(self, prefix: str, h: torch.Tensor) -> torch.Tensor:
        for k in range(self.mlp.n_layers):
            w = self.params.view(f"{prefix}/w{k}")
            b = self.params.view(f"{prefix}/b{k}")
            h = h @ w.T + b
            if k < self.mlp.n_layers - 1:
                h = torch.relu(h)
        return h

    def density_from_features(self, enc: torch.Tensor) -> torch.Tensor:
        sigma = torch.exp(self._mlp("density", enc).squeeze(-1))
        if not torch.isfinite(sigma).all():
            raise FieldEvalError("non-finite density")
        return sigma

    def color_from_features(self, enc: torch.Tensor) -> torch.Tensor:
        rgb = torch.sigmoid(self._mlp("color", enc))
        if not torch.isfinite(rgb).all():
            raise FieldEvalError("non-finite color")
        return rgb

    def density(self, x: torch.Tensor) -> torch.Tensor:
        return self.density_from_features(self.encode(x))

    def color(self, x: torch.Tensor) -> torch.Tensor:
        return self.color_from_features(self.encode(x))

    def density_and_color(self, x: torch.Tensor):
        enc = self.encode(x)
        return self.density_from_features(enc), self.color_from_features(enc)
