import dataclasses

import pytest
import torch

from conrad.field import HashGridConfig, MlpConfig, RadianceField


class FnField:
    """Field defined by plain callables; stands in for the learned field."""

    def __init__(self, density_fn, color_fn=None):
        self._density = density_fn
        self._color = color_fn or (lambda x: torch.full((x.shape[0], 3), 0.5, dtype=x.dtype))

    def density(self, x):
        return self._density(x)

    def color(self, x):
        return self._color(x)

    def density_and_color(self, x):
        return self._density(x), self._color(x)


def tiny_field(dtype=torch.float32, seed=0, levels=2, table_log2=6, hidden=8,
               finest=64) -> RadianceField:
    gen = torch.Generator().manual_seed(seed)
    return RadianceField(
        grid=HashGridConfig(n_levels=levels, features_per_level=2, table_size_log2=table_log2,
                            base_resolution=4, finest_resolution=finest),
        mlp=MlpConfig(n_layers=2, hidden_dim=hidden),
        dtype=dtype,
        generator=gen,
    )


@pytest.fixture
def fn_field():
    return FnField


@pytest.fixture
def make_tiny_field():
    return tiny_field
