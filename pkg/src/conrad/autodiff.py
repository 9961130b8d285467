"""Flat parameter storage and reverse-mode gradients for the whole pipeline.

All trainable state lives in one flat vector; named segments carve it into
hash tables and MLP weights. Anything computed from `ParamStore.view(...)`
stays connected to the flat leaf, so one backward pass fills a gradient
vector congruent with the parameters. The backward entry point accepts an
adjoint image so score-distillation pseudo-gradients can seed it directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


class GradEngineError(RuntimeError):
    pass


class ParamStore:
    """Flat 32-bit (or 64-bit in test mode) parameter vector with a layout table."""

    def __init__(self, segments: list[tuple[str, tuple[int, ...]]], dtype=torch.float32):
        self.dtype = dtype
        self.layout: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in segments:
            if name in self.layout:
                raise ValueError(f"duplicate segment name {name!r}")
            length = 1
            for s in shape:
                length *= s
            self.layout[name] = (offset, length, tuple(shape))
            offset += length
        self.values = torch.zeros(offset, dtype=dtype, requires_grad=True)

    def __len__(self) -> int:
        return self.values.shape[0]

    def view(self, name: str) -> torch.Tensor:
        """Reshaped view of a segment; keeps the autograd link to the flat leaf."""
        offset, length, shape = self.layout[name]
        return self.values[offset : offset + length].view(shape)

    @torch.no_grad()
    def set_segment(self, name: str, value: torch.Tensor) -> None:
        offset, length, shape = self.layout[name]
        if tuple(value.shape) != shape:
            raise ValueError(f"segment {name!r} expects shape {shape}, got {tuple(value.shape)}")
        self.values[offset : offset + length] = value.reshape(-1).to(self.dtype)

    @torch.no_grad()
    def load_flat(self, flat: torch.Tensor) -> None:
        if flat.numel() != len(self):
            raise ValueError(f"parameter vector length {flat.numel()} != layout length {len(self)}")
        self.values.copy_(flat.reshape(-1).to(self.dtype))

    def zero_grad(self) -> None:
        if self.values.grad is not None:
            self.values.grad.zero_()


@dataclass
class GradAccumulator:
    """Gradient vector congruent with a ParamStore."""

    grads: torch.Tensor

    def __post_init__(self):
        self.grads = self.grads.detach()

    def segment(self, store: ParamStore, name: str) -> torch.Tensor:
        offset, length, shape = store.layout[name]
        return self.grads[offset : offset + length].view(shape)


def backward(output: torch.Tensor, store: ParamStore, adjoint: torch.Tensor | None = None,
             accumulate: bool = False) -> GradAccumulator:
    """Reverse-mode pass from `output` to the store's flat parameters.

    `output` is either a scalar (adjoint None) or any tensor with a matching
    adjoint that seeds the pass — the SDS pseudo-gradient path. By default the
    store's gradient is cleared first; pass accumulate=True to sum into it.
    """
    if output.grad_fn is None and not output.requires_grad:
        raise GradEngineError("backward before forward: output is not connected to the parameters")
    if adjoint is None:
        if output.numel() != 1:
            raise GradEngineError("non-scalar output requires an explicit adjoint")
    elif adjoint.shape != output.shape:
        raise GradEngineError(
            f"adjoint shape {tuple(adjoint.shape)} does not match output shape {tuple(output.shape)}"
        )
    if not accumulate:
        store.zero_grad()
    torch.autograd.backward(output, grad_tensors=None if adjoint is None else adjoint.to(output.dtype))
    if store.values.grad is None:
        return GradAccumulator(torch.zeros_like(store.values))
    return GradAccumulator(store.values.grad.clone())
