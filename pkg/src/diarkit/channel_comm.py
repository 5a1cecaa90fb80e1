"""Cross-channel communication blocks and channel aggregation.

Both block variants act per frame on the channel axis, are agnostic to the
number of channels, and carry no channel position information, so they are
permutation-equivariant by construction. ``init_identity`` zeroes the block's
layer-norm scale and bias, which makes the residual output equal the input
bitwise until training moves the parameters.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .layers import LayerNorm, Linear, ParamFactory, make_mha


class UnsupportedOperationError(RuntimeError):
    """Requested data that this model variant does not produce."""


def channel_average(x: nm.Tensor) -> nm.Tensor:
    """Mean over the channel axis of a [C, T, D] stack.

    Anchored at channel 0 (mean = x0 + sum(xc - x0)/C) so that duplicated
    channels average to channel 0 bitwise.
    """
    c = x.shape[0]
    rest = x.shape[1:]
    first = nm.reshape(nm.narrow(x, 0, 0, 1), rest)
    if c == 1:
        return first
    delta = None
    for i in range(1, c):
        chan = nm.reshape(nm.narrow(x, 0, i, 1), rest)
        diff = nm.sub(chan, first)
        delta = diff if delta is None else nm.add(delta, diff)
    return nm.add(first, nm.scale(delta, 1.0 / c))


class ChAttBlock:
    """Per-frame multi-head self-attention across channels, then LN + residual."""

    def __init__(self, factory: ParamFactory, name: str, model_dim: int, hidden_dim: int = 32, heads: int = 4):
        if hidden_dim % heads:
            raise nm.ConfigError(f"hidden_dim {hidden_dim} not divisible by heads {heads}")
        self.attn = make_mha(factory, f"{name}.attn", model_dim, hidden_dim)
        self.norm = LayerNorm(factory, f"{name}.ln", model_dim)
        self.heads = heads

    def forward(self, x: nm.Tensor) -> tuple[nm.Tensor, nm.Tensor]:
        """[C, T, D] -> ([C, T, D], attention weights [T, H, C, C])."""
        frames_first = nm.transpose(x, (1, 0, 2))  # [T, C, D]
        attn_out, weights = nm.multi_head_attention(frames_first, frames_first, self.attn, self.heads)
        out = nm.add(frames_first, self.norm(attn_out))
        return nm.transpose(out, (1, 0, 2)), weights

    def init_identity(self) -> None:
        self.norm.set_zero()


class TACBlock:
    """Transform-average-concatenate across channels, then LN + residual."""

    def __init__(self, factory: ParamFactory, name: str, model_dim: int, hidden_dim: int = 32):
        self.transform = Linear(factory, f"{name}.transform", model_dim, hidden_dim)
        self.slope = factory.scalar(f"{name}.prelu", 0.25)
        self.project = Linear(factory, f"{name}.project", model_dim + hidden_dim, model_dim)
        self.norm = LayerNorm(factory, f"{name}.ln", model_dim)

    def forward(self, x: nm.Tensor) -> nm.Tensor:
        """[C, T, D] -> [C, T, D]."""
        c = x.shape[0]
        hidden = nm.prelu(self.transform(x), self.slope)  # [C, T, H]
        pooled = channel_average(hidden)  # [T, H]
        tiled = nm.broadcast_to(nm.reshape(pooled, (1,) + pooled.shape), (c,) + pooled.shape)
        projected = self.project(nm.concat([x, tiled], axis=-1))
        return nm.add(x, self.norm(projected))

    def init_identity(self) -> None:
        self.norm.set_zero()


def init_identity(block: ChAttBlock | TACBlock) -> None:
    block.init_identity()


def validate_attention_tensor(weights: np.ndarray, tol: float = 1e-10) -> None:
    """Check the [T, H, C, C] invariants: rows sum to 1, entries in [0, 1]."""
    weights = np.asarray(weights)
    if weights.ndim != 4 or weights.shape[-1] != weights.shape[-2]:
        raise ValueError(f"expected [T, H, C, C] attention weights, got {weights.shape}")
    if np.abs(weights.sum(axis=-1) - 1.0).max() > tol:
        raise ValueError("attention rows do not sum to 1")
    if weights.min() < -tol or weights.max() > 1 + tol:
        raise ValueError("attention entries outside [0, 1]")
