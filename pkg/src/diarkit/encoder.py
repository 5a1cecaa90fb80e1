"""Trainable transformer front-end exposing every layer's output sequence.

The first ``num_multichannel_layers`` layers can run on several channels in
parallel (batched over the leading axis, parameters shared); the combiner
collapses the per-layer sequences into one stream with softmax weights.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import numerics as nm
from .layers import LayerNorm, Linear, ParamFactory, make_mha


@dataclass
class EncoderConfig:
    num_layers: int = 6
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    feature_dim: int = 16
    num_multichannel_layers: int = 4
    max_positions: int = 512

    def __post_init__(self):
        if not 1 <= self.num_multichannel_layers <= self.num_layers:
            raise nm.ConfigError(
                f"num_multichannel_layers {self.num_multichannel_layers} must be in "
                f"[1, num_layers={self.num_layers}]"
            )
        if self.model_dim % self.heads:
            raise nm.ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )


class _EncoderLayer:
    """Pre-norm self-attention over time plus a feed-forward sublayer."""

    def __init__(self, factory, name, cfg: EncoderConfig):
        d = cfg.model_dim
        self.ln1 = LayerNorm(factory, f"{name}.ln1", d)
        self.attn = make_mha(factory, f"{name}.attn", d, d)
        self.ln2 = LayerNorm(factory, f"{name}.ln2", d)
        self.up = Linear(factory, f"{name}.up", d, cfg.ffn_dim)
        self.down = Linear(factory, f"{name}.down", cfg.ffn_dim, d)
        self.heads = cfg.heads

    def __call__(self, x: nm.Tensor) -> nm.Tensor:
        normed = self.ln1(x)
        attn_out, _ = nm.multi_head_attention(normed, normed, self.attn, self.heads)
        x = nm.add(x, attn_out)
        return nm.add(x, self.down(nm.gelu(self.up(self.ln2(x)))))


class Encoder:
    def __init__(self, config: EncoderConfig, factory: ParamFactory, name: str = "enc"):
        self.config = config
        self.proj = Linear(factory, f"{name}.proj", config.feature_dim, config.model_dim)
        # position information is applied along time only; the channel axis
        # stays permutation-equivariant
        self.positions = factory.normal(f"{name}.pos", (config.max_positions, config.model_dim), std=0.02)
        self.layers = [
            _EncoderLayer(factory, f"{name}.layer{i}", config) for i in range(config.num_layers)
        ]

    def embed(self, features: nm.Tensor) -> nm.Tensor:
        """Project [*, T, F] features to model dim and add time positions."""
        if features.shape[-1] != self.config.feature_dim:
            raise nm.ConfigError(
                f"feature dim {features.shape[-1]} does not match config "
                f"feature_dim {self.config.feature_dim}"
            )
        t = features.shape[-2]
        if t > self.config.max_positions:
            raise nm.ConfigError(f"sequence length {t} exceeds max_positions {self.config.max_positions}")
        return nm.add(self.proj(features), nm.narrow(self.positions, 0, 0, t))

    def layer(self, index: int, x: nm.Tensor) -> nm.Tensor:
        return self.layers[index](x)

    def encode_channel(self, features: nm.Tensor) -> list[nm.Tensor]:
        """Single-channel encoding returning all L+1 sequences (projection + each layer)."""
        x = self.embed(features)
        outputs = [x]
        for layer in self.layers:
            x = layer(x)
            outputs.append(x)
        return outputs


def superb_combine(outputs: list[nm.Tensor], logits: nm.Tensor) -> nm.Tensor:
    """Softmax-weighted sum of the per-layer sequences."""
    if len(outputs) != logits.shape[0]:
        raise nm.ConfigError(
            f"{len(outputs)} layer outputs but {logits.shape[0]} combination weights"
        )
    weights = nm.softmax(logits, axis=0)
    combined = None
    for i, seq in enumerate(outputs):
        term = nm.mul(nm.narrow(weights, 0, i, 1), seq)
        combined = term if combined is None else nm.add(combined, term)
    return combined
