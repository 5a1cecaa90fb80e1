"""Powerset speaker-activity codec and the Conformer-style sequence backend.

Frame-level speaker activity is classified as a single powerset class: one
class per subset of at most ``max_concurrent`` of the ``max_speakers`` slots.
The backend maps the combined encoder sequence to per-frame class logits.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .layers import LayerNorm, Linear, ParamFactory, make_mha


def enumerate_classes(max_speakers: int, max_concurrent: int) -> list[tuple[int, ...]]:
    """All speaker subsets of size <= max_concurrent, ordered by (size, lexicographic)."""
    if not 1 <= max_concurrent <= max_speakers:
        raise nm.ConfigError(
            f"max_concurrent {max_concurrent} must be in [1, max_speakers={max_speakers}]"
        )
    table: list[tuple[int, ...]] = []
    for k in range(max_concurrent + 1):
        table.extend(itertools.combinations(range(max_speakers), k))
    return table


class PowersetCodec:
    """Bijection between speaker subsets and class indices."""

    def __init__(self, max_speakers: int = 4, max_concurrent: int = 2):
        self.max_speakers = max_speakers
        self.max_concurrent = max_concurrent
        self.classes = enumerate_classes(max_speakers, max_concurrent)
        self.index = {subset: i for i, subset in enumerate(self.classes)}
        self.membership = np.zeros((len(self.classes), max_speakers))
        for i, subset in enumerate(self.classes):
            for s in subset:
                self.membership[i, s] = 1.0

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def powerset_encode(multilabel: np.ndarray, codec: PowersetCodec) -> tuple[np.ndarray, int]:
    """Map binary [T, S] activity to class indices.

    Frames with more than max_concurrent active speakers are reduced to the
    most active speakers over the whole window (ties to the lowest index);
    the count of reduced frames is returned alongside.
    """
    multilabel = np.asarray(multilabel)
    totals = multilabel.sum(axis=0)
    indices = np.zeros(multilabel.shape[0], dtype=np.int64)
    reduced = 0
    for t in range(multilabel.shape[0]):
        active = tuple(int(s) for s in np.nonzero(multilabel[t])[0])
        if len(active) > codec.max_concurrent:
            keep = sorted(active, key=lambda s: (-totals[s], s))[: codec.max_concurrent]
            active = tuple(sorted(keep))
            reduced += 1
        indices[t] = codec.index[active]
    return indices, reduced


def powerset_decode_probs(logits: np.ndarray, codec: PowersetCodec) -> np.ndarray:
    """Per-speaker activity marginals: sum of class probabilities over subsets containing the speaker."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs @ codec.membership


def powerset_decode_hard(logits: np.ndarray, codec: PowersetCodec) -> np.ndarray:
    """Binary [T, S] activity from the argmax class per frame."""
    best = np.asarray(logits).argmax(axis=-1)
    out = np.zeros((len(best), codec.max_speakers))
    for t, cls in enumerate(best):
        for s in codec.classes[cls]:
            out[t, s] = 1.0
    return out


@dataclass
class BackendConfig:
    num_blocks: int = 2
    model_dim: int = 64
    conv_kernel: int = 9
    heads: int = 4
    ffn_dim: int = 128

    def __post_init__(self):
        if self.conv_kernel % 2 == 0:
            raise nm.ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.model_dim % self.heads:
            raise nm.ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")


class _FeedForward:
    def __init__(self, factory, name, d, ffn_dim):
        self.norm = LayerNorm(factory, f"{name}.ln", d)
        self.up = Linear(factory, f"{name}.up", d, ffn_dim)
        self.down = Linear(factory, f"{name}.down", ffn_dim, d)

    def __call__(self, x):
        return self.down(nm.gelu(self.up(self.norm(x))))


class _ConvModule:
    """Pointwise expansion, gated linear unit, depthwise time convolution, pointwise back."""

    def __init__(self, factory, name, d, kernel):
        self.norm = LayerNorm(factory, f"{name}.ln", d)
        self.pointwise_in = Linear(factory, f"{name}.pw_in", d, 2 * d)
        self.depthwise = factory.normal(f"{name}.dw", (kernel, d), std=1.0 / np.sqrt(kernel))
        self.depthwise_bias = factory.zeros(f"{name}.dw_b", (d,))
        self.pointwise_out = Linear(factory, f"{name}.pw_out", d, d)
        self.kernel = kernel
        self.dim = d

    def __call__(self, x):
        t = x.shape[-2]
        h = self.pointwise_in(self.norm(x))
        a = nm.narrow(h, h.ndim - 1, 0, self.dim)
        b = nm.narrow(h, h.ndim - 1, self.dim, self.dim)
        gated = nm.mul(a, nm.sigmoid(b))
        half = (self.kernel - 1) // 2
        padded = nm.pad_axis(gated, gated.ndim - 2, half, half)
        conv = None
        for j in range(self.kernel):
            tap = nm.mul(nm.narrow(padded, padded.ndim - 2, j, t), nm.narrow(self.depthwise, 0, j, 1))
            conv = tap if conv is None else nm.add(conv, tap)
        conv = nm.add(conv, self.depthwise_bias)
        swished = nm.mul(conv, nm.sigmoid(conv))
        return self.pointwise_out(swished)


class _ConformerBlock:
    def __init__(self, factory, name, cfg: BackendConfig):
        d = cfg.model_dim
        self.ffn1 = _FeedForward(factory, f"{name}.ffn1", d, cfg.ffn_dim)
        self.attn_norm = LayerNorm(factory, f"{name}.attn_ln", d)
        self.attn = make_mha(factory, f"{name}.attn", d, d)
        self.conv = _ConvModule(factory, f"{name}.conv", d, cfg.conv_kernel)
        self.ffn2 = _FeedForward(factory, f"{name}.ffn2", d, cfg.ffn_dim)
        self.final_norm = LayerNorm(factory, f"{name}.out_ln", d)
        self.heads = cfg.heads

    def __call__(self, x):
        x = nm.add(x, nm.scale(self.ffn1(x), 0.5))
        normed = self.attn_norm(x)
        attn_out, _ = nm.multi_head_attention(normed, normed, self.attn, self.heads)
        x = nm.add(x, attn_out)
        x = nm.add(x, self.conv(x))
        x = nm.add(x, nm.scale(self.ffn2(x), 0.5))
        return self.final_norm(x)


class ConformerBackend:
    """Stacked Conformer blocks plus a linear powerset classification head."""

    def __init__(self, config: BackendConfig, num_classes: int, factory: ParamFactory, name: str = "backend"):
        self.config = config
        self.blocks = [
            _ConformerBlock(factory, f"{name}.block{i}", config) for i in range(config.num_blocks)
        ]
        self.head = Linear(factory, f"{name}.head", config.model_dim, num_classes)

    def forward(self, x: nm.Tensor) -> nm.Tensor:
        for block in self.blocks:
            x = block(x)
        return self.head(x)
