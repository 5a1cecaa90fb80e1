"""Dense float64 math with reverse-mode automatic differentiation.

Everything the models need is built from a small closed set of primitives
(matmul, add/sub/mul, softmax, layer_norm, prelu/gelu/sigmoid, slice/concat/
reshape/transpose/pad, mean, cross_entropy). Each primitive records its
backward rule on a dynamically built graph; ``backward`` replays the graph in
reverse topological order, which is deterministic, so repeated runs with the
same seed are bit-identical.

Thread safety: all operations are pure given their inputs. A single graph
(one forward/backward) must stay on one thread; independent graphs and
read-only parameter sharing across threads are fine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

# Largest (m, k, n) for which matmul uses sequential scalar accumulation
# instead of BLAS. Tiny products stay bit-identical to a naive triple loop
# across BLAS builds; large ones favor speed.
_EXACT_MATMUL_DIM = 8

_check_finite = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A structural configuration constraint is violated."""


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf rejection at tensor construction (default on)."""
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    """A float64 array plus the graph edge needed for backprop."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = parents
        self._backward: Callable[[], None] | None = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor whose gradient persists across steps."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data)
        self.name = name
        if _check_finite and not np.all(np.isfinite(self.data)):
            raise ValueError(f"parameter {name!r} contains non-finite values")

    def zero_grad(self) -> None:
        self.grad = None


def tensor(data) -> Tensor:
    """Wrap array data as a graph leaf, rejecting NaN/Inf in checked mode."""
    t = Tensor(data)
    if _check_finite and not np.all(np.isfinite(t.data)):
        raise ValueError("tensor data contains non-finite values")
    return t


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        # copy: g may alias a buffer shared with another tensor's gradient
        t.grad = np.array(g)
    else:
        t.grad += g


def _give(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a gradient the caller owns (fresh array or dead-buffer view)."""
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(out: Tensor) -> None:
    """Backpropagate from a scalar output through the recorded graph."""
    if out.data.size != 1:
        raise ShapeError(f"backward expects a scalar, got shape {out.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b))

    def bw():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    out._backward = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, (a, b))

    def bw():
        _accumulate(a, out.grad)
        _give(b, -out.grad)

    out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, (a, b))

    def bw():
        _give(a, out.grad * b.data)
        _give(b, out.grad * a.data)

    out._backward = bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, (a,))

    def bw():
        _give(a, out.grad * s)

    out._backward = bw
    return out


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape[-2:]
    n = b.shape[-1]
    if a.ndim == 2 and b.ndim == 2 and max(m, k, n) <= _EXACT_MATMUL_DIM:
        # accumulate in index order so the result is bit-identical to a
        # naive triple loop, independent of the BLAS in use
        out = np.zeros((m, n))
        tmp = np.empty((m, n))
        for i in range(k):
            np.multiply(a[:, i : i + 1], b[i : i + 1, :], out=tmp)
            out += tmp
        return out
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(_mm(a.data, b.data), (a, b))

    def bw():
        _give(a, _mm(out.grad, b.data.swapaxes(-1, -2)))
        _give(b, _mm(a.data.swapaxes(-1, -2), out.grad))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape), (a,))

    def bw():
        _give(a, out.grad.reshape(a.data.shape))

    out._backward = bw
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes), (a,))
    inverse = tuple(np.argsort(axes))

    def bw():
        _give(a, out.grad.transpose(inverse))

    out._backward = bw
    return out


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]

    def bw():
        offset = 0
        for p, size in zip(parts, sizes):
            idx = [slice(None)] * out.data.ndim
            idx[axis] = slice(offset, offset + size)
            _give(p, out.grad[tuple(idx)])
            offset += size

    out._backward = bw
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy(), (a,))

    def bw():
        g = np.zeros_like(a.data)
        g[idx] = out.grad
        _give(a, g)

    out._backward = bw
    return out


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    out = Tensor(np.pad(a.data, widths), (a,))
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(before, before + a.data.shape[axis])
    idx = tuple(idx)

    def bw():
        _give(a, out.grad[idx])

    out._backward = bw
    return out


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(a.data, shape).copy(), (a,))

    def bw():
        _accumulate(a, out.grad)

    out._backward = bw
    return out


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), (a,))
    size = a.data.shape[axis]

    def bw():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / size, a.data.shape))

    out._backward = bw
    return out


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean(), (a,))

    def bw():
        _accumulate(a, np.full_like(a.data, out.grad / a.data.size))

    out._backward = bw
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), (a,))

    def bw():
        _accumulate(a, np.full_like(a.data, out.grad))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    w = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(w, out=w)
    w /= w.sum(axis=axis, keepdims=True)
    out = Tensor(w, (a,))

    def bw():
        dx = w * out.grad
        dx -= w * dx.sum(axis=axis, keepdims=True)
        _give(a, dx)

    out._backward = bw
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, (x, gamma, beta))

    def bw():
        g = out.grad
        lead = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        _accumulate(beta, g.sum(axis=lead))
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _give(x, dx)

    out._backward = bw
    return out


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Piecewise-linear activation with a learnable scalar negative slope."""
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, slope.data * x.data), (x, slope))

    def bw():
        g = out.grad
        _give(x, g * np.where(pos, 1.0, slope.data))
        _give(slope, np.sum(g * np.where(pos, 0.0, x.data)))

    out._backward = bw
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh form; its own derivative is used for backward so the pairing is exact
    sq = x.data * x.data
    t = np.tanh(_GELU_C * (x.data + 0.044715 * (sq * x.data)))
    out = Tensor(0.5 * x.data * (1.0 + t), (x,))

    def bw():
        dinner = _GELU_C * (1.0 + (3 * 0.044715) * sq)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * dinner
        _give(x, out.grad * dx)

    out._backward = bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = np.where(
        x.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x.data))),
        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))),
    )
    out = Tensor(s, (x,))

    def bw():
        _give(x, out.grad * s * (1.0 - s))

    out._backward = bw
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer class targets, shape [T, K]."""
    targets = np.asarray(targets, dtype=np.int64)
    t, k = logits.data.shape
    if targets.shape != (t,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.data.shape}")
    if targets.min() < 0 or targets.max() >= k:
        raise IndexError(f"target class out of range [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(t), targets]
    out = Tensor(nll.mean(), (logits,))

    def bw():
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        probs[np.arange(t), targets] -= 1.0
        _give(logits, out.grad * probs / t)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# multi-head attention
# ---------------------------------------------------------------------------


@dataclass
class MhaParams:
    """Projection weights for multi-head attention.

    ``wq/wk/wv`` map model dim to the attention dim, ``wo`` maps back. The
    key projection carries no bias: softmax rows are shift-invariant, so a
    key bias cannot affect the output.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def multi_head_attention(
    x_q: Tensor, x_kv: Tensor, params: MhaParams, num_heads: int
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns output and softmax weights.

    Inputs are [..., n, d_model]; weights come back as [..., H, n, n]. The
    attention dim is taken from the projection shapes and may differ from
    d_model.
    """
    d_attn = params.wq.shape[-1]
    if d_attn % num_heads != 0:
        raise ConfigError(f"attention dim {d_attn} not divisible by {num_heads} heads")
    dh = d_attn // num_heads
    lead = x_q.shape[:-2]
    n = x_q.shape[-2]

    def split_heads(t: Tensor) -> Tensor:
        t = reshape(t, lead + (n, num_heads, dh))
        order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return transpose(t, order)  # [..., H, n, dh]

    # scaling q (small) instead of the score matrix (n x n) is equivalent
    q = split_heads(scale(add(matmul(x_q, params.wq), params.bq), 1.0 / math.sqrt(dh)))
    k = split_heads(matmul(x_kv, params.wk))
    v = split_heads(add(matmul(x_kv, params.wv), params.bv))

    kt_axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = matmul(q, transpose(k, kt_axes))
    weights = softmax(scores, axis=-1)  # [..., H, n, n]
    ctx = matmul(weights, v)  # [..., H, n, dh]
    back = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    ctx = reshape(transpose(ctx, back), lead + (n, d_attn))
    out = add(matmul(ctx, params.wo), params.bo)
    return out, weights


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    Returns the maximum relative error, with denominator
    max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(*inputs).data)
            flat[i] = orig - eps
            f_minus = float(f(*inputs).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(numeric - an_flat[i]) / max(abs(numeric), abs(an_flat[i]), 1e-8)
            worst = max(worst, rel)
    return worst
