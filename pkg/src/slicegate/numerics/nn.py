"""Neural building blocks: parameter store, attention, pre-norm layers.

Everything here operates on tensors shaped (..., S, D) where leading axes
are batch-like. Axis 0 is always the sample axis; stochastic depth makes
its keep/drop decision per sample along that axis.
"""

from __future__ import annotations

import numpy as np

from slicegate.errors import NumericError
from slicegate.numerics import tensor as T
from slicegate.numerics.tensor import Tensor


class ParamStore:
    """Flat name -> Tensor registry. Names are dot-prefixed by module.

    The prefix of every name decides its optimizer group, and the sorted
    name list defines the checkpoint layout, so names must be unique.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.ascontiguousarray(array, dtype=self.dtype),
                   requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def total_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2 * std, 2 * std)


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth on a residual branch.

    During training each sample (axis 0) is zeroed with probability `rate`
    and survivors are scaled by 1/(1-rate); in evaluation mode this is the
    identity. rate must lie in [0, 1).
    """
    if not 0.0 <= rate < 1.0:
        raise NumericError(f"drop-path rate must be in [0, 1), got {rate}")
    if rate == 0.0 or not training:
        return x
    if rng is None:
        raise NumericError("drop_path in training mode needs an explicit rng")
    keep = 1.0 - rate
    mask_shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(mask_shape) < keep).astype(x.dtype) / np.asarray(keep, dtype=x.dtype)
    return T.mul(x, Tensor(mask))


def drop_path_rates(max_rate: float, depth: int) -> list[float]:
    """Linear schedule from 0 to max_rate inclusive across `depth` layers."""
    if depth == 1:
        return [max_rate]
    # parenthesized so the endpoints are exact (i/(depth-1) hits 0.0 and 1.0)
    return [max_rate * (i / (depth - 1)) for i in range(depth)]


class MultiHeadSelfAttention:
    """Scaled-dot-product self-attention over the second-to-last axis.

    Input (..., S, D) -> output (..., S, D). Pre-norm and residual wiring
    are the caller's job. An optional additive mask broadcastable to the
    (..., heads, S, S) score tensor is supported but unused by the models
    in this package.
    """

    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int,
                 rng: np.random.Generator):
        if dim % heads != 0:
            raise NumericError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / np.sqrt(self.head_dim)
        self.wq = store.add(f"{prefix}.wq", xavier(rng, dim, dim))
        self.bq = store.add(f"{prefix}.bq", np.zeros(dim))
        # No key bias: a constant key offset cancels row-wise in the softmax.
        self.wk = store.add(f"{prefix}.wk", xavier(rng, dim, dim))
        self.wv = store.add(f"{prefix}.wv", xavier(rng, dim, dim))
        self.bv = store.add(f"{prefix}.bv", np.zeros(dim))
        self.wo = store.add(f"{prefix}.wo", xavier(rng, dim, dim))
        self.bo = store.add(f"{prefix}.bo", np.zeros(dim))

    def __call__(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        if x.shape[-1] != self.dim:
            raise NumericError(f"attention expects width {self.dim}, got {x.shape[-1]}")
        q = self._split(T.add(T.matmul(x, self.wq), self.bq))
        k = self._split(T.matmul(x, self.wk))
        v = self._split(T.add(T.matmul(x, self.wv), self.bv))
        scores = T.mul(T.matmul(q, T.transpose(k, _swap_last_two(k.ndim))), self.scale)
        if mask is not None:
            scores = T.add(scores, mask)
        mixed = T.matmul(T.softmax(scores, axis=-1), v)
        return T.add(T.matmul(self._merge(mixed), self.wo), self.bo)

    def value_projection(self, x: Tensor) -> Tensor:
        """The S=1 degenerate path: softmax over one key is exactly 1."""
        return T.add(T.matmul(T.add(T.matmul(x, self.wv), self.bv), self.wo), self.bo)

    def _split(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        x = T.reshape(x, lead + (self.heads, self.head_dim))
        perm = tuple(range(len(lead) - 1)) + (x.ndim - 2, len(lead) - 1, x.ndim - 1)
        return T.transpose(x, perm)

    def _merge(self, x: Tensor) -> Tensor:
        n = x.ndim
        perm = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
        x = T.transpose(x, perm)
        return T.reshape(x, x.shape[:-2] + (self.dim,))


class FeedForward:
    """Two-layer MLP with GELU; hidden width = ratio * dim."""

    def __init__(self, store: ParamStore, prefix: str, dim: int,
                 rng: np.random.Generator, ratio: int = 4):
        hidden = ratio * dim
        self.w1 = store.add(f"{prefix}.w1", xavier(rng, dim, hidden))
        self.b1 = store.add(f"{prefix}.b1", np.zeros(hidden))
        self.w2 = store.add(f"{prefix}.w2", xavier(rng, hidden, dim))
        self.b2 = store.add(f"{prefix}.b2", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        h = T.gelu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)


class LayerNorm:
    def __init__(self, store: ParamStore, prefix: str, dim: int):
        self.gain = store.add(f"{prefix}.g", np.ones(dim))
        self.bias = store.add(f"{prefix}.b", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class TransformerLayer:
    """Pre-norm encoder layer: x + dp(attn(ln(x))), then x + dp(mlp(ln(x)))."""

    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int,
                 rng: np.random.Generator, drop_path_rate: float = 0.0,
                 mlp_ratio: int = 4):
        self.drop_path_rate = drop_path_rate
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", dim)
        self.attn = MultiHeadSelfAttention(store, f"{prefix}.attn", dim, heads, rng)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", dim)
        self.mlp = FeedForward(store, f"{prefix}.mlp", dim, rng, ratio=mlp_ratio)

    def __call__(self, x: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        x = T.add(x, drop_path(self.attn(self.ln1(x)), self.drop_path_rate, training, rng))
        x = T.add(x, drop_path(self.mlp(self.ln2(x)), self.drop_path_rate, training, rng))
        return x


def _swap_last_two(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)
