"""Temporally-gated adapter: cross-slice attention, spatial refinement,
and the adaptive gate that blends temporal and single-slice tokens.

Given token grids for a 5-slice window, each token position is treated as
an independent length-5 sequence: project down, add slice-order position
embeddings, run a 4-layer pre-norm transformer over the slice axis with a
linear stochastic-depth schedule, project the center slice back up, refine
within-slice with one spatial attention layer, then gate against the
center slice's original tokens. The gate starts effectively closed
(W_g = 0, b_g = -5) so the model initially reproduces its single-slice
baseline, and a binary penalty g*(1-g) pushes it toward decisive values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import slicegate.numerics as N
from slicegate.errors import NumericError
from slicegate.model import BaselineModel, MaskLogits, ModelConfig, module_rng
from slicegate.numerics import LayerNorm, ParamStore, Tensor, TransformerLayer, drop_path_rates, xavier

GATE_BIAS_INIT = -5.0
CENTER = 2


@dataclass
class WindowTokens:
    """Encoder tokens for the 5 slices around one sample's center slice."""

    tokens: Tensor  # (5, L, D_v)
    slice_indices: tuple[int, ...]

    def __post_init__(self):
        if self.tokens.shape[0] != 5 or len(self.slice_indices) != 5:
            raise NumericError("context window must hold exactly 5 slices")
        if list(self.slice_indices) != sorted(self.slice_indices):
            raise NumericError("window slice indices must be non-decreasing")


@dataclass
class GateDiagnostics:
    """Per-token gate values and the binary penalty mean(g * (1 - g))."""

    g: np.ndarray      # (L, 1) for a single sample, (B, L, 1) for a batch
    penalty: float

    def __post_init__(self):
        if not (0.0 <= self.penalty <= 0.25 + 1e-12):
            raise NumericError(f"gate penalty {self.penalty} outside [0, 0.25]")


class TemporalAdapter:
    """Parameters and forward pieces for the cross-slice adapter."""

    def __init__(self, store: ParamStore, config: ModelConfig, rng: np.random.Generator):
        d_v, d_p = config.d_v, config.d_proj
        self.config = config
        self.w_in = store.add("adapter.w_in", xavier(rng, d_v, d_p))
        self.ln_in = LayerNorm(store, "adapter.ln_in", d_p)
        self.e_pos = store.add(
            "adapter.e_pos", rng.normal(0.0, 0.02, size=(1, config.window, d_p)))
        self.rates = drop_path_rates(config.drop_path_max, config.temporal_depth)
        self.temporal_layers = [
            TransformerLayer(store, f"adapter.temporal{i}", d_p, config.heads, rng,
                             drop_path_rate=self.rates[i])
            for i in range(config.temporal_depth)
        ]
        self.w_out = store.add("adapter.w_out", xavier(rng, d_p, d_v))
        self.spatial = TransformerLayer(store, "adapter.spatial", d_v, config.heads, rng)
        self.w_g = store.add("adapter.w_g", np.zeros((d_v, 1)))
        self.b_g = store.add("adapter.b_g", np.full(1, GATE_BIAS_INIT))

    def project_tokens(self, window: Tensor) -> Tensor:
        """(B, 5, L, D_v) -> (B, L, 5, D_proj): per-token slice sequences,
        layer-normed after the down-projection, then position-embedded."""
        if window.shape[1] != self.config.window:
            raise NumericError(f"expected a {self.config.window}-slice window")
        x = N.transpose(window, (0, 2, 1, 3))
        x = self.ln_in(N.matmul(x, self.w_in))
        return N.add(x, self.e_pos)

    def temporal_attend(self, projected: Tensor, training: bool = False,
                        rng: np.random.Generator | None = None) -> Tensor:
        """Attend across the slice axis per token; return center tokens in D_v."""
        x = projected
        for layer in self.temporal_layers:
            x = layer(x, training=training, rng=rng)
        center = x[:, :, CENTER, :]
        return N.matmul(center, self.w_out)

    def spatial_refine(self, center_tokens: Tensor) -> Tensor:
        """One within-slice attention layer over the L token positions."""
        return self.spatial(center_tokens)

    def gate_fuse(self, h_temporal: Tensor, h_single: Tensor,
                  clamp_zero: bool = False) -> tuple[Tensor, Tensor, Tensor]:
        """h_center = g * h_temporal + (1 - g) * h_single with a per-token
        scalar gate g = sigmoid(h_temporal @ W_g + b_g) broadcast over
        channels. Returns (h_center, g, penalty)."""
        if h_temporal.shape != h_single.shape:
            raise NumericError("gate inputs must have matching shapes")
        if clamp_zero:
            g = Tensor(np.zeros(h_temporal.shape[:-1] + (1,), dtype=h_temporal.dtype))
            penalty = Tensor(np.zeros((), dtype=h_temporal.dtype))
            return h_single, g, penalty
        g = N.sigmoid(N.add(N.matmul(h_temporal, self.w_g), self.b_g))
        h_center = N.add(N.mul(g, h_temporal), N.mul(N.add(N.mul(g, -1.0), 1.0), h_single))
        penalty = N.reduce_mean(N.mul(g, N.add(N.mul(g, -1.0), 1.0)))
        return h_center, g, penalty


class TemporalModel(BaselineModel):
    """Backbone plus adapter. With the gate clamped to zero this collapses
    exactly to the baseline's single-slice path on the center slice."""

    kind = "temporal"

    def __init__(self, config: ModelConfig, seed: int):
        super().__init__(config, seed)
        self.adapter = TemporalAdapter(self.store, config, module_rng(seed, "adapter"))
        self.gate_clamp_zero = False

    def forward_batch(self, stacks, class_ids, training: bool = False,
                      rng: np.random.Generator | None = None):
        """(B, 5, H, W) stacks + (B,) class ids -> (logits, gate, penalty).

        The five window offsets are encoded as five same-shaped encoder
        calls so center-slice tokens are bit-identical to a baseline
        encode of the same slices.
        """
        x = stacks if isinstance(stacks, Tensor) else self._as_input(stacks)
        if x.ndim != 4 or x.shape[1] != self.config.window:
            raise NumericError(f"expected (B, {self.config.window}, H, W) stacks, got {x.shape}")
        per_offset = [self.encode(x[:, j]) for j in range(self.config.window)]
        h_single = per_offset[CENTER]
        window = N.stack(per_offset, axis=1)
        h = self.adapter.project_tokens(window)
        h = self.adapter.temporal_attend(h, training=training, rng=rng)
        h = self.adapter.spatial_refine(h)
        h_center, g, penalty = self.adapter.gate_fuse(
            h, h_single, clamp_zero=self.gate_clamp_zero)
        logits = self.decode(h_center, self.prompt_vectors(class_ids))
        return logits, g, penalty

    def forward_temporal(self, stack, training: bool = False,
                         rng: np.random.Generator | None = None):
        """Single-sample surface: a ContextStack in, (MaskLogits, GateDiagnostics) out."""
        slices = np.stack([np.asarray(s) for s in stack.slices])
        cid = self.prompt_table.class_id(stack.class_name)
        logits, g, penalty = self.forward_batch(
            slices[None], np.array([cid]), training=training, rng=rng)
        diag = GateDiagnostics(g=np.asarray(g.data[0]), penalty=float(penalty.data))
        return (MaskLogits(logits=logits[0], slice_index=stack.center_z,
                           class_name=stack.class_name), diag)

    def window_tokens(self, stack) -> WindowTokens:
        """Encoder tokens for one ContextStack, offset-by-offset."""
        slices = np.stack([np.asarray(s) for s in stack.slices])
        per_offset = [self.encode(slices[j][None])[0] for j in range(self.config.window)]
        return WindowTokens(tokens=N.stack(per_offset, axis=0),
                            slice_indices=tuple(stack.slice_indices))


def adapter_parameter_count(config: ModelConfig) -> int:
    """Closed-form adapter size; guards against silently dropped layers."""
    d_v, d_p, w = config.d_v, config.d_proj, config.window

    def layer(dim):
        attn = 4 * dim * dim + 3 * dim  # q/v/out biases; key bias would be inert
        mlp = dim * 4 * dim + 4 * dim + 4 * dim * dim + dim
        return attn + mlp + 2 * (2 * dim)

    return (d_v * d_p + 2 * d_p + w * d_p
            + config.temporal_depth * layer(d_p)
            + d_p * d_v + layer(d_v) + d_v + 1)
