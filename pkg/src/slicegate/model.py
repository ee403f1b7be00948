"""Single-slice backbone: patch-token encoder, prompt table, mask decoder.

The baseline path is encode -> prompt-conditioned decode on one slice; the
temporal model subclasses this backbone and inserts its adapter between
the two (see slicegate.adapter). All forward code is batched with axis 0
as the sample axis; the *_slice/*_single methods are thin single-sample
wrappers so the two routes stay bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import slicegate.numerics as N
from slicegate.errors import ConfigError, NumericError, UnknownClassError
from slicegate.numerics import LayerNorm, ParamStore, Tensor, TransformerLayer, trunc_normal, xavier

BLANK_PROMPT = ""

_RNG_SALT = {"encoder": 0, "prompt": 1, "decoder": 2, "adapter": 3}


def module_rng(seed: int, module: str) -> np.random.Generator:
    """Per-module init stream, so the backbone init is identical across
    model kinds regardless of whether an adapter is also initialized."""
    return np.random.default_rng(np.random.SeedSequence([seed, _RNG_SALT[module]]))


@dataclass(frozen=True)
class ModelConfig:
    slice_hw: int = 64
    patch: int = 8
    d_v: int = 96
    d_p: int = 96
    d_proj: int = 32
    heads: int = 4
    encoder_depth: int = 2
    decoder_depth: int = 2
    temporal_depth: int = 4
    drop_path_max: float = 0.1
    window: int = 5
    class_names: tuple[str, ...] = ("blob", "pair_l", "pair_r", "lens", "ribbon")
    dtype: str = "float32"

    def __post_init__(self):
        if self.slice_hw % self.patch != 0:
            raise ConfigError("slice size must be divisible by patch size")
        for width in (self.d_v, self.d_proj):
            if width % self.heads != 0:
                raise ConfigError(f"width {width} not divisible by {self.heads} heads")
        if BLANK_PROMPT in self.class_names:
            raise ConfigError("the empty string is reserved for the blank prompt")

    @property
    def grid(self) -> int:
        return self.slice_hw // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class TokenGrid:
    """L patch tokens for one slice; the currency between encoder, adapter
    and decoder."""

    tokens: Tensor
    grid_hw: tuple[int, int]
    slice_index: int = 0


@dataclass
class PromptEmbedding:
    class_name: str
    vector: Tensor


@dataclass
class MaskLogits:
    logits: Tensor
    slice_index: int = 0
    class_name: str = ""

    def probabilities(self) -> np.ndarray:
        x = self.logits.data
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


class SliceEncoder:
    """Patch embedding + learned 2D position table + pre-norm transformer."""

    def __init__(self, store: ParamStore, config: ModelConfig, rng: np.random.Generator):
        p, d = config.patch, config.d_v
        self.config = config
        self.patch_w = store.add("encoder.patch.w", xavier(rng, p * p, d))
        self.patch_b = store.add("encoder.patch.b", np.zeros(d))
        self.pos = store.add("encoder.pos", trunc_normal(rng, (config.tokens, d)))
        self.layers = [
            TransformerLayer(store, f"encoder.layer{i}", d, config.heads, rng)
            for i in range(config.encoder_depth)
        ]
        self.norm = LayerNorm(store, "encoder.norm", d)

    def __call__(self, slices: Tensor) -> Tensor:
        """(B, H, W) intensities in [0, 255] -> (B, L, D_v) tokens."""
        x = _patchify(slices, self.config.patch)
        x = N.add(N.mul(x, 1.0 / 127.5), -1.0)
        x = N.add(N.matmul(x, self.patch_w), self.patch_b)
        x = N.add(x, self.pos)
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


class PromptTable:
    """Learned embedding per class name plus one reserved blank row.

    Stands in for a text encoder: deterministic lookup from name to a
    D_p vector, with the blank row backing empty-prompt ablations.
    """

    def __init__(self, store: ParamStore, config: ModelConfig, rng: np.random.Generator):
        self.class_names = config.class_names
        self.index = {name: i for i, name in enumerate(config.class_names)}
        self.blank_index = len(config.class_names)
        rows = len(config.class_names) + 1
        self.table = store.add("prompt.table", trunc_normal(rng, (rows, config.d_p), std=1.0))

    def class_id(self, class_name: str) -> int:
        if class_name == BLANK_PROMPT:
            return self.blank_index
        try:
            return self.index[class_name]
        except KeyError:
            raise UnknownClassError(
                f"unknown class name {class_name!r}; vocabulary: {list(self.class_names)}"
            ) from None

    def rows(self, class_ids: np.ndarray) -> Tensor:
        return N.embedding_rows(self.table, np.asarray(class_ids))


class MaskDecoder:
    """Prompt conditions tokens via learned per-channel scale-and-shift,
    then pre-norm transformer layers and a per-token patch logit head."""

    def __init__(self, store: ParamStore, config: ModelConfig, rng: np.random.Generator):
        d, p = config.d_v, config.patch
        self.config = config
        self.film_w = store.add("decoder.film.w", xavier(rng, config.d_p, 2 * d))
        self.film_b = store.add("decoder.film.b", np.zeros(2 * d))
        self.layers = [
            TransformerLayer(store, f"decoder.layer{i}", d, config.heads, rng)
            for i in range(config.decoder_depth)
        ]
        self.norm = LayerNorm(store, "decoder.norm", d)
        self.head_w = store.add("decoder.head.w", xavier(rng, d, p * p))
        # Start biased toward background; foreground is the rare label.
        self.head_b = store.add("decoder.head.b", np.full(p * p, -2.0))

    def __call__(self, tokens: Tensor, prompts: Tensor) -> Tensor:
        """tokens (B, L, D_v), prompts (B, D_p) -> logits (B, H, W)."""
        if tokens.shape[-1] != self.config.d_v:
            raise NumericError(
                f"decoder expects token width {self.config.d_v}, got {tokens.shape[-1]}")
        d = self.config.d_v
        film = N.add(N.matmul(prompts, self.film_w), self.film_b)
        scale = N.reshape(film[:, :d], (film.shape[0], 1, d))
        shift = N.reshape(film[:, d:], (film.shape[0], 1, d))
        x = N.add(N.mul(tokens, N.add(scale, 1.0)), shift)
        for layer in self.layers:
            x = layer(x)
        x = self.norm(x)
        patch_logits = N.add(N.matmul(x, self.head_w), self.head_b)
        return _unpatchify(patch_logits, self.config.grid, self.config.patch)


class BaselineModel:
    """Encoder + prompt table + decoder, applied slice-by-slice."""

    kind = "baseline"

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        self.store = ParamStore(dtype=config.np_dtype)
        self.encoder = SliceEncoder(self.store, config, module_rng(seed, "encoder"))
        self.prompt_table = PromptTable(self.store, config, module_rng(seed, "prompt"))
        self.decoder = MaskDecoder(self.store, config, module_rng(seed, "decoder"))

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.tensors

    def _as_input(self, array) -> Tensor:
        return Tensor(np.ascontiguousarray(array, dtype=self.config.np_dtype))

    def encode(self, slices) -> Tensor:
        """(B, H, W) array -> (B, L, D_v) token tensor."""
        x = slices if isinstance(slices, Tensor) else self._as_input(slices)
        hw = self.config.slice_hw
        if x.shape[-2:] != (hw, hw):
            raise NumericError(f"expected {hw}x{hw} slices, got {x.shape[-2:]}")
        return self.encoder(x)

    def prompt_vectors(self, class_ids) -> Tensor:
        return self.prompt_table.rows(class_ids)

    def decode(self, tokens: Tensor, prompts: Tensor) -> Tensor:
        return self.decoder(tokens, prompts)

    def forward_batch(self, slices, class_ids) -> Tensor:
        """Baseline forward: (B, H, W) + (B,) class ids -> (B, H, W) logits."""
        return self.decode(self.encode(slices), self.prompt_vectors(class_ids))

    # Single-sample spec surfaces ------------------------------------------------

    def encode_slice(self, slice2d, slice_index: int = 0) -> TokenGrid:
        tokens = self.encode(np.asarray(slice2d)[None])
        return TokenGrid(tokens=tokens[0], grid_hw=(self.config.grid, self.config.grid),
                         slice_index=slice_index)

    def embed_prompt(self, class_name: str) -> PromptEmbedding:
        cid = self.prompt_table.class_id(class_name)
        return PromptEmbedding(class_name=class_name,
                               vector=self.prompt_table.rows(np.array([cid]))[0])

    def decode_mask(self, grid: TokenGrid, prompt: PromptEmbedding) -> MaskLogits:
        tokens = N.reshape(grid.tokens, (1,) + grid.tokens.shape)
        vec = N.reshape(prompt.vector, (1,) + prompt.vector.shape)
        logits = self.decode(tokens, vec)
        return MaskLogits(logits=logits[0], slice_index=grid.slice_index,
                          class_name=prompt.class_name)

    def forward_single(self, slice2d, class_name: str, slice_index: int = 0) -> MaskLogits:
        return self.decode_mask(self.encode_slice(slice2d, slice_index),
                                self.embed_prompt(class_name))


def _patchify(x: Tensor, patch: int) -> Tensor:
    b, h, w = x.shape
    g = h // patch
    x = N.reshape(x, (b, g, patch, g, patch))
    x = N.transpose(x, (0, 1, 3, 2, 4))
    return N.reshape(x, (b, g * g, patch * patch))


def _unpatchify(x: Tensor, grid: int, patch: int) -> Tensor:
    b = x.shape[0]
    x = N.reshape(x, (b, grid, grid, patch, patch))
    x = N.transpose(x, (0, 1, 3, 2, 4))
    return N.reshape(x, (b, grid * patch, grid * patch))
