"""Bag-of-local-features encoder for binary tamper classification.

An image is cut into non-overlapping patches, each patch is projected to
an embedding (a shared per-patch linear map, equivalent to a convolution
with kernel = stride = patch size), a learned class token is prepended
and learned position embeddings added. A stack of pre-norm encoder
blocks (multi-head self-attention + MLP, each with a residual
connection) mixes patch information; the classifier reads only the
class-token row. Per-head attention matrices are recorded so the
decision can be attributed back to patches via attention rollout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .tensor import (
    DTYPE,
    Tensor,
    ShapeMismatch,
    concat,
    dropout,
    gelu,
    layer_norm,
    matmul,
    narrow,
    reshape,
    softmax_rows,
    transpose,
)


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and width hyperparameters; all shapes derive from these."""

    height: int = 32
    width: int = 32
    channels: int = 1
    patch_size: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.1
    num_classes: int = 2

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(
                f"patch size {self.patch_size} must tile {self.height}x{self.width} exactly")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must split evenly over {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("height", "width", "channels", "patch_size", "dim", "depth",
                     "heads", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def grid_rows(self) -> int:
        return self.height // self.patch_size

    @property
    def grid_cols(self) -> int:
        return self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def patch_len(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class PatchBag:
    """The patch matrix plus the grid geometry needed to invert it."""

    patches: Tensor  # (num_patches, patch_len), row-major over the grid
    grid_rows: int
    grid_cols: int
    patch_size: int
    channels: int


def patchify(image, config: ModelConfig) -> PatchBag:
    """Cut an image into non-overlapping patch_size tiles, row-major.

    Each bag row is the row-major flattening of one tile
    (rows, then columns, then channels).
    """
    pixels = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    expect = (config.height, config.width, config.channels)
    if pixels.shape != expect:
        raise ShapeMismatch(f"patchify: image shape {pixels.shape} != configured {expect}")
    p = config.patch_size
    gh, gw = config.grid_rows, config.grid_cols
    tiles = (pixels.reshape(gh, p, gw, p, config.channels)
             .transpose(0, 2, 1, 3, 4)
             .reshape(config.num_patches, config.patch_len))
    return PatchBag(Tensor(tiles.copy()), gh, gw, p, config.channels)


def unpatchify(bag: PatchBag) -> np.ndarray:
    """Exact inverse of patchify (bit-for-bit roundtrip)."""
    p, c = bag.patch_size, bag.channels
    gh, gw = bag.grid_rows, bag.grid_cols
    tiles = bag.patches.data.reshape(gh, gw, p, p, c)
    return tiles.transpose(0, 2, 1, 3, 4).reshape(gh * p, gw * p, c).copy()


@dataclass
class LayerParams:
    """Parameters of one encoder block."""

    ln1_gamma: Tensor
    ln1_beta: Tensor
    wq: Tensor  # (dim, dim), all heads packed along columns
    wk: Tensor
    wv: Tensor
    wo: Tensor  # (dim, dim) projection of the concatenated head outputs
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor  # (dim, mlp_ratio * dim)
    mlp_b1: Tensor
    mlp_w2: Tensor  # (mlp_ratio * dim, dim)
    mlp_b2: Tensor


@dataclass
class ModelParams:
    """All trainable tensors; shapes are a pure function of the config."""

    patch_w: Tensor  # (patch_len, dim)
    patch_b: Tensor  # (dim,)
    cls_token: Tensor  # (1, dim)
    pos_embed: Tensor  # (num_patches + 1, dim)
    layers: list[LayerParams]
    ln_f_gamma: Tensor
    ln_f_beta: Tensor
    fc_w: Tensor  # (dim, num_classes)
    fc_b: Tensor  # (num_classes,)

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("patch_w", self.patch_w), ("patch_b", self.patch_b),
               ("cls_token", self.cls_token), ("pos_embed", self.pos_embed)]
        for i, layer in enumerate(self.layers):
            for f in fields(LayerParams):
                out.append((f"layer{i}.{f.name}", getattr(layer, f.name)))
        out += [("ln_f_gamma", self.ln_f_gamma), ("ln_f_beta", self.ln_f_beta),
                ("fc_w", self.fc_w), ("fc_b", self.fc_b)]
        return out

    def tensors(self) -> Iterator[Tensor]:
        for _, t in self.named():
            yield t

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors())

    def with_tensor(self, name: str, tensor: Tensor) -> "ModelParams":
        """Copy of the params with one named tensor swapped out."""
        mapping = dict(self.named())
        if name not in mapping:
            raise KeyError(f"unknown parameter {name!r}")
        mapping[name] = tensor
        return _params_from_mapping(mapping, len(self.layers))

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray],
                    requires_grad: bool = True) -> "ModelParams":
        """Rebuild params from a name -> array mapping, validating shapes."""
        expected = {name: t.shape for name, t in
                    init_params(config, seed=0, requires_grad=False).named()}
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing {missing}, unexpected {extra}")
        mapping = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != expected {shape}")
            mapping[name] = Tensor(arr, requires_grad=requires_grad)
        return _params_from_mapping(mapping, config.depth)


def _params_from_mapping(mapping: dict[str, Tensor], depth: int) -> ModelParams:
    layers = []
    for i in range(depth):
        layers.append(LayerParams(**{
            f.name: mapping[f"layer{i}.{f.name}"] for f in fields(LayerParams)}))
    return ModelParams(
        patch_w=mapping["patch_w"], patch_b=mapping["patch_b"],
        cls_token=mapping["cls_token"], pos_embed=mapping["pos_embed"],
        layers=layers,
        ln_f_gamma=mapping["ln_f_gamma"], ln_f_beta=mapping["ln_f_beta"],
        fc_w=mapping["fc_w"], fc_b=mapping["fc_b"])


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...],
                  std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


def init_params(config: ModelConfig, seed: int, scheme: str = "trunc_normal",
                requires_grad: bool = True) -> ModelParams:
    """Deterministic initialization for a fixed seed.

    trunc_normal: weight matrices and the class token from a truncated
    normal (std 0.02), biases and position embeddings zero, layer-norm
    gamma 1 / beta 0. ``zeros`` zeroes everything except layer-norm gamma
    (useful for wiring tests).
    """
    if scheme not in ("trunc_normal", "zeros"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    def weight(*shape):
        if scheme == "zeros":
            return Tensor(np.zeros(shape), requires_grad)
        return Tensor(_trunc_normal(rng, shape), requires_grad)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad)

    d, hidden = config.dim, config.mlp_ratio * config.dim
    layers = []
    for _ in range(config.depth):
        layers.append(LayerParams(
            ln1_gamma=ones(d), ln1_beta=zeros(d),
            wq=weight(d, d), wk=weight(d, d), wv=weight(d, d), wo=weight(d, d),
            ln2_gamma=ones(d), ln2_beta=zeros(d),
            mlp_w1=weight(d, hidden), mlp_b1=zeros(hidden),
            mlp_w2=weight(hidden, d), mlp_b2=zeros(d)))
    return ModelParams(
        patch_w=weight(config.patch_len, d),
        patch_b=zeros(d),
        cls_token=weight(1, d),
        pos_embed=zeros(config.num_patches + 1, d),
        layers=layers,
        ln_f_gamma=ones(d), ln_f_beta=zeros(d),
        fc_w=weight(d, config.num_classes), fc_b=zeros(config.num_classes))


def embed_patches(bag: PatchBag, params: ModelParams) -> Tensor:
    """Project each patch to the embedding width, prepend the class token,
    and add position embeddings. Row 0 is the class-token slot."""
    projected = matmul(bag.patches, params.patch_w) + params.patch_b
    return concat([params.cls_token, projected], axis=0) + params.pos_embed


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """One attention head: softmax(q k^T / sqrt(head_dim)) v.

    Returns the attended values and the row-stochastic attention matrix.
    """
    head_dim = q.shape[1]
    logits = matmul(q, transpose(k)) * (1.0 / math.sqrt(head_dim))
    attn = softmax_rows(logits)
    return matmul(attn, v), attn


def multi_head_attention(z: Tensor, layer: LayerParams,
                         heads: int) -> tuple[Tensor, list[Tensor]]:
    """Run the heads in parallel on disjoint column slices of the packed
    q/k/v projections, concatenate their outputs, and project by wo."""
    dim = z.shape[1]
    head_dim = dim // heads
    q = matmul(z, layer.wq)
    k = matmul(z, layer.wk)
    v = matmul(z, layer.wv)
    outs, attns = [], []
    for h in range(heads):
        lo = h * head_dim
        out, attn = scaled_dot_attention(
            narrow(q, 1, lo, head_dim),
            narrow(k, 1, lo, head_dim),
            narrow(v, 1, lo, head_dim))
        outs.append(out)
        attns.append(attn)
    return matmul(concat(outs, axis=1), layer.wo), attns


def encoder_block(z: Tensor, layer: LayerParams, config: ModelConfig,
                  train: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, list[Tensor]]:
    """Pre-norm block: attention then MLP, each wrapped in a residual.

    The MLP is linear -> GELU -> dropout -> linear; dropout only acts in
    train mode.
    """
    attended, attns = multi_head_attention(
        layer_norm(z, layer.ln1_gamma, layer.ln1_beta), layer, config.heads)
    z = attended + z
    h = matmul(layer_norm(z, layer.ln2_gamma, layer.ln2_beta), layer.mlp_w1) + layer.mlp_b1
    h = dropout(gelu(h), config.dropout, rng, training=train)
    return (matmul(h, layer.mlp_w2) + layer.mlp_b2) + z, attns


@dataclass
class AttentionRecord:
    """Per-layer, per-head row-stochastic attention matrices."""

    layers: list[list[np.ndarray]]  # [depth][heads], each (tokens, tokens)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def heads(self) -> int:
        return len(self.layers[0]) if self.layers else 0


def forward(image, params: ModelParams, config: ModelConfig,
            train: bool = False,
            rng: np.random.Generator | None = None) -> tuple[Tensor, AttentionRecord]:
    """Full pass: standardize, patchify, embed, encoder stack, final layer
    norm, then a fully-connected classifier on the class-token row only.

    Pixels arrive in [0, 1] and are mapped to [-1, 1] first (the usual
    mean-0.5/std-0.5 image normalization); without it the shared DC level
    of every patch dwarfs the content the encoder should attend to.

    Eval mode (train=False) is a pure function of image and params.
    """
    if train and config.dropout > 0.0 and rng is None:
        raise ValueError("train-mode forward needs an rng when dropout > 0")
    image = (np.asarray(image, dtype=DTYPE) - 0.5) / 0.5
    z = embed_patches(patchify(image, config), params)
    recorded: list[list[np.ndarray]] = []
    for layer in params.layers:
        z, attns = encoder_block(z, layer, config, train=train, rng=rng)
        recorded.append([a.data.copy() for a in attns])
    z = layer_norm(z, params.ln_f_gamma, params.ln_f_beta)
    cls_row = narrow(z, 0, 0, 1)
    logits = reshape(matmul(cls_row, params.fc_w) + params.fc_b, (config.num_classes,))
    return logits, AttentionRecord(recorded)


def attention_rollout(record: AttentionRecord) -> np.ndarray:
    """Attribute the class-token decision to patches across the stack.

    Per layer: average the heads, then mix with the identity
    (0.5 A + 0.5 I, row-renormalized) to account for the residual path.
    The adjusted matrices are multiplied last-layer-first; the heatmap is
    the class-token row restricted to the patch columns, renormalized to
    sum to 1.
    """
    if not record.layers:
        raise ValueError("attention rollout needs at least one recorded layer")
    rollout = None
    for heads in record.layers:
        avg = np.mean(heads, axis=0)
        mixed = 0.5 * avg + 0.5 * np.eye(avg.shape[0])
        mixed = mixed / mixed.sum(axis=1, keepdims=True)
        rollout = mixed if rollout is None else mixed @ rollout
    weights = rollout[0, 1:]
    total = weights.sum()
    if total <= 0.0:
        # cannot happen for row-stochastic inputs; guard anyway
        return np.full_like(weights, 1.0 / weights.size)
    return weights / total


def heatmap_to_image(weights: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Spread per-patch rollout weights over pixels: each patch's weight
    fills its tile (nearest-neighbor upsampling at patch granularity)."""
    if weights.shape != (config.num_patches,):
        raise ShapeMismatch(
            f"heatmap weights shape {weights.shape} != ({config.num_patches},)")
    grid = weights.reshape(config.grid_rows, config.grid_cols)
    return np.kron(grid, np.ones((config.patch_size, config.patch_size)))


def heatmap_mask_mass(weights: np.ndarray, mask: np.ndarray,
                      config: ModelConfig) -> float:
    """Fraction of total rollout mass falling inside a pixel mask."""
    pixel_map = heatmap_to_image(weights, config)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pixel_map.shape:
        raise ShapeMismatch(f"mask shape {mask.shape} != image {pixel_map.shape}")
    total = pixel_map.sum()
    # weights sum to 1 and every tile has positive area, so total > 0
    return float(pixel_map[mask].sum() / total)
