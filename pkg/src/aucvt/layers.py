"""Parameterized building blocks: linear, MHSA, Conv-FFN, patch merging, CNN stem.

Each block comes as a pair of functions: `init_*` registers its
parameters in a `ParamStore` under a dot-separated prefix, and the
forward function reads them back. Blocks are pure functions of
(input, params); nothing here holds state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass(frozen=True)
class StemConfig:
    """Strided-conv embedding stem; downsample factor is 2**len(widths)."""

    widths: tuple = (16, 32, 64)
    in_channels: int = 3

    @property
    def downsample(self) -> int:
        return 2 ** len(self.widths)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]


class ParamStore:
    """Named map from dot-separated parameter paths to trainable tensors.

    One RNG seeded with `init_seed` serves every initializer, in
    registration order, so the same seed always yields bit-identical
    parameters.
    """

    def __init__(self, init_seed: int):
        self.init_seed = int(init_seed)
        self.tensors: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(self.init_seed)

    @property
    def rng(self) -> np.random.Generator:
        return self._rng

    def add(self, path: str, array: np.ndarray) -> Tensor:
        if path in self.tensors:
            raise ConfigError(f"duplicate parameter path: {path}")
        t = Tensor(array, requires_grad=True)
        self.tensors[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self.tensors[path]
        except KeyError:
            raise KeyError(f"unknown parameter path: {path}") from None

    def __contains__(self, path: str) -> bool:
        return path in self.tensors

    def items(self):
        return sorted(self.tensors.items())

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def ensure_grads(self):
        """Fill missing grads with zeros (params untouched by the loss)."""
        for t in self.tensors.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())


# ---------------------------------------------------------------------------
# initializers


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std, element-wise."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# linear


def init_linear(store: ParamStore, prefix: str, d_in: int, d_out: int, std: float = 0.02):
    store.add(f"{prefix}.weight", trunc_normal(store.rng, (d_in, d_out), std))
    store.add(f"{prefix}.bias", np.zeros(d_out))


def linear(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    w = store[f"{prefix}.weight"]
    b = store[f"{prefix}.bias"]
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear {prefix}: input {x.shape} incompatible with weight {w.shape}")
    return T.add(T.matmul(x, w), b)


# ---------------------------------------------------------------------------
# multi-head self-attention


def init_mhsa(store: ParamStore, prefix: str, cfg: AttentionConfig):
    for name in ("q", "k", "v", "out"):
        init_linear(store, f"{prefix}.{name}", cfg.dim, cfg.dim)


def mhsa(tokens: Tensor, cfg: AttentionConfig, store: ParamStore, prefix: str) -> Tensor:
    """softmax(QK^T / sqrt(head_dim)) V per head, concatenated, projected.

    No mask and no class token; every token attends to every token.
    """
    if tokens.data.ndim != 2 or tokens.data.shape[1] != cfg.dim:
        raise ShapeError(f"mhsa: tokens {tokens.shape} incompatible with dim {cfg.dim}")
    q = linear(tokens, store, f"{prefix}.q")
    k = linear(tokens, store, f"{prefix}.k")
    v = linear(tokens, store, f"{prefix}.v")
    hd = cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    heads = []
    for h in range(cfg.heads):
        sl = (slice(None), slice(h * hd, (h + 1) * hd))
        qh, kh, vh = q[sl], k[sl], v[sl]
        attn = T.softmax(T.matmul(qh, T.transpose2d(kh)) * scale, axis=-1)
        heads.append(T.matmul(attn, vh))
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
    return linear(merged, store, f"{prefix}.out")


def attention_weights(tokens: Tensor, cfg: AttentionConfig, store: ParamStore, prefix: str) -> list:
    """The per-head attention matrices, for inspection/tests only."""
    with T.no_grad():
        q = linear(tokens, store, f"{prefix}.q")
        k = linear(tokens, store, f"{prefix}.k")
        hd = cfg.head_dim
        scale = 1.0 / math.sqrt(hd)
        out = []
        for h in range(cfg.heads):
            sl = (slice(None), slice(h * hd, (h + 1) * hd))
            out.append(T.softmax(T.matmul(q[sl], T.transpose2d(k[sl])) * scale, axis=-1).data)
    return out


# ---------------------------------------------------------------------------
# Conv-FFN


def init_conv_ffn(store: ParamStore, prefix: str, dim: int, expansion: int):
    hidden = dim * expansion
    init_linear(store, f"{prefix}.expand", dim, hidden)
    store.add(f"{prefix}.dw", kaiming_uniform(store.rng, (hidden, 3, 3), fan_in=9))
    init_linear(store, f"{prefix}.restore", hidden, dim)


def conv_ffn(tokens: Tensor, grid, expansion: int, store: ParamStore, prefix: str) -> Tensor:
    """Expand channels, depthwise-3x3 over the token lattice, GELU, restore."""
    h, w = grid
    n, d = tokens.data.shape
    if n != h * w:
        raise ShapeError(f"conv_ffn: {n} tokens do not fill a {h}x{w} grid")
    hidden = d * expansion
    x = linear(tokens, store, f"{prefix}.expand")
    fmap = T.permute(T.reshape(x, (h, w, hidden)), (2, 0, 1))
    fmap = T.depthwise_conv2d(fmap, store[f"{prefix}.dw"], pad=1)
    fmap = T.gelu(fmap)
    x = T.reshape(T.permute(fmap, (1, 2, 0)), (n, hidden))
    return linear(x, store, f"{prefix}.restore")


# ---------------------------------------------------------------------------
# patch merging


def init_patch_merge(store: ParamStore, prefix: str, dim: int):
    init_linear(store, f"{prefix}.proj", 4 * dim, 2 * dim)


def patch_merge(tokens: Tensor, grid, store: ParamStore, prefix: str):
    """Concatenate each 2x2 token neighborhood (tl, tr, bl, br) and project 4C -> 2C.

    Returns (merged tokens [N/4 x 2C], new grid (h/2, w/2)).
    """
    h, w = grid
    n, c = tokens.data.shape
    if n != h * w:
        raise ShapeError(f"patch_merge: {n} tokens do not fill a {h}x{w} grid")
    if h % 2 or w % 2:
        raise ShapeError(f"patch_merge: grid {h}x{w} has odd extent")
    x3 = T.reshape(tokens, (h, w, c))
    tl = x3[0::2, 0::2, :]
    tr = x3[0::2, 1::2, :]
    bl = x3[1::2, 0::2, :]
    br = x3[1::2, 1::2, :]
    merged = T.concat([tl, tr, bl, br], axis=2)
    merged = T.reshape(merged, (n // 4, 4 * c))
    return linear(merged, store, f"{prefix}.proj"), (h // 2, w // 2)


# ---------------------------------------------------------------------------
# transformer block (pre-norm residual)


def init_transformer_block(store: ParamStore, prefix: str, cfg: AttentionConfig, expansion: int):
    store.add(f"{prefix}.ln1.gamma", np.ones(cfg.dim))
    store.add(f"{prefix}.ln1.beta", np.zeros(cfg.dim))
    init_mhsa(store, f"{prefix}.attn", cfg)
    store.add(f"{prefix}.ln2.gamma", np.ones(cfg.dim))
    store.add(f"{prefix}.ln2.beta", np.zeros(cfg.dim))
    init_conv_ffn(store, f"{prefix}.ffn", cfg.dim, expansion)


def transformer_block(
    tokens: Tensor,
    grid,
    cfg: AttentionConfig,
    expansion: int,
    store: ParamStore,
    prefix: str,
    eps: float = 1e-5,
) -> Tensor:
    x = tokens
    normed = T.layernorm(x, store[f"{prefix}.ln1.gamma"], store[f"{prefix}.ln1.beta"], eps)
    x = T.add(x, mhsa(normed, cfg, store, f"{prefix}.attn"))
    normed = T.layernorm(x, store[f"{prefix}.ln2.gamma"], store[f"{prefix}.ln2.beta"], eps)
    return T.add(x, conv_ffn(normed, grid, expansion, store, f"{prefix}.ffn"))


# ---------------------------------------------------------------------------
# CNN stem


def init_cnn_stem(store: ParamStore, prefix: str, stem: StemConfig):
    cin = stem.in_channels
    for i, cout in enumerate(stem.widths):
        store.add(f"{prefix}.conv{i}", kaiming_uniform(store.rng, (cout, cin, 3, 3), fan_in=cin * 9))
        store.add(f"{prefix}.bias{i}", np.zeros(cout))
        cin = cout


def cnn_stem(image: Tensor, stem: StemConfig, store: ParamStore, prefix: str) -> Tensor:
    """Stack of stride-2 3x3 conv + ReLU stages; total downsample 2**len(widths)."""
    if image.data.ndim != 3 or image.data.shape[0] != stem.in_channels:
        raise ShapeError(f"cnn_stem: expected [{stem.in_channels},H,W], got {image.shape}")
    _, h, w = image.data.shape
    r = stem.downsample
    if h % r or w % r:
        raise ShapeError(f"cnn_stem: input {h}x{w} not divisible by downsample {r}")
    x = image
    for i in range(len(stem.widths)):
        x = T.conv2d(x, store[f"{prefix}.conv{i}"], stride=2, pad=1)
        bias = store[f"{prefix}.bias{i}"]
        x = T.add(x, T.reshape(bias, (bias.size, 1, 1)))
        x = T.relu(x)
    return x
