"""The dual-branch emotion/AU network.

Wiring: CNN stem -> 1x1-patch linear projection + learnable positional
embedding -> transformer stage 1 -> (patch merge -> stage k)* ->
patch-flatten FC emotion head. The AU branch taps the stage-1 tokens:
Seq2Img, seven overlapping facial-region average pools, one linear head
per region, and a symmetric maxout over mirrored regions, producing 21
logits in ascending AU-id order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, GeometryError, ShapeError
from .layers import (
    AttentionConfig,
    ParamStore,
    StemConfig,
    cnn_stem,
    init_cnn_stem,
    init_linear,
    init_patch_merge,
    init_transformer_block,
    linear,
    patch_merge,
    transformer_block,
    trunc_normal,
)
from .tensor import Tensor

CANONICAL_AU_IDS = (1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 16, 17, 18, 20, 22, 23, 24, 25, 26, 27)
AU_INDEX = {au: i for i, au in enumerate(CANONICAL_AU_IDS)}

EXPRESSIONS = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")

EYE_AUS = (1, 2, 5, 7)
MOUTH_AUS = (10, 12, 14, 15, 16, 17, 18, 20, 22, 23, 24, 25, 26, 27)


@dataclass(frozen=True)
class AUPatchSpec:
    """One named facial region: fractional box (x0,x1,y0,y1) plus its AUs."""

    name: str
    box: tuple
    aus: tuple
    mirror_of: Optional[str] = None

    def __post_init__(self):
        x0, x1, y0, y1 = self.box
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ConfigError(f"patch {self.name}: degenerate box {self.box}")


def default_au_patches() -> tuple:
    return (
        AUPatchSpec("left_eye", (0.00, 0.50, 0.15, 0.50), EYE_AUS),
        AUPatchSpec("right_eye", (0.50, 1.00, 0.15, 0.50), EYE_AUS, mirror_of="left_eye"),
        AUPatchSpec("between_eyebrow", (0.35, 0.65, 0.05, 0.40), (4,)),
        AUPatchSpec("left_cheek", (0.00, 0.45, 0.40, 0.75), (6,)),
        AUPatchSpec("right_cheek", (0.55, 1.00, 0.40, 0.75), (6,), mirror_of="left_cheek"),
        AUPatchSpec("nose", (0.30, 0.70, 0.30, 0.70), (9,)),
        AUPatchSpec("mouth", (0.05, 0.95, 0.50, 1.00), MOUTH_AUS),
    )


def _boxes_overlap(a, b) -> bool:
    ax0, ax1, ay0, ay1 = a
    bx0, bx1, by0, by1 = b
    return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


@dataclass(frozen=True)
class ModelConfig:
    input_h: int = 112
    input_w: int = 112
    downsample: int = 8
    embed_dim: int = 256
    stem_widths: tuple = (16, 32, 64)
    stage_depths: tuple = (2, 2)
    stage_heads: Optional[tuple] = None
    ffn_expansion: int = 4
    num_classes: int = 6
    layernorm_eps: float = 1e-5
    au_patches: tuple = field(default_factory=default_au_patches)

    @property
    def num_stages(self) -> int:
        return len(self.stage_depths)

    @property
    def grid_h(self) -> int:
        return self.input_h // self.downsample

    @property
    def grid_w(self) -> int:
        return self.input_w // self.downsample

    def stage_dim(self, k: int) -> int:
        return (2 ** (k - 1)) * self.embed_dim

    def heads_for_stage(self, k: int) -> int:
        if self.stage_heads is not None:
            return self.stage_heads[k - 1]
        return max(1, self.stage_dim(k) // 64)

    @property
    def stem(self) -> StemConfig:
        return StemConfig(widths=tuple(self.stem_widths))

    def validate(self):
        s = self.num_stages
        if s < 1:
            raise ConfigError("at least one transformer stage is required")
        if self.stage_heads is not None and len(self.stage_heads) != s:
            raise ConfigError("stage_heads length must match stage_depths")
        if self.downsample != 2 ** len(self.stem_widths):
            raise ConfigError(
                f"downsample {self.downsample} inconsistent with {len(self.stem_widths)} stride-2 stem stages"
            )
        if self.input_h % self.downsample or self.input_w % self.downsample:
            raise ConfigError(f"input {self.input_h}x{self.input_w} not divisible by downsample {self.downsample}")
        div = 2 ** (s - 1)
        if self.grid_h % div or self.grid_w % div:
            raise ConfigError(
                f"stem grid {self.grid_h}x{self.grid_w} not divisible by 2^{s - 1}; inter-stage merges need even grids"
            )
        for k in range(1, s + 1):
            if self.stage_dim(k) % self.heads_for_stage(k):
                raise ConfigError(f"stage {k} dim {self.stage_dim(k)} not divisible by its head count")
        self._validate_patches()

    def _validate_patches(self):
        names = [p.name for p in self.au_patches]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate AU patch names")
        by_name = {p.name: p for p in self.au_patches}
        covered = []
        for p in self.au_patches:
            covered.extend(p.aus)
            if p.mirror_of is not None:
                mirror = by_name.get(p.mirror_of)
                if mirror is None:
                    raise ConfigError(f"patch {p.name}: unknown mirror {p.mirror_of}")
                if tuple(mirror.aus) != tuple(p.aus):
                    raise ConfigError(f"mirror pair {p.name}/{p.mirror_of} must share AU lists")
            if not any(_boxes_overlap(p.box, q.box) for q in self.au_patches if q.name != p.name):
                raise ConfigError(f"patch {p.name} overlaps no other patch")
        mirrored = {p.name for p in self.au_patches if p.mirror_of} | {
            p.mirror_of for p in self.au_patches if p.mirror_of
        }
        plain = [au for p in self.au_patches if p.name not in mirrored for au in p.aus]
        mirror_once = {au for p in self.au_patches if p.mirror_of for au in p.aus}
        union = sorted(set(covered))
        if tuple(union) != CANONICAL_AU_IDS:
            raise ConfigError(f"AU patch union {union} != canonical 21 AU ids")
        if len(plain) != len(set(plain)):
            raise ConfigError("an AU is claimed by two non-mirrored patches")
        if set(plain) & mirror_once:
            raise ConfigError("an AU is claimed by both a mirrored and a non-mirrored patch")

    def to_dict(self) -> dict:
        return {
            "input_h": self.input_h,
            "input_w": self.input_w,
            "downsample": self.downsample,
            "embed_dim": self.embed_dim,
            "stem_widths": list(self.stem_widths),
            "stage_depths": list(self.stage_depths),
            "stage_heads": list(self.stage_heads) if self.stage_heads is not None else None,
            "ffn_expansion": self.ffn_expansion,
            "num_classes": self.num_classes,
            "layernorm_eps": self.layernorm_eps,
            "au_patches": [
                {"name": p.name, "box": list(p.box), "aus": list(p.aus), "mirror_of": p.mirror_of}
                for p in self.au_patches
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        if "au_patches" in d and d["au_patches"] is not None:
            d["au_patches"] = tuple(
                AUPatchSpec(p["name"], tuple(p["box"]), tuple(p["aus"]), p.get("mirror_of"))
                for p in d["au_patches"]
            )
        else:
            d.pop("au_patches", None)
        for key in ("stem_widths", "stage_depths", "stage_heads"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return ModelConfig(**d)


def toy_config(**overrides) -> ModelConfig:
    """Small configuration for fast CPU training and tests."""
    base = dict(
        input_h=32,
        input_w=32,
        embed_dim=32,
        stem_widths=(8, 16, 16),
        stage_depths=(1, 1),
        ffn_expansion=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ModelOutput:
    emotion_logits: Tensor  # [B x num_classes]
    au_logits: Tensor  # [B x 21], canonical ascending AU order


def stage_shape(cfg: ModelConfig, k: int):
    """(h, w, dim) of the tokens at the end of stage k, before any next merge."""
    if not 1 <= k <= cfg.num_stages:
        raise ConfigError(f"stage index {k} out of range 1..{cfg.num_stages}")
    f = 2 ** (k - 1)
    return (cfg.grid_h // f, cfg.grid_w // f, cfg.stage_dim(k))


def seq2img(tokens: Tensor, grid) -> Tensor:
    """Inverse of row-major flattening: [N x C] -> [C x h x w]."""
    h, w = grid
    n, c = tokens.data.shape
    if n != h * w:
        raise ShapeError(f"seq2img: {n} tokens do not fill a {h}x{w} grid")
    return T.permute(T.reshape(tokens, (h, w, c)), (2, 0, 1))


def img2seq(fmap: Tensor) -> Tensor:
    """Row-major flattening: [C x h x w] -> [N x C]."""
    c, h, w = fmap.data.shape
    return T.reshape(T.permute(fmap, (1, 2, 0)), (h * w, c))


def rasterize_box(box, h: int, w: int):
    """Fractional box -> half-open cell ranges (r0, r1, c0, c1)."""
    x0, x1, y0, y1 = box
    r0, r1 = int(np.floor(y0 * h)), int(np.ceil(y1 * h))
    c0, c1 = int(np.floor(x0 * w)), int(np.ceil(x1 * w))
    r0, c0 = max(r0, 0), max(c0, 0)
    r1, c1 = min(r1, h), min(c1, w)
    if r1 <= r0 or c1 <= c0:
        raise GeometryError(f"box {box} rasterizes to an empty range on a {h}x{w} grid")
    return r0, r1, c0, c1


def extract_au_patch(fmap: Tensor, spec: AUPatchSpec) -> Tensor:
    """Mean-pool one facial-region box of a [C x h x w] map to a [C] vector."""
    _, h, w = fmap.data.shape
    r0, r1, c0, c1 = rasterize_box(spec.box, h, w)
    return T.mean_axes(fmap[:, r0:r1, c0:c1], axes=(1, 2))


def symmetric_maxout(left: Tensor, right: Tensor) -> Tensor:
    """Element-wise max of mirrored-region logits; ties route gradient left."""
    return T.maximum_left(left, right)


class AuCvt:
    """Built network: configuration plus forward wiring over a ParamStore."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.last_stage_shapes: list = []

    # ------------------------------------------------------------------
    # parameters

    def init_params(self, seed: int) -> ParamStore:
        cfg = self.cfg
        store = ParamStore(seed)
        init_cnn_stem(store, "stem", cfg.stem)
        init_linear(store, "patch_proj", cfg.stem.out_channels, cfg.embed_dim)
        n_tokens = cfg.grid_h * cfg.grid_w
        store.add("pos_embed", trunc_normal(store.rng, (n_tokens, cfg.embed_dim)))
        for k in range(1, cfg.num_stages + 1):
            attn = AttentionConfig(cfg.stage_dim(k), cfg.heads_for_stage(k))
            for b in range(cfg.stage_depths[k - 1]):
                init_transformer_block(store, f"stage{k}.block{b}", attn, cfg.ffn_expansion)
            if k < cfg.num_stages:
                init_patch_merge(store, f"merge{k}", cfg.stage_dim(k))
        hf, wf, df = stage_shape(cfg, cfg.num_stages)
        init_linear(store, "head", hf * wf * df, cfg.num_classes)
        for p in cfg.au_patches:
            init_linear(store, f"au.{p.name}", cfg.embed_dim, len(p.aus))
        return store

    # ------------------------------------------------------------------
    # forward

    def forward(self, images: Tensor, params: ParamStore) -> ModelOutput:
        """images: [B x 3 x H x W] -> per-sample emotion and AU logits."""
        cfg = self.cfg
        if images.data.ndim != 4 or images.data.shape[0] < 1:
            raise ShapeError(f"forward: expected nonempty [B,3,H,W], got {images.shape}")
        if images.data.shape[1:] != (3, cfg.input_h, cfg.input_w):
            raise ShapeError(
                f"forward: sample shape {images.data.shape[1:]} != (3, {cfg.input_h}, {cfg.input_w})"
            )
        emo_rows, au_rows = [], []
        for b in range(images.data.shape[0]):
            emo, au = self._forward_sample(images[b], params)
            emo_rows.append(emo)
            au_rows.append(au)
        return ModelOutput(
            emotion_logits=T.concat(emo_rows, axis=0) if len(emo_rows) > 1 else emo_rows[0],
            au_logits=T.concat(au_rows, axis=0) if len(au_rows) > 1 else au_rows[0],
        )

    def _forward_sample(self, image: Tensor, params: ParamStore):
        cfg = self.cfg
        fmap = cnn_stem(image, cfg.stem, params, "stem")
        tokens = linear(img2seq(fmap), params, "patch_proj")
        tokens = T.add(tokens, params["pos_embed"])
        grid = (cfg.grid_h, cfg.grid_w)
        stage1_tokens = None
        self.last_stage_shapes = []
        for k in range(1, cfg.num_stages + 1):
            attn = AttentionConfig(cfg.stage_dim(k), cfg.heads_for_stage(k))
            for b in range(cfg.stage_depths[k - 1]):
                tokens = transformer_block(
                    tokens, grid, attn, cfg.ffn_expansion, params, f"stage{k}.block{b}", cfg.layernorm_eps
                )
            self.last_stage_shapes.append((grid[0], grid[1], tokens.data.shape[1]))
            if k == 1:
                stage1_tokens = tokens
            if k < cfg.num_stages:
                tokens, grid = patch_merge(tokens, grid, params, f"merge{k}")
        flat = T.reshape(tokens, (1, tokens.size))
        emotion = linear(flat, params, "head")
        au = self.au_branch(stage1_tokens, (cfg.grid_h, cfg.grid_w), params)
        return emotion, au

    def au_branch(self, stage1_tokens: Tensor, grid, params: ParamStore) -> Tensor:
        """Stage-1 tokens [N x C] -> [1 x 21] AU logits in canonical order."""
        cfg = self.cfg
        fmap = seq2img(stage1_tokens, grid)
        by_name = {}
        for p in cfg.au_patches:
            vec = T.reshape(extract_au_patch(fmap, p), (1, cfg.embed_dim))
            by_name[p.name] = linear(vec, params, f"au.{p.name}")
        produced_aus: list = []
        produced: list = []
        mirrors = {p.name: p.mirror_of for p in cfg.au_patches if p.mirror_of}
        consumed = set()
        for p in cfg.au_patches:
            if p.name in consumed:
                continue
            if p.name in mirrors:
                # right-hand member of a pair: maxout against its mirror
                left = by_name[mirrors[p.name]]
                produced.append(symmetric_maxout(left, by_name[p.name]))
                consumed.add(mirrors[p.name])
            elif p.name in mirrors.values():
                continue  # handled with its mirror partner
            else:
                produced.append(by_name[p.name])
            produced_aus.extend(p.aus)
            consumed.add(p.name)
        logits = T.concat(produced, axis=1) if len(produced) > 1 else produced[0]
        perm = np.array([produced_aus.index(au) for au in CANONICAL_AU_IDS])
        return logits[:, perm]


def build_model(cfg: ModelConfig, seed: int):
    """Validate the config and return (params, model); deterministic in seed."""
    model = AuCvt(cfg)
    return model.init_params(seed), model


def save_model_config(path, cfg: ModelConfig):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return ModelConfig.from_dict(json.load(fh))
