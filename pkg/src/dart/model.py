"""Deterministic toy promptable detector.

Five stages: a windowed/global-attention ViT backbone with 2D rotary
position embeddings feeding a 3-level feature pyramid, a cacheable text
embedder, a cross-modal transformer encoder-decoder over learned object
queries, box/score/presence heads, and an optional mask head.  Weights
are random but fully determined by (seed, tensor path); the model's
value is structural, not semantic.

The backbone signature takes only the image, which enforces the
class-agnostic invariant by construction: no text can reach it.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .tensors import PrecisionMode, layernorm_nd, matmul_nd, mode_round, rope_nd, softmax_nd

LN_EPS = 1e-6
TEXT_TABLE_ROWS = 1024
MODEL_MAGIC = b"DARTM1"
ROPE_BASE = 100.0


class ConfigError(ValueError):
    """A model configuration violates one of its invariants."""


class MaskHeadRemovedError(RuntimeError):
    """Mask prediction was requested from a detection-only model."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_blocks: int = 8
    global_block_indices: tuple[int, ...] = (3, 7)
    window_size: int = 4
    num_heads: int = 4
    fpn_dims: tuple[int, int, int] = (64, 64, 64)
    text_tokens: int = 8
    text_dim: int = 64
    num_queries: int = 16
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    seed: int = 0

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return 4 * self.embed_dim

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.grid % self.window_size != 0:
            raise ConfigError(
                f"token grid {self.grid} not divisible by window_size {self.window_size}"
            )
        if self.grid % 4 != 0:
            raise ConfigError(f"token grid {self.grid} must be divisible by 4 for the 3 fpn levels")
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be non-negative")
        bad = [b for b in self.global_block_indices if not 0 <= b < self.num_blocks]
        if bad:
            raise ConfigError(f"global_block_indices {bad} outside [0, {self.num_blocks})")
        if self.num_blocks > 0 and not self.global_block_indices:
            raise ConfigError("at least one global block is required (sole cross-window path)")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must divide evenly into num_heads")
        if self.head_dim % 4 != 0:
            raise ConfigError("head_dim must be divisible by 4 (2D rotary channel pairs)")
        if len(self.fpn_dims) != 3:
            raise ConfigError("fpn_dims must have exactly 3 entries")
        if self.text_dim % self.num_heads != 0:
            raise ConfigError("text_dim must divide evenly into num_heads")
        if min(self.text_tokens, self.num_queries, self.num_encoder_layers, self.num_decoder_layers) < 1:
            raise ConfigError("text_tokens, num_queries and layer counts must be >= 1")

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "num_blocks": self.num_blocks,
            "global_block_indices": list(self.global_block_indices),
            "window_size": self.window_size,
            "num_heads": self.num_heads,
            "fpn_dims": list(self.fpn_dims),
            "text_tokens": self.text_tokens,
            "text_dim": self.text_dim,
            "num_queries": self.num_queries,
            "num_encoder_layers": self.num_encoder_layers,
            "num_decoder_layers": self.num_decoder_layers,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["global_block_indices"] = tuple(d["global_block_indices"])
        d["fpn_dims"] = tuple(d["fpn_dims"])
        return cls(**d)


def toy_config(seed: int = 0, **overrides) -> ModelConfig:
    """The default desk-scale profile."""
    return replace(ModelConfig(), seed=seed, **overrides)


@dataclass
class DetectorModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    block_kinds: tuple[str, ...]
    attn_enabled: tuple[bool, ...]
    mlp_enabled: tuple[bool, ...]
    has_mask_head: bool = True
    plan_id: str | None = None
    _text_cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)


@dataclass(frozen=True)
class FpnFeatures:
    """Three class-agnostic feature levels plus provenance."""

    levels: tuple[np.ndarray, np.ndarray, np.ndarray]
    model_seed: int
    mode: PrecisionMode
    plan_id: str | None = None

    def __post_init__(self) -> None:
        if len(self.levels) != 3:
            raise ValueError("fpn features must carry exactly 3 levels")
        for lvl in self.levels:
            if not np.all(np.isfinite(lvl)):
                raise ValueError("fpn features must be finite")


@dataclass(frozen=True)
class TextEmbeddings:
    by_name: dict[str, np.ndarray]

    def stack(self, names: list[str]) -> list[np.ndarray]:
        return [self.by_name[n] for n in names]


@dataclass(frozen=True)
class RawQueryOutputs:
    """Per-class decoder outputs before thresholding."""

    query_features: np.ndarray  # [N, num_queries, d]
    boxes: np.ndarray  # [N, num_queries, 4], sigmoid-squashed (cx, cy, w, h)
    presence_logits: np.ndarray  # [N]
    score_logits: np.ndarray  # [N, num_queries]

    @property
    def batch(self) -> int:
        return self.query_features.shape[0]


def _philox_key(seed: int, path: str) -> int:
    digest = hashlib.blake2b(f"{seed}\x1f{path}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def _uniform_init(seed: int, path: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=_philox_key(seed, path)))
    w = gen.uniform(-1.0, 1.0, size=shape) / math.sqrt(fan_in)
    # float32 grid so the binary save format round-trips bit-exactly
    return w.astype(np.float32).astype(np.float64)


def _rope_tables(cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    pairs = cfg.head_dim // 2
    per_axis = pairs // 2
    inv_freq = ROPE_BASE ** (-np.arange(per_axis, dtype=np.float64) / per_axis)
    rows, cols = np.divmod(np.arange(cfg.tokens, dtype=np.float64), float(cfg.grid))
    angles = np.concatenate(
        [rows[:, None] * inv_freq[None, :], cols[:, None] * inv_freq[None, :]], axis=1
    )
    cos = np.cos(angles).astype(np.float32).astype(np.float64)
    sin = np.sin(angles).astype(np.float32).astype(np.float64)
    return cos, sin


def _declare_params(cfg: ModelConfig, with_mask_head: bool) -> list[tuple[str, tuple[int, ...], int | str]]:
    """Ordered (path, shape, init) declaration; init is a fan-in or 'ones'/'zeros'/'rope'."""
    e, d = cfg.embed_dim, cfg.text_dim
    decl: list[tuple[str, tuple[int, ...], int | str]] = [
        ("patch_embed.w", (cfg.patch_dim, e), cfg.patch_dim),
        ("patch_embed.b", (e,), "zeros"),
        ("rope.cos", (cfg.tokens, cfg.head_dim // 2), "rope_cos"),
        ("rope.sin", (cfg.tokens, cfg.head_dim // 2), "rope_sin"),
    ]
    for b in range(cfg.num_blocks):
        p = f"backbone.block{b}"
        decl += [
            (f"{p}.ln1.gamma", (e,), "ones"),
            (f"{p}.ln1.beta", (e,), "zeros"),
            (f"{p}.attn.qkv.w", (e, 3 * e), e),
            (f"{p}.attn.qkv.b", (3 * e,), "zeros"),
            (f"{p}.attn.out.w", (e, e), e),
            (f"{p}.attn.out.b", (e,), "zeros"),
            (f"{p}.ln2.gamma", (e,), "ones"),
            (f"{p}.ln2.beta", (e,), "zeros"),
            (f"{p}.mlp.fc1.w", (e, cfg.mlp_hidden), e),
            (f"{p}.mlp.fc1.b", (cfg.mlp_hidden,), "zeros"),
            (f"{p}.mlp.fc2.w", (cfg.mlp_hidden, e), cfg.mlp_hidden),
            (f"{p}.mlp.fc2.b", (e,), "zeros"),
        ]
    for lvl in range(3):
        decl += [
            (f"fpn.level{lvl}.w", (e, cfg.fpn_dims[lvl]), e),
            (f"fpn.level{lvl}.b", (cfg.fpn_dims[lvl],), "zeros"),
        ]
    decl += [
        # lookup-table rows are unit scale, like a standard embedding layer
        ("text.table", (TEXT_TABLE_ROWS, d), 1),
        ("encdec.input.w", (cfg.fpn_dims[0], d), cfg.fpn_dims[0]),
        ("encdec.input.b", (d,), "zeros"),
    ]

    def attn_layer(p: str) -> list[tuple[str, tuple[int, ...], int | str]]:
        return [
            (f"{p}.q.w", (d, d), d),
            (f"{p}.q.b", (d,), "zeros"),
            (f"{p}.kv.w", (d, 2 * d), d),
            (f"{p}.kv.b", (2 * d,), "zeros"),
            (f"{p}.out.w", (d, d), d),
            (f"{p}.out.b", (d,), "zeros"),
        ]

    def ln(p: str) -> list[tuple[str, tuple[int, ...], int | str]]:
        return [(f"{p}.gamma", (d,), "ones"), (f"{p}.beta", (d,), "zeros")]

    def mlp(p: str) -> list[tuple[str, tuple[int, ...], int | str]]:
        return [
            (f"{p}.fc1.w", (d, 4 * d), d),
            (f"{p}.fc1.b", (4 * d,), "zeros"),
            (f"{p}.fc2.w", (4 * d, d), 4 * d),
            (f"{p}.fc2.b", (d,), "zeros"),
        ]

    for l in range(cfg.num_encoder_layers):
        p = f"encoder.layer{l}"
        decl += ln(f"{p}.ln1") + attn_layer(f"{p}.self") + ln(f"{p}.ln2")
        decl += attn_layer(f"{p}.cross") + ln(f"{p}.ln3") + mlp(f"{p}.mlp")
    decl += ln("encoder.final_ln")
    decl += [
        ("decoder.queries", (cfg.num_queries, d), d),
        ("decoder.presence_token", (1, d), d),
    ]
    for l in range(cfg.num_decoder_layers):
        p = f"decoder.layer{l}"
        decl += ln(f"{p}.ln1") + attn_layer(f"{p}.self") + ln(f"{p}.ln2")
        decl += attn_layer(f"{p}.cross") + ln(f"{p}.ln3") + mlp(f"{p}.mlp")
    decl += ln("decoder.final_ln")
    decl += [
        ("heads.box.w", (d, 4), d),
        ("heads.box.b", (4,), "zeros"),
        ("heads.score.w", (d, 1), d),
        ("heads.score.b", (1,), "zeros"),
        ("heads.presence.w", (d, 1), d),
        ("heads.presence.b", (1,), "zeros"),
    ]
    if with_mask_head:
        decl += [
            ("mask.query_proj.w", (d, d), d),
            ("mask.query_proj.b", (d,), "zeros"),
            ("mask.feat_proj.w", (cfg.fpn_dims[0], d), cfg.fpn_dims[0]),
            ("mask.feat_proj.b", (d,), "zeros"),
        ]
    return decl


def build_model(config: ModelConfig, with_mask_head: bool = True) -> DetectorModel:
    """Instantiate all weights deterministically from the config seed."""
    config.validate()
    rope_cos, rope_sin = _rope_tables(config)
    params: dict[str, np.ndarray] = {}
    for path, shape, init in _declare_params(config, with_mask_head):
        if init == "ones":
            params[path] = np.ones(shape)
        elif init == "zeros":
            params[path] = np.zeros(shape)
        elif init == "rope_cos":
            params[path] = rope_cos
        elif init == "rope_sin":
            params[path] = rope_sin
        else:
            params[path] = _uniform_init(config.seed, path, shape, int(init))
    kinds = tuple(
        "global" if b in config.global_block_indices else "windowed"
        for b in range(config.num_blocks)
    )
    enabled = tuple(True for _ in range(config.num_blocks))
    return DetectorModel(
        config=config,
        params=params,
        block_kinds=kinds,
        attn_enabled=enabled,
        mlp_enabled=enabled,
        has_mask_head=with_mask_head,
    )


def without_mask_head(model: DetectorModel) -> DetectorModel:
    params = {k: v for k, v in model.params.items() if not k.startswith("mask.")}
    return replace(model, params=params, has_mask_head=False)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # clip is value-preserving: the double-precision sigmoid saturates by |x| ~ 37
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def _linear(model: DetectorModel, x: np.ndarray, path: str, mode: PrecisionMode) -> np.ndarray:
    y = matmul_nd(x, model.params[f"{path}.w"], mode)
    return mode_round(y + model.params[f"{path}.b"], mode)


def _ln(model: DetectorModel, x: np.ndarray, path: str) -> np.ndarray:
    return layernorm_nd(x, model.params[f"{path}.gamma"], model.params[f"{path}.beta"], LN_EPS)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    t, dim = x.shape
    return x.reshape(t, heads, dim // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, hd = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * hd)


def _window_partition(x: np.ndarray, grid: int, win: int) -> np.ndarray:
    # [H, T, hd] -> [H, nwin, win*win, hd]
    h, _, hd = x.shape
    n = grid // win
    x = x.reshape(h, n, win, n, win, hd).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(h, n * n, win * win, hd)


def _window_merge(x: np.ndarray, grid: int, win: int) -> np.ndarray:
    h, _, _, hd = x.shape
    n = grid // win
    x = x.reshape(h, n, n, win, win, hd).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(h, grid * grid, hd)


def _backbone_attention(model: DetectorModel, x: np.ndarray, block: int, mode: PrecisionMode) -> np.ndarray:
    cfg = model.config
    qkv = _linear(model, x, f"backbone.block{block}.attn.qkv", mode)
    qkv = qkv.reshape(cfg.tokens, 3, cfg.num_heads, cfg.head_dim).transpose(1, 2, 0, 3)
    q, k, v = qkv[0], qkv[1], qkv[2]
    cos, sin = model.params["rope.cos"], model.params["rope.sin"]
    q = mode_round(rope_nd(q, cos, sin), mode)
    k = mode_round(rope_nd(k, cos, sin), mode)
    windowed = model.block_kinds[block] == "windowed"
    if windowed:
        q = _window_partition(q, cfg.grid, cfg.window_size)
        k = _window_partition(k, cfg.grid, cfg.window_size)
        v = _window_partition(v, cfg.grid, cfg.window_size)
    scores = matmul_nd(q, np.swapaxes(k, -1, -2), mode)
    scores = mode_round(scores / math.sqrt(cfg.head_dim), mode)
    attn = softmax_nd(scores, -1, mode)
    out = matmul_nd(attn, v, mode)
    if windowed:
        out = _window_merge(out, cfg.grid, cfg.window_size)
    return _linear(model, _merge_heads(out), f"backbone.block{block}.attn.out", mode)


def _block_forward(model: DetectorModel, x: np.ndarray, block: int, mode: PrecisionMode) -> np.ndarray:
    p = f"backbone.block{block}"
    if model.attn_enabled[block]:
        h = _ln(model, x, f"{p}.ln1")
        x = mode_round(x + _backbone_attention(model, h, block, mode), mode)
    if model.mlp_enabled[block]:
        h = _ln(model, x, f"{p}.ln2")
        h = _linear(model, h, f"{p}.mlp.fc1", mode)
        h = mode_round(_relu(h), mode)
        h = _linear(model, h, f"{p}.mlp.fc2", mode)
        x = mode_round(x + h, mode)
    return x


def patch_tokens(model: DetectorModel, image: np.ndarray, mode: PrecisionMode) -> np.ndarray:
    cfg = model.config
    image = np.asarray(image, dtype=np.float64)
    expected = (cfg.image_size, cfg.image_size, 3)
    if image.shape != expected:
        raise ValueError(f"image shape {image.shape} does not match {expected}")
    if np.min(image) < 0.0 or np.max(image) > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    g, p = cfg.grid, cfg.patch_size
    patches = image.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(cfg.tokens, cfg.patch_dim)
    return _linear(model, patches, "patch_embed", mode)


def _pool_tokens(x: np.ndarray, grid: int, factor: int) -> np.ndarray:
    g = grid // factor
    t, e = x.shape
    pooled = x.reshape(g, factor, g, factor, e).mean(axis=(1, 3))
    return pooled.reshape(g * g, e)


def fpn_from_tokens(model: DetectorModel, tokens: np.ndarray, mode: PrecisionMode) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cfg = model.config
    lvl0 = _linear(model, tokens, "fpn.level0", mode)
    lvl1 = _linear(model, mode_round(_pool_tokens(tokens, cfg.grid, 2), mode), "fpn.level1", mode)
    lvl2 = _linear(model, mode_round(_pool_tokens(tokens, cfg.grid, 4), mode), "fpn.level2", mode)
    return lvl0, lvl1, lvl2


def backbone_forward(model: DetectorModel, image: np.ndarray, mode: PrecisionMode) -> FpnFeatures:
    """Image -> 3-level feature pyramid.  Text never enters this path."""
    x = patch_tokens(model, image, mode)
    for b in range(model.config.num_blocks):
        x = _block_forward(model, x, b, mode)
    return FpnFeatures(fpn_from_tokens(model, x, mode), model.config.seed, mode, model.plan_id)


def _text_rows(name: str, text_tokens: int) -> list[int]:
    rows = []
    for i in range(text_tokens):
        digest = hashlib.blake2b(f"{name}\x1f{i}".encode(), digest_size=8).digest()
        rows.append(int.from_bytes(digest, "little") % TEXT_TABLE_ROWS)
    return rows


def text_encode(model: DetectorModel, class_names: list[str]) -> TextEmbeddings:
    """Hash each class name into embedding-table rows; memoized per model."""
    if not class_names:
        raise ValueError("class name list is empty")
    out: dict[str, np.ndarray] = {}
    for name in class_names:
        if not name:
            raise ValueError("class names must be non-empty strings")
        if name not in model._text_cache:
            rows = _text_rows(name, model.config.text_tokens)
            emb = model.params["text.table"][rows].copy()
            emb.setflags(write=False)
            model._text_cache[name] = emb
        out[name] = model._text_cache[name]
    return TextEmbeddings(out)


def clear_text_cache(model: DetectorModel) -> None:
    model._text_cache.clear()


def _mha(model: DetectorModel, q_in: np.ndarray, kv_in: np.ndarray, prefix: str, mode: PrecisionMode) -> np.ndarray:
    heads = model.config.num_heads
    d = model.config.text_dim
    q = _split_heads(_linear(model, q_in, f"{prefix}.q", mode), heads)
    kv = _linear(model, kv_in, f"{prefix}.kv", mode)
    k = _split_heads(kv[:, :d], heads)
    v = _split_heads(kv[:, d:], heads)
    scores = matmul_nd(q, np.swapaxes(k, -1, -2), mode)
    scores = mode_round(scores / math.sqrt(d // heads), mode)
    attn = softmax_nd(scores, -1, mode)
    out = _merge_heads(matmul_nd(attn, v, mode))
    return _linear(model, out, f"{prefix}.out", mode)


def _mlp_forward(model: DetectorModel, x: np.ndarray, prefix: str, mode: PrecisionMode) -> np.ndarray:
    h = _linear(model, x, f"{prefix}.fc1", mode)
    h = mode_round(_relu(h), mode)
    return _linear(model, h, f"{prefix}.fc2", mode)


def _encdec_single(model: DetectorModel, level0: np.ndarray, text: np.ndarray, mode: PrecisionMode):
    cfg = model.config
    e = _linear(model, level0, "encdec.input", mode)
    for l in range(cfg.num_encoder_layers):
        p = f"encoder.layer{l}"
        h = _ln(model, e, f"{p}.ln1")
        e = mode_round(e + _mha(model, h, h, f"{p}.self", mode), mode)
        e = mode_round(e + _mha(model, _ln(model, e, f"{p}.ln2"), text, f"{p}.cross", mode), mode)
        e = mode_round(e + _mlp_forward(model, _ln(model, e, f"{p}.ln3"), f"{p}.mlp", mode), mode)
    e = mode_round(_ln(model, e, "encoder.final_ln"), mode)
    q = np.concatenate([model.params["decoder.queries"], model.params["decoder.presence_token"]], axis=0)
    for l in range(cfg.num_decoder_layers):
        p = f"decoder.layer{l}"
        h = _ln(model, q, f"{p}.ln1")
        q = mode_round(q + _mha(model, h, h, f"{p}.self", mode), mode)
        q = mode_round(q + _mha(model, _ln(model, q, f"{p}.ln2"), e, f"{p}.cross", mode), mode)
        q = mode_round(q + _mlp_forward(model, _ln(model, q, f"{p}.ln3"), f"{p}.mlp", mode), mode)
    q = mode_round(_ln(model, q, "decoder.final_ln"), mode)
    qf = q[: cfg.num_queries]
    boxes = mode_round(sigmoid(_linear(model, qf, "heads.box", mode)), mode)
    score_logits = _linear(model, qf, "heads.score", mode)[:, 0]
    presence_logit = float(_linear(model, q[cfg.num_queries :], "heads.presence", mode)[0, 0])
    return qf, boxes, presence_logit, score_logits


def encdec_forward(
    model: DetectorModel,
    fpn: FpnFeatures,
    text_batch: list[np.ndarray],
    mode: PrecisionMode,
) -> RawQueryOutputs:
    """Decode a batch of class prompts against shared image features.

    Classes are processed independently (no cross-class mixing), which is
    the structural fact that makes batching output-preserving.
    """
    cfg = model.config
    if len(text_batch) < 1:
        raise ValueError("text batch must contain at least one class")
    s0 = cfg.tokens
    if fpn.levels[0].shape != (s0, cfg.fpn_dims[0]):
        raise ValueError(
            f"fpn level-0 shape {fpn.levels[0].shape} does not match model {(s0, cfg.fpn_dims[0])}"
        )
    for t in text_batch:
        if t.shape != (cfg.text_tokens, cfg.text_dim):
            raise ValueError(f"text embedding shape {t.shape} does not match model")
    feats, boxes, presences, scores = [], [], [], []
    for text in text_batch:
        qf, bx, pl, sl = _encdec_single(model, fpn.levels[0], text, mode)
        feats.append(qf)
        boxes.append(bx)
        presences.append(pl)
        scores.append(sl)
    return RawQueryOutputs(
        query_features=np.stack(feats),
        boxes=np.stack(boxes),
        presence_logits=np.array(presences, dtype=np.float64),
        score_logits=np.stack(scores),
    )


def mask_head_forward(model: DetectorModel, fpn: FpnFeatures, queries: RawQueryOutputs) -> np.ndarray:
    """Per-query mask logits over the level-0 token grid: [N, queries, tokens]."""
    if not model.has_mask_head:
        raise MaskHeadRemovedError("mask head removed: this model is detection-only")
    mq = queries.query_features @ model.params["mask.query_proj.w"] + model.params["mask.query_proj.b"]
    mf = fpn.levels[0] @ model.params["mask.feat_proj.w"] + model.params["mask.feat_proj.b"]
    return mq @ mf.T


# ---------------------------------------------------------------------------
# structural edits
# ---------------------------------------------------------------------------


def set_sub_block(model: DetectorModel, block: int, kind: str, enabled: bool) -> DetectorModel:
    if kind not in ("attn", "mlp"):
        raise ValueError(f"unknown sub-block kind {kind!r}")
    if not 0 <= block < model.config.num_blocks:
        raise ValueError(f"block index {block} out of range")
    attn = list(model.attn_enabled)
    mlp = list(model.mlp_enabled)
    (attn if kind == "attn" else mlp)[block] = enabled
    return replace(model, attn_enabled=tuple(attn), mlp_enabled=tuple(mlp))


def truncate_model(model: DetectorModel, depth: int) -> DetectorModel:
    """Keep the first ``depth`` blocks.

    If the kept prefix contains no global block, the last kept block is
    re-tagged global so a cross-window path always survives.
    """
    cfg = model.config
    if not 0 <= depth <= cfg.num_blocks:
        raise ValueError(f"depth {depth} exceeds num_blocks {cfg.num_blocks}")
    kept_globals = tuple(b for b in cfg.global_block_indices if b < depth)
    kinds = list(model.block_kinds[:depth])
    if depth > 0 and not kept_globals:
        kinds[depth - 1] = "global"
        kept_globals = (depth - 1,)
    params = {
        k: v
        for k, v in model.params.items()
        if not k.startswith("backbone.block") or int(k.split(".")[1][5:]) < depth
    }
    new_cfg = replace(cfg, num_blocks=depth, global_block_indices=kept_globals)
    return replace(
        model,
        config=new_cfg,
        params=params,
        block_kinds=tuple(kinds),
        attn_enabled=model.attn_enabled[:depth],
        mlp_enabled=model.mlp_enabled[:depth],
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_model(model: DetectorModel, path) -> None:
    """Binary format: magic, length-prefixed canonical JSON header, then
    weight tensors in declaration order as little-endian float32."""
    names = list(model.params.keys())
    header = {
        "config": model.config.to_dict(),
        "block_kinds": list(model.block_kinds),
        "attn_enabled": list(model.attn_enabled),
        "mlp_enabled": list(model.mlp_enabled),
        "has_mask_head": model.has_mask_head,
        "plan_id": model.plan_id,
        "params": [[n, list(model.params[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for n in names:
        buf.write(model.params[n].astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_model(path) -> DetectorModel:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ValueError("not a model file (bad magic)")
    off = len(MODEL_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    params: dict[str, np.ndarray] = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        off += 4 * count
        params[name] = vals.astype(np.float64).reshape(shape)
    return DetectorModel(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        block_kinds=tuple(header["block_kinds"]),
        attn_enabled=tuple(header["attn_enabled"]),
        mlp_enabled=tuple(header["mlp_enabled"]),
        has_mask_head=header["has_mask_head"],
        plan_id=header["plan_id"],
    )


def models_equal(a: DetectorModel, b: DetectorModel) -> bool:
    if a.config != b.config or a.block_kinds != b.block_kinds:
        return False
    if a.attn_enabled != b.attn_enabled or a.mlp_enabled != b.mlp_enabled:
        return False
    if a.params.keys() != b.params.keys():
        return False
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def weights_checksum(model: DetectorModel, prefixes: tuple[str, ...] = ()) -> str:
    """Digest of the selected weights (all weights when no prefix given)."""
    h = hashlib.blake2b(digest_size=16)
    for name in model.params:
        if prefixes and not name.startswith(prefixes):
            continue
        h.update(name.encode())
        h.update(model.params[name].tobytes())
    return h.hexdigest()


ENCDEC_PREFIXES = ("encdec.", "encoder.", "decoder.", "heads.")
