"""Dual-branch vision transformer with selective cross-attention fusion.

Images are cut into small patches (S-branch) and large patches (L-branch),
each branch runs its own stack of pre-norm encoder blocks, and a number of
fusion rounds let the L-branch CLS token attend the S-branch patches.  The
logits come from the L-branch CLS token.  Encoder blocks and fusion rounds
are all subject to stochastic depth.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .fusion import (
    CALIBRATION_MODES,
    RELEVANCE_MODES,
    AttentionWeights,
    CalibrationFunction,
    FusionProjections,
    LayerNormParams,
    RelevanceScorer,
    keep_count,
    selective_cross_attention,
    self_attention,
)
from .rng import make_rng
from .tensor import ShapeError, Tensor

LAYER_DROP_MODES = ("constant", "linear_schedule")
FUSION_DIRECTIONS = ("l_to_s", "bidirectional")


class ConfigError(ValueError):
    """A configuration violates one of the model or training invariants."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 256
    s_patch: int = 16
    l_patch: int = 32
    dim_s: int = 256
    dim_l: int = 256
    depth: int = 6
    cls_depth: int = 2
    heads: int = 12
    mlp_dim: int = 512
    dropout_p: float = 0.15
    emb_dropout_p: float = 0.15
    layer_drop_p: float = 0.05
    layer_drop_mode: str = "constant"
    keep_ratio: float = 0.5
    calibration_mode: str = "affine"
    relevance_mode: str = "dot"
    fusion_direction: str = "l_to_s"
    num_classes: int = 2
    seed: int = 0

    def violations(self, buildable: bool = True) -> list[str]:
        """Text of every invariant this config breaks.

        With ``buildable=False`` the published 256-wide / 12-head pairing is
        tolerated (256 is not a multiple of 12); such a config can be parsed
        and reported but not turned into a model.
        """
        out = []
        positive = ("image_size", "s_patch", "l_patch", "dim_s", "dim_l", "depth",
                    "cls_depth", "heads", "mlp_dim", "num_classes")
        for name in positive:
            if getattr(self, name) < 1:
                out.append(f"{name} must be positive")
        if out:
            return out
        if self.image_size % self.s_patch:
            out.append("image_size divisible by s_patch")
        if self.image_size % self.l_patch:
            out.append("image_size divisible by l_patch")
        if self.l_patch <= self.s_patch:
            out.append("l_patch > s_patch")
        published_pair = (self.dim_s, self.dim_l, self.heads) == (256, 256, 12)
        if buildable or not published_pair:
            if self.dim_s % self.heads or self.dim_l % self.heads:
                out.append("dim divisible by heads")
        for name in ("dropout_p", "emb_dropout_p", "layer_drop_p"):
            if not 0.0 <= getattr(self, name) < 1.0:
                out.append(f"0 <= {name} < 1")
        if not 0.0 < self.keep_ratio <= 1.0:
            out.append("0 < keep_ratio <= 1")
        if self.layer_drop_mode not in LAYER_DROP_MODES:
            out.append(f"layer_drop_mode in {LAYER_DROP_MODES}")
        if self.calibration_mode not in CALIBRATION_MODES:
            out.append(f"calibration_mode in {CALIBRATION_MODES}")
        if self.relevance_mode not in RELEVANCE_MODES:
            out.append(f"relevance_mode in {RELEVANCE_MODES}")
        if self.fusion_direction not in FUSION_DIRECTIONS:
            out.append(f"fusion_direction in {FUSION_DIRECTIONS}")
        return out

    def validate(self, buildable: bool = True) -> "ModelConfig":
        problems = self.violations(buildable)
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self

    @property
    def n_layers(self) -> int:
        return self.depth + self.cls_depth

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


FULL_CONFIG = ModelConfig()
DESK_CONFIG = replace(
    FULL_CONFIG,
    image_size=32, s_patch=4, l_patch=8, dim_s=32, dim_l=32,
    depth=2, cls_depth=1, heads=4, mlp_dim=64, keep_ratio=0.5,
    dropout_p=0.0, emb_dropout_p=0.0,
)


# ---------------------------------------------------------------- patches / embedding


def patchify(image, patch: int) -> np.ndarray:
    """Non-overlapping row-major patches, each flattened row-major.

    ``[H, W] -> [n, patch*patch]`` or ``[B, H, W] -> [B, n, patch*patch]``.
    """
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    h, w = img.shape[-2:]
    if h != w:
        raise ShapeError(f"patchify expects square images, got {h}x{w}")
    if patch < 1 or h % patch:
        raise ShapeError(f"image size {h} not divisible by patch {patch}")
    g = h // patch
    lead = img.shape[:-2]
    blocks = img.reshape(*lead, g, patch, g, patch)
    blocks = np.swapaxes(blocks, -3, -2)
    return blocks.reshape(*lead, g * g, patch * patch)


@dataclass
class PatchEmbedder:
    patch_size: int
    proj_w: Tensor
    proj_b: Tensor
    cls_token: Tensor
    pos_embedding: Tensor
    dropout_p: float = 0.0


def embed(patches, embedder: PatchEmbedder, training: bool = False, rng=None) -> Tensor:
    """Project patches, prepend the CLS token, add positions, apply embedding dropout."""
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    if x.shape[-1] != embedder.proj_w.shape[0]:
        raise ShapeError(f"patch length {x.shape[-1]} != projection input {embedder.proj_w.shape[0]}")
    if x.shape[-2] + 1 != embedder.pos_embedding.shape[0]:
        raise ShapeError(f"{x.shape[-2]} patches do not match positional table {embedder.pos_embedding.shape}")
    tokens = T.linear(x, embedder.proj_w, embedder.proj_b)
    dim = tokens.shape[-1]
    cls = embedder.cls_token
    if tokens.ndim == 3:
        cls = T.broadcast_to(cls, (tokens.shape[0], 1, dim))
    seq = T.add(T.concat_rows(cls, tokens), embedder.pos_embedding)
    return T.dropout(seq, embedder.dropout_p, training, rng)


# ---------------------------------------------------------------- encoder


@dataclass
class EncoderBlock:
    attn: AttentionWeights
    ln1: LayerNormParams
    ln2: LayerNormParams
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    dropout_p: float = 0.0


def encoder_forward(
    seq: Tensor, block: EncoderBlock, training: bool = False, rng=None, residual_scale: float = 1.0
) -> Tensor:
    """Pre-norm block: ``x + Attn(LN x)`` then ``+ MLP(LN x)``; residual branches scaled together."""
    a = T.dropout(self_attention(block.ln1(seq), block.attn), block.dropout_p, training, rng)
    if residual_scale != 1.0:
        a = T.mul(a, residual_scale)
    x = T.add(seq, a)
    h = T.gelu(T.linear(block.ln2(x), block.mlp_w1, block.mlp_b1))
    h = T.dropout(h, block.dropout_p, training, rng)
    m = T.dropout(T.linear(h, block.mlp_w2, block.mlp_b2), block.dropout_p, training, rng)
    if residual_scale != 1.0:
        m = T.mul(m, residual_scale)
    return T.add(x, m)


# ---------------------------------------------------------------- stochastic depth


@dataclass(frozen=True)
class StochasticDepthSchedule:
    mode: str
    p_const: float
    n_layers: int


def drop_probability(layer: int, sched: StochasticDepthSchedule) -> float:
    """Chance that 1-based ``layer`` is skipped in a training step."""
    if not 1 <= layer <= sched.n_layers:
        raise ValueError(f"layer index {layer} outside 1..{sched.n_layers}")
    if sched.mode == "linear_schedule":
        return 1.0 - layer / sched.n_layers
    if sched.mode == "constant":
        return sched.p_const
    raise ValueError(f"unknown stochastic depth mode {sched.mode!r}")


def stochastic_block(seq: Tensor, block, p: float, training: bool = False, rng=None) -> Tensor:
    """Skip ``block`` with probability ``p`` while training, else run it with residuals scaled by 1/(1-p).

    ``block`` is an :class:`EncoderBlock` or a callable ``(seq, residual_scale) -> seq``.
    One uniform draw is consumed per call whenever ``training`` and ``p > 0``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must be in [0, 1), got {p}")
    if isinstance(block, EncoderBlock):
        enc = block

        def block(x, scale):
            return encoder_forward(x, enc, training, rng, scale)

    if training and p > 0.0:
        if rng.random() < p:
            return seq
        return block(seq, 1.0 / (1.0 - p))
    return block(seq, 1.0)


# ---------------------------------------------------------------- fusion stage


@dataclass
class FusionStage:
    """Parameters for one direction of one fusion round (query branch CLS -> other branch patches)."""

    proj: FusionProjections
    attn: AttentionWeights
    ln: LayerNormParams
    c_query: CalibrationFunction
    c_keys: CalibrationFunction
    scorer: RelevanceScorer
    keep_ratio: float
    dropout_p: float = 0.0


def fusion_round(query_seq: Tensor, key_seq: Tensor, stage: FusionStage, training=False, rng=None,
                 residual_scale: float = 1.0) -> Tensor:
    """New query-branch sequence: fused CLS followed by the query branch's own patches."""
    cls = T.slice_rows(query_seq, 0, 1)
    n = key_seq.shape[-2]
    patches = T.slice_rows(key_seq, 1, n)
    k = keep_count(n - 1, stage.keep_ratio)
    fused = selective_cross_attention(
        cls, patches, stage.proj, stage.c_query, stage.c_keys, stage.scorer, k, stage.attn, stage.ln,
        residual_scale=residual_scale, dropout_p=stage.dropout_p, training=training, rng=rng,
    )
    return T.concat_rows(fused, T.slice_rows(query_seq, 1, query_seq.shape[-2]))


# ---------------------------------------------------------------- parameters


def _xavier(rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out))


def _projection(rng, d_in: int, d_out: int) -> np.ndarray:
    return np.eye(d_in) if d_in == d_out else _xavier(rng, d_in, d_out)


def init_parameters(config: ModelConfig, rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Fresh parameters, keyed by dotted name, in a fixed creation order."""
    config.validate()
    rng = rng if rng is not None else make_rng(config.seed)
    raw: dict[str, np.ndarray] = {}

    def attn(prefix, dim):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            raw[f"{prefix}.{name}"] = _xavier(rng, dim, dim)

    def norm(prefix, dim):
        raw[f"{prefix}.gamma"] = np.ones(dim)
        raw[f"{prefix}.beta"] = np.zeros(dim)

    def calib(prefix, dim):
        if config.calibration_mode == "affine":
            raw[f"{prefix}.scale"] = np.ones(dim)
            raw[f"{prefix}.shift"] = np.zeros(dim)
        else:
            raw[f"{prefix}.w1"] = _xavier(rng, dim, dim)
            raw[f"{prefix}.b1"] = np.zeros(dim)
            raw[f"{prefix}.w2"] = _xavier(rng, dim, dim)
            raw[f"{prefix}.b2"] = np.zeros(dim)

    branches = (("s", config.s_patch, config.dim_s), ("l", config.l_patch, config.dim_l))
    for br, patch, dim in branches:
        n = (config.image_size // patch) ** 2
        raw[f"{br}_embed.proj_w"] = _xavier(rng, patch * patch, dim)
        raw[f"{br}_embed.proj_b"] = np.zeros(dim)
        raw[f"{br}_embed.cls_token"] = np.zeros((1, dim))
        raw[f"{br}_embed.pos_embedding"] = rng.normal(0.0, 0.02, size=(n + 1, dim))
    for i in range(config.depth):
        for br, _, dim in branches:
            p = f"{br}_block{i}"
            norm(f"{p}.ln1", dim)
            attn(f"{p}.attn", dim)
            norm(f"{p}.ln2", dim)
            raw[f"{p}.mlp_w1"] = _xavier(rng, dim, config.mlp_dim)
            raw[f"{p}.mlp_b1"] = np.zeros(config.mlp_dim)
            raw[f"{p}.mlp_w2"] = _xavier(rng, config.mlp_dim, dim)
            raw[f"{p}.mlp_b2"] = np.zeros(dim)
    for r in range(config.cls_depth):
        for direction, d_query, d_keys in _directions(config):
            p = f"fuse{r}.{direction}"
            raw[f"{p}.proj.f_w"] = _projection(rng, d_query, d_keys)
            raw[f"{p}.proj.f_b"] = np.zeros(d_keys)
            raw[f"{p}.proj.g_w"] = _projection(rng, d_keys, d_query)
            raw[f"{p}.proj.g_b"] = np.zeros(d_query)
            norm(f"{p}.ln", d_keys)
            attn(f"{p}.attn", d_keys)
            calib(f"{p}.c_query", d_query)
            calib(f"{p}.c_keys", d_keys)
            if config.relevance_mode == "mlp":
                raw[f"{p}.scorer.w1"] = _xavier(rng, 2 * d_keys, d_keys)
                raw[f"{p}.scorer.b1"] = np.zeros(d_keys)
                raw[f"{p}.scorer.w2"] = _xavier(rng, d_keys, 1)
                raw[f"{p}.scorer.b2"] = np.zeros(1)
    norm("head.ln", config.dim_l)
    raw["head.w"] = _xavier(rng, config.dim_l, config.num_classes)
    raw["head.b"] = np.zeros(config.num_classes)
    return {name: Tensor(value, requires_grad=True) for name, value in raw.items()}


def _directions(config: ModelConfig):
    yield "l_to_s", config.dim_l, config.dim_s
    if config.fusion_direction == "bidirectional":
        yield "s_to_l", config.dim_s, config.dim_l


def parameter_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------- model


class CrossViT:
    """Image batch -> logits.  Holds the config and a name -> Tensor parameter dict."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config.validate()
        self.params = params if params is not None else init_parameters(config)
        self.schedule = StochasticDepthSchedule(config.layer_drop_mode, config.layer_drop_p, config.n_layers)
        self._build_views()

    def _build_views(self):
        cfg, P = self.config, self.params

        def attn(prefix, heads=cfg.heads):
            return AttentionWeights(P[f"{prefix}.w_q"], P[f"{prefix}.w_k"], P[f"{prefix}.w_v"],
                                    P[f"{prefix}.w_o"], heads)

        def norm(prefix):
            return LayerNormParams(P[f"{prefix}.gamma"], P[f"{prefix}.beta"])

        def calib(prefix):
            if cfg.calibration_mode == "affine":
                return CalibrationFunction("affine", scale=P[f"{prefix}.scale"], shift=P[f"{prefix}.shift"])
            return CalibrationFunction("mlp", w1=P[f"{prefix}.w1"], b1=P[f"{prefix}.b1"],
                                       w2=P[f"{prefix}.w2"], b2=P[f"{prefix}.b2"])

        self.embedders = {}
        self.blocks = {"s": [], "l": []}
        for br, patch in (("s", cfg.s_patch), ("l", cfg.l_patch)):
            p = f"{br}_embed"
            self.embedders[br] = PatchEmbedder(patch, P[f"{p}.proj_w"], P[f"{p}.proj_b"],
                                               P[f"{p}.cls_token"], P[f"{p}.pos_embedding"],
                                               cfg.emb_dropout_p)
            for i in range(cfg.depth):
                b = f"{br}_block{i}"
                self.blocks[br].append(EncoderBlock(
                    attn(f"{b}.attn"), norm(f"{b}.ln1"), norm(f"{b}.ln2"),
                    P[f"{b}.mlp_w1"], P[f"{b}.mlp_b1"], P[f"{b}.mlp_w2"], P[f"{b}.mlp_b2"],
                    cfg.dropout_p,
                ))
        self.fusion: list[dict[str, FusionStage]] = []
        for r in range(cfg.cls_depth):
            stages = {}
            for direction, _, _ in _directions(cfg):
                p = f"fuse{r}.{direction}"
                if cfg.relevance_mode == "mlp":
                    scorer = RelevanceScorer("mlp", P[f"{p}.scorer.w1"], P[f"{p}.scorer.b1"],
                                             P[f"{p}.scorer.w2"], P[f"{p}.scorer.b2"])
                else:
                    scorer = RelevanceScorer("dot")
                stages[direction] = FusionStage(
                    FusionProjections(P[f"{p}.proj.f_w"], P[f"{p}.proj.f_b"],
                                      P[f"{p}.proj.g_w"], P[f"{p}.proj.g_b"]),
                    attn(f"{p}.attn"), norm(f"{p}.ln"), calib(f"{p}.c_query"), calib(f"{p}.c_keys"),
                    scorer, cfg.keep_ratio, cfg.dropout_p,
                )
            self.fusion.append(stages)
        self.head_ln = norm("head.ln")

    @classmethod
    def init(cls, config: ModelConfig, rng=None) -> "CrossViT":
        return cls(config, init_parameters(config, rng))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _check_images(self, images) -> np.ndarray:
        x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        size = self.config.image_size
        if x.ndim != 3 or x.shape[1:] != (size, size):
            raise ShapeError(f"expected images of shape [B, {size}, {size}], got {x.shape}")
        if not np.all(np.isfinite(x)) or x.min(initial=0.0) < 0.0 or x.max(initial=0.0) > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        return x

    def forward(self, images, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Raw logits ``[B, num_classes]``.

        RNG draws happen in a fixed order: S then L embedding dropout, then per
        encoder depth the S block and the L block, then each fusion round.
        """
        cfg = self.config
        if training and rng is None:
            raise ValueError("training forward needs an rng")
        x = self._check_images(images)
        s = embed(patchify(x, cfg.s_patch), self.embedders["s"], training, rng)
        l = embed(patchify(x, cfg.l_patch), self.embedders["l"], training, rng)
        for i in range(cfg.depth):
            p = drop_probability(i + 1, self.schedule)
            s = stochastic_block(s, self.blocks["s"][i], p, training, rng)
            l = stochastic_block(l, self.blocks["l"][i], p, training, rng)
        for r, stages in enumerate(self.fusion):
            p = drop_probability(cfg.depth + r + 1, self.schedule)
            new_l = stochastic_block(l, _fusion_fn(s, stages["l_to_s"], training, rng), p, training, rng)
            if "s_to_l" in stages:
                s = stochastic_block(s, _fusion_fn(l, stages["s_to_l"], training, rng), p, training, rng)
            l = new_l
        cls = T.reshape(T.slice_rows(l, 0, 1), (l.shape[0], cfg.dim_l))
        return T.linear(self.head_ln(cls), self.params["head.w"], self.params["head.b"])

    __call__ = forward


def _fusion_fn(other: Tensor, stage: FusionStage, training, rng) -> Callable:
    def run(seq, scale):
        return fusion_round(seq, other, stage, training, rng, scale)

    return run
