"""Cross-attention token fusion between the large- and small-patch branches.

The large branch's CLS token is projected into the small branch's width,
prepended to the small branch's patch tokens, and used as the single query
of a (multi-head) attention over that joint sequence.  The refined CLS is
projected back and handed to the large branch.  The selective variant first
calibrates both branches, scores every small-branch patch against the CLS,
and keeps only the top-K patches before attending.

All functions accept either one sequence ``[n, C]`` or a batch ``[B, n, C]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CALIBRATION_MODES = ("affine", "mlp")
RELEVANCE_MODES = ("dot", "mlp")


@dataclass
class AttentionWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        c = self.w_q.shape[0]
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            if w.shape != (c, c):
                raise ShapeError(f"attention weights must all be {c}x{c}, got {w.shape}")
        if self.heads < 1 or c % self.heads:
            raise ShapeError(f"dim divisible by heads violated: {c} % {self.heads} != 0")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-6

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


@dataclass
class FusionProjections:
    """``f`` maps the querying branch's width to the attended branch's, ``g`` maps it back."""

    f_w: Tensor
    f_b: Tensor
    g_w: Tensor
    g_b: Tensor

    def __post_init__(self):
        d_in, d_out = self.f_w.shape
        if self.g_w.shape != (d_out, d_in):
            raise ShapeError(f"projection shapes not mutually inverse: f {self.f_w.shape}, g {self.g_w.shape}")
        if self.f_b.shape != (d_out,) or self.g_b.shape != (d_in,):
            raise ShapeError("projection bias shapes do not match weights")

    def f(self, x: Tensor) -> Tensor:
        return T.linear(x, self.f_w, self.f_b)

    def g(self, x: Tensor) -> Tensor:
        return T.linear(x, self.g_w, self.g_b)


@dataclass
class CalibrationFunction:
    mode: str
    scale: Tensor | None = None
    shift: Tensor | None = None
    w1: Tensor | None = None
    b1: Tensor | None = None
    w2: Tensor | None = None
    b2: Tensor | None = None

    def __post_init__(self):
        if self.mode not in CALIBRATION_MODES:
            raise ValueError(f"unknown calibration mode {self.mode!r}")
        needed = ("scale", "shift") if self.mode == "affine" else ("w1", "b1", "w2", "b2")
        missing = [name for name in needed if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.mode} calibration missing {missing}")

    @property
    def dim(self) -> int:
        return self.scale.shape[0] if self.mode == "affine" else self.w1.shape[0]


@dataclass
class RelevanceScorer:
    mode: str = "dot"
    w1: Tensor | None = None  # [2*dim, dim]; first dim rows act on the CLS half
    b1: Tensor | None = None
    w2: Tensor | None = None  # [dim, 1]
    b2: Tensor | None = None

    def __post_init__(self):
        if self.mode not in RELEVANCE_MODES:
            raise ValueError(f"unknown relevance mode {self.mode!r}")
        if self.mode == "mlp":
            if any(p is None for p in (self.w1, self.b1, self.w2, self.b2)):
                raise ValueError("mlp relevance scorer needs w1, b1, w2, b2")
            dim = self.w1.shape[1]
            if self.w1.shape != (2 * dim, dim) or self.w2.shape != (dim, 1):
                raise ShapeError(f"mlp scorer shapes {self.w1.shape}, {self.w2.shape} inconsistent")


def _lead(x: Tensor) -> tuple[int, ...]:
    return x.shape[:-2]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, c = x.shape
    return T.swapaxes(T.reshape(x, (*lead, n, heads, c // heads)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    return T.reshape(T.swapaxes(x, -3, -2), (*lead, n, h * dk))


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int, logit_bias: Tensor | None = None):
    """Scaled dot-product attention per head; returns (merged output, weights [..., h, nq, nk])."""
    d_k = q.shape[-1] // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    logits = T.mul(T.matmul(qh, T.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(d_k))
    if logit_bias is not None:
        logits = T.add(logits, logit_bias)
    weights = T.softmax_lastdim(logits)
    return _merge_heads(T.matmul(weights, vh)), weights


def _check_seq(seq: Tensor, w: AttentionWeights) -> None:
    if seq.ndim < 2 or seq.shape[-1] != w.dim:
        raise ShapeError(f"sequence {seq.shape} does not match attention width {w.dim}")
    if seq.shape[-2] < 1:
        raise ShapeError("cross-attention needs at least the CLS row")


def concat_fusion_tokens(cls_l: Tensor, patches_s: Tensor, proj: FusionProjections) -> Tensor:
    if cls_l.shape[-1] != proj.f_w.shape[0] or patches_s.shape[-1] != proj.f_w.shape[1]:
        raise ShapeError(
            f"fusion tokens {cls_l.shape}/{patches_s.shape} do not match projection {proj.f_w.shape}"
        )
    return T.concat_rows(proj.f(cls_l), patches_s)


def cross_attention(seq: Tensor, w: AttentionWeights) -> Tensor:
    """Single-head cross-attention with row 0 as the query; keys/values include the CLS row."""
    if w.heads != 1:
        raise ValueError("cross_attention is single-head; use multi_head_cross_attention")
    _check_seq(seq, w)
    q = T.matmul(T.slice_rows(seq, 0, 1), w.w_q)
    out, _ = _attend(q, T.matmul(seq, w.w_k), T.matmul(seq, w.w_v), 1)
    return out


def multi_head_cross_attention(
    seq: Tensor,
    w: AttentionWeights,
    logit_bias: Tensor | None = None,
    return_weights: bool = False,
):
    """Row-0 query over ``seq`` in ``w.heads`` channel slices, concatenated then mixed by ``w_o``."""
    _check_seq(seq, w)
    q = T.matmul(T.slice_rows(seq, 0, 1), w.w_q)
    heads_out, weights = _attend(q, T.matmul(seq, w.w_k), T.matmul(seq, w.w_v), w.heads, logit_bias)
    out = T.matmul(heads_out, w.w_o)
    return (out, weights) if return_weights else out


def self_attention(x: Tensor, w: AttentionWeights) -> Tensor:
    """Ordinary multi-head self-attention (every row queries), used by the encoder blocks."""
    if x.shape[-1] != w.dim:
        raise ShapeError(f"sequence {x.shape} does not match attention width {w.dim}")
    out, _ = _attend(T.matmul(x, w.w_q), T.matmul(x, w.w_k), T.matmul(x, w.w_v), w.heads)
    return T.matmul(out, w.w_o)


def _refine(
    fcls: Tensor,
    seq: Tensor,
    proj: FusionProjections,
    w: AttentionWeights,
    ln: LayerNormParams,
    logit_bias: Tensor | None,
    residual_scale: float,
    dropout_p: float,
    training: bool,
    rng,
) -> Tensor:
    delta = multi_head_cross_attention(ln(seq), w, logit_bias)
    delta = T.dropout(delta, dropout_p, training, rng)
    if residual_scale != 1.0:
        delta = T.mul(delta, residual_scale)
    return proj.g(T.add(fcls, delta))


def fuse_block(
    cls_l: Tensor,
    patches_s: Tensor,
    proj: FusionProjections,
    w: AttentionWeights,
    ln: LayerNormParams,
    *,
    residual_scale: float = 1.0,
    dropout_p: float = 0.0,
    training: bool = False,
    rng=None,
) -> Tensor:
    """Refined, back-projected CLS: ``g(f(cls) + MCA(LN([f(cls) | patches])))``."""
    fcls = proj.f(cls_l)
    seq = concat_fusion_tokens(cls_l, patches_s, proj)
    return _refine(fcls, seq, proj, w, ln, None, residual_scale, dropout_p, training, rng)


def calibrate(seq: Tensor, c: CalibrationFunction) -> Tensor:
    if seq.shape[-1] != c.dim:
        raise ShapeError(f"calibration width {c.dim} does not match tokens {seq.shape}")
    if c.mode == "affine":
        return T.add(T.mul(seq, c.scale), c.shift)
    hidden = T.gelu(T.linear(seq, c.w1, c.b1))
    return T.linear(hidden, c.w2, c.b2)


def relevance_scores(cls: Tensor, patches: Tensor, scorer: RelevanceScorer) -> Tensor:
    """One raw score per patch token, shape ``[..., n]``."""
    dim = cls.shape[-1]
    if patches.shape[-1] != dim or cls.shape[-2] != 1:
        raise ShapeError(f"relevance: cls {cls.shape} vs patches {patches.shape}")
    n = patches.shape[-2]
    if scorer.mode == "dot":
        raw = T.matmul(patches, T.swapaxes(cls, -1, -2))
        return T.reshape(T.mul(raw, 1.0 / math.sqrt(dim)), (*_lead(patches), n))
    if scorer.w1.shape[1] != dim:
        raise ShapeError(f"relevance scorer width {scorer.w1.shape[1]} does not match tokens {dim}")
    # linear on [cls | patch] split into its two halves
    pre = T.add(
        T.matmul(patches, T.slice_rows(scorer.w1, dim, 2 * dim)),
        T.matmul(cls, T.slice_rows(scorer.w1, 0, dim)),
    )
    hidden = T.gelu(T.add(pre, scorer.b1))
    return T.reshape(T.linear(hidden, scorer.w2, scorer.b2), (*_lead(patches), n))


def keep_count(n: int, keep_ratio: float) -> int:
    """K = max(1, round(keep_ratio * n)), rounding halves up."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    return min(n, max(1, int(math.floor(keep_ratio * n + 0.5))))


def top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Original row positions (CLS = 0) kept by top-K, in ascending order.

    Ties go to the lower patch index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"K must be in [1, {n}], got {k}")
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    patches = np.sort(order, axis=-1) + 1
    cls = np.zeros(scores.shape[:-1] + (1,), dtype=np.int64)
    return np.concatenate([cls, patches], axis=-1)


def select_top_k(seq_with_cls: Tensor, scores, k: int) -> tuple[Tensor, np.ndarray]:
    """Keep the CLS row and the ``k`` best-scoring patch rows, preserving their order."""
    score_data = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    n = seq_with_cls.shape[-2] - 1
    if score_data.shape != seq_with_cls.shape[:-2] + (n,):
        raise ShapeError(f"scores {score_data.shape} do not align with sequence {seq_with_cls.shape}")
    rows = top_k_rows(score_data, k)
    if k == n:
        return seq_with_cls, rows
    return T.gather_rows(seq_with_cls, rows), rows


def _selected_score_bias(scores: Tensor, rows: np.ndarray) -> Tensor:
    """Attention-logit bias ``[..., 1, 1, K+1]``: 0 for CLS, the raw score for each kept patch."""
    lead = scores.shape[:-1]
    n = scores.shape[-1]
    kept = T.gather_rows(T.reshape(scores, (*lead, n, 1)), rows[..., 1:] - 1)
    column = T.concat_rows(Tensor(np.zeros((*lead, 1, 1))), kept)
    return T.reshape(column, (*lead, 1, 1, column.shape[-2]))


def selective_cross_attention(
    cls_l: Tensor,
    patches_s: Tensor,
    proj: FusionProjections,
    c_l: CalibrationFunction,
    c_s: CalibrationFunction,
    scorer: RelevanceScorer,
    k: int,
    w: AttentionWeights,
    ln: LayerNormParams,
    *,
    residual_scale: float = 1.0,
    dropout_p: float = 0.0,
    training: bool = False,
    rng=None,
    return_rows: bool = False,
):
    """Calibrate, score, keep the top-``k`` patches, then fuse as in :func:`fuse_block`.

    In ``mlp`` relevance mode the kept patches' scores are also added to their
    attention logits, which is what lets the scorer learn; ``dot`` mode leaves
    the attention untouched.
    """
    cal_cls = calibrate(cls_l, c_l)
    cal_patches = calibrate(patches_s, c_s)
    fcls = proj.f(cal_cls)
    seq = concat_fusion_tokens(cal_cls, cal_patches, proj)
    scores = relevance_scores(fcls, cal_patches, scorer)
    selected, rows = select_top_k(seq, scores, k)
    bias = _selected_score_bias(scores, rows) if scorer.mode == "mlp" else None
    out = _refine(fcls, selected, proj, w, ln, bias, residual_scale, dropout_p, training, rng)
    return (out, rows) if return_rows else out
