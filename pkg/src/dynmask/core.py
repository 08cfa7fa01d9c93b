"""Content-scored sparse attention: config, mask build, forward, decode.

The mask is derived from the value rows themselves: each key gets a
per-head positive score, each query row keeps its top-w causal keys by
that score, and kept cells enter the attention logits as an additive
bias while everything else is -inf. Because whole key blocks end up
empty, the forward kernel can skip them outright; the -inf cells that
remain inside live blocks normalize to exactly zero probability, which
is what makes the skipping lossless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels, ndtensor
from .errors import (
    ConfigError,
    DegenerateRowError,
    DimensionError,
    MaskConsistencyError,
    MaskScoreOverflowError,
)

SCORE_ACTIVATIONS = ("softplus",)
DTYPES = {"f32": np.float32, "f64": np.float64}

# exp argument guard; past this the f64 score would overflow to inf
EXP_ARG_LIMIT = 700.0


@dataclass
class AttnConfig:
    """Shape and behavior knobs for one attention op.

    keep_per_row is the per-head key budget w: every query row keeps at
    most that many causal keys. block_q/block_k set the skip-tile shape.
    """

    n_heads: int
    head_dim: int
    keep_per_row: int
    d_model: Optional[int] = None
    block_q: int = 16
    block_k: int = 16
    score_activation: str = "softplus"
    dtype: str = "f64"
    use_rope: bool = False
    rope_base: float = 10000.0
    kv_heads: Optional[int] = None

    def __post_init__(self):
        if self.n_heads < 1 or self.head_dim < 1:
            raise ConfigError(f"n_heads/head_dim must be >= 1, got {self.n_heads}/{self.head_dim}")
        if self.d_model is None:
            self.d_model = self.n_heads * self.head_dim
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model must equal n_heads * head_dim, got {self.d_model} != {self.n_heads}*{self.head_dim}"
            )
        if self.keep_per_row < 1:
            raise ConfigError(f"keep_per_row must be >= 1, got {self.keep_per_row}")
        if self.block_q < 1 or self.block_k < 1:
            raise ConfigError("block sizes must be >= 1")
        if self.score_activation not in SCORE_ACTIVATIONS:
            raise ConfigError(f"score_activation must be one of {SCORE_ACTIVATIONS}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        if self.kv_heads is None:
            self.kv_heads = self.n_heads
        if self.kv_heads != self.n_heads:
            raise ConfigError("grouped kv heads are out of scope; kv_heads must equal n_heads")
        if self.use_rope and self.head_dim % 2 != 0:
            raise ConfigError("rotary positions need an even head_dim")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]


@dataclass
class AttnWeights:
    """Projection weights plus the per-head mask-score parameters.

    score_vec[h] is dotted with each value row to get the content score;
    score_gate[h] scales it inside the exp.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    w_out: np.ndarray
    score_vec: np.ndarray
    score_gate: np.ndarray


def init_weights(cfg: AttnConfig, seed: int = 0) -> AttnWeights:
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    inner = cfg.n_heads * cfg.head_dim
    dt = cfg.np_dtype

    def mat(rows, cols, fan):
        return (rng.standard_normal((rows, cols)) / math.sqrt(fan)).astype(dt)

    return AttnWeights(
        wq=mat(d, inner, d),
        wk=mat(d, inner, d),
        wv=mat(d, inner, d),
        w_out=mat(inner, d, inner),
        score_vec=(rng.standard_normal((cfg.n_heads, cfg.head_dim)) / math.sqrt(cfg.head_dim)).astype(np.float64),
        score_gate=rng.uniform(0.3, 0.8, cfg.n_heads).astype(np.float64),
    )


@dataclass
class SparseMask:
    """Per-head additive bias plus its block occupancy summary.

    bias[h, i, j] holds the key's mask score where kept and -inf where
    dropped (non-causal cells included). block_map[h, qb, kb] is True
    iff the (qb, kb) tile contains at least one kept cell, so a False
    tile can be skipped without looking at it.
    """

    bias: np.ndarray
    active_count: np.ndarray
    block_map: np.ndarray
    block_q: int
    block_k: int

    @property
    def n_heads(self) -> int:
        return self.bias.shape[0]

    @property
    def n_q(self) -> int:
        return self.bias.shape[1]

    @property
    def n_k(self) -> int:
        return self.bias.shape[2]


@dataclass
class AttnActivations:
    """Forward products kept for the backward pass and for inspection.

    probs/scores are only materialized when store_acts was set; probs is
    exactly 0.0 at every dropped cell. blocks_skipped counts tiles the
    kernel never touched out of blocks_total.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    ctx: np.ndarray
    out: np.ndarray
    probs: Optional[np.ndarray]
    scores: Optional[np.ndarray]
    row_counts: np.ndarray
    blocks_skipped: int
    blocks_total: int
    h_in: Optional[np.ndarray] = None


def rope_tables(positions: np.ndarray, head_dim: int, base: float):
    """Rotation angle tables (cos, sin), each [len(positions), head_dim/2], f64."""
    half = head_dim // 2
    inv = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = positions.astype(np.float64)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # Half-split rotation: pairs are (x[..., i], x[..., i + half]).
    half = x.shape[-1] // 2
    x64 = x.astype(np.float64, copy=False)
    x1 = x64[..., :half]
    x2 = x64[..., half:]
    out = np.empty_like(x64)
    out[..., :half] = x1 * cos - x2 * sin
    out[..., half:] = x1 * sin + x2 * cos
    return out.astype(x.dtype, copy=False)


def unapply_rope_grad(d_rot: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # Gradient through apply_rope: transpose of the rotation.
    half = d_rot.shape[-1] // 2
    d1 = d_rot[..., :half]
    d2 = d_rot[..., half:]
    out = np.empty_like(d_rot)
    out[..., :half] = d1 * cos + d2 * sin
    out[..., half:] = -d1 * sin + d2 * cos
    return out


def split_heads(flat: np.ndarray, n_heads: int, head_dim: int) -> np.ndarray:
    t = flat.shape[0]
    return np.ascontiguousarray(flat.reshape(t, n_heads, head_dim).transpose(1, 0, 2))


def merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, d = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(t, h * d))


def project_qkv(h_in: np.ndarray, weights: AttnWeights, cfg: AttnConfig, pos_offset: int = 0):
    """Project token states to per-head q/k/v, rotating q and k if configured.

    h_in: [t, d_model] in the config dtype. Returns three [n_heads, t, head_dim] arrays.
    """
    ndtensor.check_tensor(h_in, "h_in")
    if h_in.ndim != 2 or h_in.shape[1] != cfg.d_model:
        raise DimensionError(f"h_in must be [t, {cfg.d_model}], got {h_in.shape}")
    if h_in.dtype != cfg.np_dtype:
        raise DimensionError(f"h_in dtype {h_in.dtype} does not match config {cfg.dtype}")
    q = split_heads(ndtensor.matmul(h_in, weights.wq), cfg.n_heads, cfg.head_dim)
    k = split_heads(ndtensor.matmul(h_in, weights.wk), cfg.n_heads, cfg.head_dim)
    v = split_heads(ndtensor.matmul(h_in, weights.wv), cfg.n_heads, cfg.head_dim)
    if cfg.use_rope:
        pos = np.arange(pos_offset, pos_offset + h_in.shape[0], dtype=np.int64)
        cos, sin = rope_tables(pos, cfg.head_dim, cfg.rope_base)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
    return q, k, v


def concat_kv(cache: np.ndarray, new: np.ndarray) -> np.ndarray:
    """Append new key or value rows to a [n_heads, t, head_dim] cache."""
    if cache.ndim != 3 or new.ndim != 3:
        raise DimensionError("concat_kv expects [n_heads, t, head_dim] operands")
    if cache.shape[0] != new.shape[0] or cache.shape[2] != new.shape[2]:
        raise DimensionError(f"concat_kv head/dim mismatch: {cache.shape} vs {new.shape}")
    if cache.dtype != new.dtype:
        raise DimensionError(f"concat_kv dtype mismatch: {cache.dtype} vs {new.dtype}")
    return np.ascontiguousarray(np.concatenate([cache, new], axis=1))


def mask_scores(v: np.ndarray, weights: AttnWeights, cfg: AttnConfig) -> np.ndarray:
    """Per-key mask scores: exp(gate * activation(<value row, score_vec>)).

    Always computed and returned in f64; the selection and the additive
    bias both read these values. Raises if the exp argument passes the
    overflow guard.
    """
    v64 = v.astype(np.float64, copy=False)
    u = np.einsum("htd,hd->ht", v64, weights.score_vec.astype(np.float64, copy=False))
    act = ndtensor.softplus(u)
    arg = weights.score_gate.astype(np.float64, copy=False)[:, None] * act
    peak = float(np.max(arg)) if arg.size else 0.0
    if peak > EXP_ARG_LIMIT:
        raise MaskScoreOverflowError(f"mask-score exponent {peak:.3g} exceeds {EXP_ARG_LIMIT}")
    return np.exp(arg)


def build_mask(key_scores: np.ndarray, n_q: int, cfg: AttnConfig) -> SparseMask:
    """Keep each row's top-w causal keys by score; ties keep the earlier key.

    key_scores: [n_heads, n_k] f64. Query row i may see keys
    j <= (n_k - n_q) + i, so n_q == n_k is the usual causal case and
    n_q == 1 is a decode step over the whole cache.
    """
    if key_scores.ndim != 2:
        raise DimensionError(f"key_scores must be [n_heads, n_k], got {key_scores.shape}")
    n_heads, n_k = key_scores.shape
    if not (1 <= n_q <= n_k):
        raise DimensionError(f"n_q must be in [1, {n_k}], got {n_q}")
    nqb = -(-n_q // cfg.block_q)
    nkb = -(-n_k // cfg.block_k)
    w = min(cfg.keep_per_row, n_k)
    bias = np.full((n_heads, n_q, n_k), -np.inf, dtype=cfg.np_dtype)
    active = np.zeros((n_heads, n_q), dtype=np.int64)
    bmap = np.zeros((n_heads, nqb, nkb), dtype=np.bool_)
    sc = np.ascontiguousarray(key_scores, dtype=np.float64)
    kernels.build_topw_into(sc, n_q, w, cfg.block_q, cfg.block_k, bias, active, bmap)
    return SparseMask(bias=bias, active_count=active, block_map=bmap,
                      block_q=cfg.block_q, block_k=cfg.block_k)


def validate_mask(mask: SparseMask, keep_per_row: Optional[int] = None) -> None:
    """Check the structural invariants; raises MaskConsistencyError.

    Verifies causality, per-row active counts (against min(w, visible)
    when keep_per_row is given), and that block_map is True exactly for
    tiles containing a kept cell.
    """
    finite = np.isfinite(mask.bias)
    n_heads, n_q, n_k = mask.bias.shape
    offset = n_k - n_q
    rows = np.arange(n_q)
    cols = np.arange(n_k)
    beyond = cols[None, :] > (offset + rows)[:, None]
    if np.any(finite & beyond[None, :, :]):
        raise MaskConsistencyError("kept cell past the causal limit")
    counts = finite.sum(axis=2)
    if not np.array_equal(counts, mask.active_count):
        raise MaskConsistencyError("active_count disagrees with finite bias cells")
    if keep_per_row is not None:
        expect = np.minimum(keep_per_row, offset + rows + 1)[None, :]
        if not np.array_equal(counts, np.broadcast_to(expect, counts.shape)):
            raise MaskConsistencyError("active_count != min(keep_per_row, visible prefix)")
    nqb = mask.block_map.shape[1]
    nkb = mask.block_map.shape[2]
    pad_q = nqb * mask.block_q - n_q
    pad_k = nkb * mask.block_k - n_k
    padded = np.pad(finite, ((0, 0), (0, pad_q), (0, pad_k)))
    occupied = padded.reshape(n_heads, nqb, mask.block_q, nkb, mask.block_k).any(axis=(2, 4))
    if not np.array_equal(occupied, mask.block_map):
        raise MaskConsistencyError("block_map disagrees with kept-cell occupancy")


def sparse_attention_forward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: SparseMask,
    weights: AttnWeights,
    cfg: AttnConfig,
    *,
    skip_blocks: bool = True,
    store_acts: bool = True,
) -> AttnActivations:
    """Masked attention over [n_heads, t, head_dim] inputs plus the output mix.

    With skip_blocks the kernel never touches tiles whose block_map entry
    is False; the result is identical either way because dropped cells
    carry zero probability exactly.
    """
    for name, arr in (("q", q), ("k", k), ("v", v)):
        ndtensor.check_tensor(arr, name)
        if arr.ndim != 3:
            raise DimensionError(f"{name} must be [n_heads, t, head_dim], got {arr.shape}")
    n_heads, n_q, head_dim = q.shape
    n_k = k.shape[1]
    if k.shape != (n_heads, n_k, head_dim) or v.shape != (n_heads, n_k, head_dim):
        raise DimensionError(f"k/v shapes {k.shape}/{v.shape} do not match q {q.shape}")
    if mask.bias.shape != (n_heads, n_q, n_k):
        raise DimensionError(f"mask shape {mask.bias.shape} does not match ({n_heads},{n_q},{n_k})")
    nqb = mask.block_map.shape[1]
    nkb = mask.block_map.shape[2]

    qc = np.ascontiguousarray(q)
    kc = np.ascontiguousarray(k)
    vc = np.ascontiguousarray(v)
    out_heads = np.empty((n_heads, n_q, head_dim), dtype=q.dtype)
    if store_acts:
        probs = np.zeros((n_heads, n_q, n_k), dtype=q.dtype)
        scores = np.empty((n_heads, n_q, n_k), dtype=q.dtype)
    else:
        probs = np.zeros((1, 1, 1), dtype=q.dtype)
        scores = np.zeros((1, 1, 1), dtype=q.dtype)
    skip_counts = np.zeros(n_heads * nqb, dtype=np.int64)
    row_status = np.zeros((n_heads, n_q), dtype=np.int64)
    scale = 1.0 / math.sqrt(head_dim)
    kernels.attn_fwd(qc, kc, vc, mask.bias, mask.block_map, skip_blocks,
                     mask.block_q, mask.block_k, scale,
                     out_heads, probs, scores, store_acts, skip_counts, row_status)
    if np.any(row_status == 0):
        h_bad, i_bad = np.argwhere(row_status == 0)[0]
        raise DegenerateRowError(f"row {i_bad} of head {h_bad} kept no keys")
    ctx = merge_heads(out_heads)
    out = ndtensor.matmul(ctx, weights.w_out)
    return AttnActivations(
        q=qc, k=kc, v=vc, ctx=ctx, out=out,
        probs=probs if store_acts else None,
        scores=scores if store_acts else None,
        row_counts=row_status,
        blocks_skipped=int(skip_counts.sum()),
        blocks_total=n_heads * nqb * nkb,
    )


def full_forward(
    h_in: np.ndarray,
    weights: AttnWeights,
    cfg: AttnConfig,
    *,
    skip_blocks: bool = True,
    store_acts: bool = True,
):
    """Whole op on a token batch: project, score, mask, attend.

    Returns (activations, mask).
    """
    q, k, v = project_qkv(h_in, weights, cfg)
    key_scores = mask_scores(v, weights, cfg)
    mask = build_mask(key_scores, h_in.shape[0], cfg)
    acts = sparse_attention_forward(q, k, v, mask, weights, cfg,
                                    skip_blocks=skip_blocks, store_acts=store_acts)
    acts.h_in = h_in
    return acts, mask


@dataclass
class DecodeState:
    """Per-step cache: keys, values, and each key's mask score."""

    k: np.ndarray
    v: np.ndarray
    key_scores: np.ndarray
    pos: int = 0


def init_decode(cfg: AttnConfig) -> DecodeState:
    dt = cfg.np_dtype
    return DecodeState(
        k=np.zeros((cfg.n_heads, 0, cfg.head_dim), dtype=dt),
        v=np.zeros((cfg.n_heads, 0, cfg.head_dim), dtype=dt),
        key_scores=np.zeros((cfg.n_heads, 0), dtype=np.float64),
        pos=0,
    )


def decode_step(
    state: DecodeState,
    h_row: np.ndarray,
    weights: AttnWeights,
    cfg: AttnConfig,
    *,
    skip_blocks: bool = True,
):
    """Append one token and attend from it over the whole cache.

    h_row: [d_model] or [1, d_model]. Returns (out_row [d_model], new state).
    Matches the corresponding row of a batch forward over the same prefix.
    """
    if h_row.ndim == 1:
        h_row = h_row.reshape(1, -1)
    q, k_new, v_new = project_qkv(h_row, weights, cfg, pos_offset=state.pos)
    k = concat_kv(state.k, k_new)
    v = concat_kv(state.v, v_new)
    key_scores = np.concatenate([state.key_scores, mask_scores(v_new, weights, cfg)], axis=1)
    mask = build_mask(key_scores, 1, cfg)
    acts = sparse_attention_forward(q, k, v, mask, weights, cfg,
                                    skip_blocks=skip_blocks, store_acts=False)
    new_state = DecodeState(k=k, v=v, key_scores=key_scores, pos=state.pos + 1)
    return acts.out[0], new_state
