"""Hand-derived backward pass and the skip-safety audit.

Gradients are always computed and returned in f64 regardless of the
forward storage dtype. The attention-internal part recomputes row
probabilities from q/k/bias (nothing quadratic is stored), then chains
the per-key bias gradient through the mask-score path. The top-w
selection itself is treated as a constant of the backward pass: dropped
cells carry exactly zero probability, so they contribute exactly zero
gradient, which is what grad_skip_audit demonstrates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels, ndtensor
from .core import (
    AttnActivations,
    AttnConfig,
    AttnWeights,
    SparseMask,
    merge_heads,
    rope_tables,
    unapply_rope_grad,
)
from .errors import DimensionError


@dataclass
class GradBundle:
    """Parameter and input gradients for one attention op, all f64."""

    d_wq: np.ndarray
    d_wk: np.ndarray
    d_wv: np.ndarray
    d_w_out: np.ndarray
    d_score_vec: np.ndarray
    d_score_gate: np.ndarray
    d_h_in: np.ndarray


def _f64c(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def attention_core_grads(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: SparseMask,
    d_ctx_heads: np.ndarray,
    *,
    skip_blocks: bool = True,
):
    """Gradients of the attention kernel itself, given d(out) per head.

    d_ctx_heads: [n_heads, n_q, head_dim] f64. Returns
    (d_q, d_k, d_v, d_bias_key, audit_max) where d_bias_key[h, j] sums
    the score gradient over every row that kept key j.
    """
    n_heads, n_q, head_dim = q.shape
    n_k = k.shape[1]
    d_q = np.zeros((n_heads, n_q, head_dim), dtype=np.float64)
    d_k = np.zeros((n_heads, n_k, head_dim), dtype=np.float64)
    d_v = np.zeros((n_heads, n_k, head_dim), dtype=np.float64)
    d_bias_key = np.zeros((n_heads, n_k), dtype=np.float64)
    audit_max = np.zeros(n_heads, dtype=np.float64)
    scale = 1.0 / math.sqrt(head_dim)
    kernels.attn_bwd(
        np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v),
        mask.bias, mask.block_map, _f64c(d_ctx_heads), skip_blocks,
        mask.block_q, mask.block_k, scale,
        d_q, d_k, d_v, d_bias_key, audit_max,
    )
    return d_q, d_k, d_v, d_bias_key, audit_max


def backward(
    h_in: np.ndarray,
    weights: AttnWeights,
    cfg: AttnConfig,
    acts: AttnActivations,
    mask: SparseMask,
    d_out: np.ndarray,
    *,
    skip_blocks: bool = True,
) -> GradBundle:
    """Full backward through projection, scoring, masking, and attention.

    acts/mask must come from the matching forward over h_in. d_out is
    the loss gradient at the op output, [t, d_model].
    """
    if h_in.ndim != 2 or h_in.shape[1] != cfg.d_model:
        raise DimensionError(f"h_in must be [t, {cfg.d_model}], got {h_in.shape}")
    if d_out.shape != acts.out.shape:
        raise DimensionError(f"d_out shape {d_out.shape} != out shape {acts.out.shape}")
    t = h_in.shape[0]

    d_out64 = _f64c(d_out)
    ctx64 = _f64c(acts.ctx)
    w_out64 = _f64c(weights.w_out)
    d_ctx = ndtensor.matmul(d_out64, _f64c(w_out64.T))
    d_w_out = ndtensor.matmul(_f64c(ctx64.T), d_out64)

    d_heads = np.ascontiguousarray(
        d_ctx.reshape(t, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)
    )
    d_q, d_k, d_v, d_bias_key, _ = attention_core_grads(
        acts.q, acts.k, acts.v, mask, d_heads, skip_blocks=skip_blocks
    )

    # Mask-score chain: bias cells carry exp(gate * act(<v, vec>)) of their key.
    v64 = _f64c(acts.v)
    vec64 = weights.score_vec.astype(np.float64, copy=False)
    gate64 = weights.score_gate.astype(np.float64, copy=False)
    u = np.einsum("htd,hd->ht", v64, vec64)
    act = ndtensor.softplus(u)
    key_scores = np.exp(gate64[:, None] * act)
    g = d_bias_key * key_scores
    d_score_gate = np.einsum("ht,ht->h", g, act)
    d_u = g * gate64[:, None] * ndtensor.sigmoid(u)
    d_score_vec = np.einsum("ht,htd->hd", d_u, v64)
    d_v = d_v + d_u[:, :, None] * vec64[:, None, :]

    if cfg.use_rope:
        pos = np.arange(t, dtype=np.int64)
        cos, sin = rope_tables(pos, cfg.head_dim, cfg.rope_base)
        d_q = unapply_rope_grad(d_q, cos, sin)
        d_k = unapply_rope_grad(d_k, cos, sin)

    d_qf = merge_heads(d_q)
    d_kf = merge_heads(d_k)
    d_vf = merge_heads(d_v)
    h64 = _f64c(h_in)
    h64_t = _f64c(h64.T)
    d_wq = ndtensor.matmul(h64_t, d_qf)
    d_wk = ndtensor.matmul(h64_t, d_kf)
    d_wv = ndtensor.matmul(h64_t, d_vf)
    d_h_in = ndtensor.matmul(d_qf, _f64c(weights.wq.T))
    d_h_in += ndtensor.matmul(d_kf, _f64c(weights.wk.T))
    d_h_in += ndtensor.matmul(d_vf, _f64c(weights.wv.T))

    return GradBundle(
        d_wq=d_wq, d_wk=d_wk, d_wv=d_wv, d_w_out=d_w_out,
        d_score_vec=d_score_vec, d_score_gate=d_score_gate, d_h_in=d_h_in,
    )


@dataclass
class SkipAuditReport:
    """Exact comparison of the skipping and non-skipping backward paths.

    All fields must be exactly 0.0 for passed to be True: the dropped
    cells' probabilities are exact zeros, so skipping their blocks can
    not change any gradient, and their own score gradients vanish.
    """

    max_diff_d_q: float
    max_diff_d_k: float
    max_diff_d_v: float
    max_diff_d_bias: float
    masked_dscore_max: float
    masked_dk_max: float
    passed: bool

    def as_dict(self) -> dict:
        return {
            "max_diff_d_q": self.max_diff_d_q,
            "max_diff_d_k": self.max_diff_d_k,
            "max_diff_d_v": self.max_diff_d_v,
            "max_diff_d_bias": self.max_diff_d_bias,
            "masked_dscore_max": self.masked_dscore_max,
            "masked_dk_max": self.masked_dk_max,
            "passed": self.passed,
        }


def grad_skip_audit(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: SparseMask,
    d_ctx_heads: np.ndarray,
) -> SkipAuditReport:
    """Run the backward kernel with and without block skipping and diff them.

    The non-skipping run also materializes the score gradient at every
    dropped cell (masked_dscore_max) and the report checks that keys no
    row kept received exactly zero d_k.
    """
    skip = attention_core_grads(q, k, v, mask, d_ctx_heads, skip_blocks=True)
    full = attention_core_grads(q, k, v, mask, d_ctx_heads, skip_blocks=False)
    diffs = [float(np.max(np.abs(a - b))) if a.size else 0.0 for a, b in zip(skip[:4], full[:4])]
    masked_dscore_max = float(np.max(full[4])) if full[4].size else 0.0
    col_kept = np.isfinite(mask.bias).any(axis=1)
    if np.all(col_kept):
        masked_dk_max = 0.0
    else:
        masked_dk_max = float(np.max(np.abs(full[1][~col_kept, :])))
    passed = (
        all(d == 0.0 for d in diffs)
        and masked_dscore_max == 0.0
        and masked_dk_max == 0.0
    )
    return SkipAuditReport(
        max_diff_d_q=diffs[0], max_diff_d_k=diffs[1], max_diff_d_v=diffs[2],
        max_diff_d_bias=diffs[3], masked_dscore_max=masked_dscore_max,
        masked_dk_max=masked_dk_max, passed=passed,
    )
