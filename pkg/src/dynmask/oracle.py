"""Independent reference implementations used only to check the real ones.

Everything here is deliberately written against the production modules:
full dense tensors, numpy einsum (no BLAS threading, no custom kernels),
argsort instead of heaps, and a scalar-loop twin that validates the
dense path itself. Keep it slow and obvious.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np

from .core import AttnConfig, AttnWeights
from .errors import DimensionError


def brute_force_topw(scores_row: np.ndarray, w: int, prefix_len: int) -> np.ndarray:
    """Indices of the top-w entries among scores_row[:prefix_len].

    Ties go to the smaller index. Returned sorted ascending.
    """
    if prefix_len < 1 or prefix_len > scores_row.shape[0]:
        raise DimensionError(f"prefix_len {prefix_len} out of range")
    order = np.argsort(-scores_row[:prefix_len], kind="stable")
    return np.sort(order[: min(w, prefix_len)])


def dense_mask_bias(key_scores: np.ndarray, n_q: int, w: int) -> np.ndarray:
    """Reference bias tensor [n_heads, n_q, n_k] built row by row."""
    n_heads, n_k = key_scores.shape
    offset = n_k - n_q
    bias = np.full((n_heads, n_q, n_k), -np.inf, dtype=np.float64)
    for h in range(n_heads):
        for i in range(n_q):
            kept = brute_force_topw(key_scores[h], w, offset + i + 1)
            bias[h, i, kept] = key_scores[h, kept]
    return bias


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _rope(x, base):
    t, half2 = x.shape[-2], x.shape[-1]
    half = half2 // 2
    ang = np.arange(t, dtype=np.float64)[:, None] * base ** (
        -np.arange(half, dtype=np.float64) * 2.0 / half2
    )
    c, s = np.cos(ang), np.sin(ang)
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


@dataclass
class DenseResult:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    key_scores: np.ndarray
    bias: np.ndarray
    scores: np.ndarray
    probs: np.ndarray
    ctx: np.ndarray
    out: np.ndarray


def dense_forward(h_in: np.ndarray, weights: AttnWeights, cfg: AttnConfig) -> DenseResult:
    """Full-tensor f64 forward with no block logic anywhere."""
    h64 = h_in.astype(np.float64)
    t = h64.shape[0]
    H, dh = cfg.n_heads, cfg.head_dim

    def proj(wm):
        flat = np.einsum("td,dc->tc", h64, wm.astype(np.float64))
        return flat.reshape(t, H, dh).transpose(1, 0, 2)

    q, k, v = proj(weights.wq), proj(weights.wk), proj(weights.wv)
    if cfg.use_rope:
        q = _rope(q, cfg.rope_base)
        k = _rope(k, cfg.rope_base)

    u = np.einsum("htd,hd->ht", v, weights.score_vec.astype(np.float64))
    key_scores = np.exp(weights.score_gate.astype(np.float64)[:, None] * _softplus(u))
    bias = dense_mask_bias(key_scores, t, cfg.keep_per_row)

    scores = np.einsum("hid,hjd->hij", q, k) / math.sqrt(dh) + bias
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(np.where(np.isneginf(scores), -np.inf, scores - m))
    probs = e / np.sum(e, axis=-1, keepdims=True)
    ctx_heads = np.einsum("hij,hjd->hid", probs, v)
    ctx = ctx_heads.transpose(1, 0, 2).reshape(t, H * dh)
    out = np.einsum("tc,cd->td", ctx, weights.w_out.astype(np.float64))
    return DenseResult(q=q, k=k, v=v, key_scores=key_scores, bias=bias,
                       scores=scores, probs=probs, ctx=ctx, out=out)


def dense_forward_scalar(h_in: np.ndarray, weights: AttnWeights, cfg: AttnConfig) -> np.ndarray:
    """Pure-python-loop twin of dense_forward's output. Tiny shapes only."""
    h64 = h_in.astype(np.float64)
    t = h64.shape[0]
    H, dh = cfg.n_heads, cfg.head_dim
    inner = H * dh

    def proj(wm):
        wm = wm.astype(np.float64)
        flat = [[sum(h64[i][p] * wm[p][c] for p in range(cfg.d_model)) for c in range(inner)]
                for i in range(t)]
        arr = np.array(flat)
        return arr.reshape(t, H, dh).transpose(1, 0, 2)

    q, k, v = proj(weights.wq), proj(weights.wk), proj(weights.wv)
    if cfg.use_rope:
        q = _rope(q, cfg.rope_base)
        k = _rope(k, cfg.rope_base)

    vec = weights.score_vec.astype(np.float64)
    gate = weights.score_gate.astype(np.float64)
    key_scores = np.zeros((H, t))
    for h in range(H):
        for j in range(t):
            uhj = sum(v[h][j][d] * vec[h][d] for d in range(dh))
            key_scores[h, j] = math.exp(gate[h] * math.log1p(math.exp(-abs(uhj))) + gate[h] * max(uhj, 0.0))

    out = np.zeros((t, cfg.d_model))
    ctx = np.zeros((t, inner))
    for h in range(H):
        for i in range(t):
            kept = brute_force_topw(key_scores[h], cfg.keep_per_row, i + 1)
            logits = {}
            for j in kept:
                s = sum(q[h][i][d] * k[h][j][d] for d in range(dh)) / math.sqrt(dh)
                logits[j] = s + key_scores[h, j]
            m = max(logits.values())
            es = {j: math.exp(s - m) for j, s in logits.items()}
            z = sum(es.values())
            for d in range(dh):
                ctx[i, h * dh + d] = sum(es[j] * v[h][j][d] for j in kept) / z
    w_out = weights.w_out.astype(np.float64)
    for i in range(t):
        for c in range(cfg.d_model):
            out[i, c] = sum(ctx[i, p] * w_out[p, c] for p in range(inner))
    return out


def finite_diff_grad(
    f: Callable[[Dict[str, np.ndarray]], float],
    params: Dict[str, np.ndarray],
    step: float = 1e-6,
) -> Dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of named f64 arrays."""
    grads = {}
    for name, arr in params.items():
        if arr.dtype != np.float64:
            raise DimensionError(f"finite_diff_grad needs f64 params, {name} is {arr.dtype}")
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.shape[0]):
            keep = flat[idx]
            flat[idx] = keep + step
            fp = f(params)
            flat[idx] = keep - step
            fm = f(params)
            flat[idx] = keep
            gflat[idx] = (fp - fm) / (2.0 * step)
        grads[name] = g
    return grads
