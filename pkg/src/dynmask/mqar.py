"""Multi-query associative recall at desk scale.

Generates key-value recall sequences, trains a tiny pre-norm
transformer on them with the content-masked sparse attention (or a
dense / sliding-window baseline), and evaluates exact-match accuracy at
the query positions. Everything trains in f64 through the same kernels
the single-sequence ops use; the batch is folded into the head axis so
the attention kernels never see a batch dimension.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import kernels, ndtensor
from .core import (
    AttnConfig,
    AttnWeights,
    SparseMask,
    apply_rope,
    build_mask,
    rope_tables,
    unapply_rope_grad,
)
from .errors import (
    CapacityError,
    CheckpointFormatError,
    ConfigError,
    DimensionError,
    MaskScoreOverflowError,
    TrainingDivergedError,
)

ATTN_VARIANTS = ("dynamic", "dense", "window")
OPTIMIZERS = ("sgd", "adamw-lite")

RMS_EPS = 1e-6
EXP_ARG_LIMIT = 700.0


# ---------------------------------------------------------------------------
# Task spec and data generation


@dataclass
class MqarSpec:
    """Recall task shape: planted key-value pairs, later re-queried keys.

    The vocab splits into three disjoint ranges (keys, values, noise).
    Each sequence interleaves num_pairs distinct keys with distinct
    values in its head, then re-asks num_queries of those keys; the
    target at a query position is the queried key's value. Remaining
    slots hold random noise tokens, or one fixed filler when noise_fill
    is off. queries_at_end packs the queries into the tail block, which
    is also what puts them outside a small sliding window.
    """

    vocab_size: int = 64
    num_pairs: int = 8
    num_queries: int = 8
    seq_len: int = 64
    num_train: int = 2048
    num_test: int = 256
    noise_fill: bool = True
    queries_at_end: bool = True
    seed: int = 0

    def __post_init__(self):
        third = self.vocab_size // 3
        if third < 1:
            raise CapacityError(f"vocab_size {self.vocab_size} too small to split into ranges")
        if self.num_pairs < 1:
            raise CapacityError("num_pairs must be >= 1")
        if self.num_pairs > third:
            raise CapacityError(
                f"num_pairs {self.num_pairs} exceeds the {third} distinct keys/values available"
            )
        if not (1 <= self.num_queries <= self.num_pairs):
            raise CapacityError(
                f"num_queries must be in [1, num_pairs], got {self.num_queries}"
            )
        if self.seq_len < 2 * self.num_pairs + self.num_queries:
            raise CapacityError(
                f"seq_len {self.seq_len} < 2*{self.num_pairs} + {self.num_queries}"
            )

    @property
    def key_range(self) -> Tuple[int, int]:
        third = self.vocab_size // 3
        return 0, third

    @property
    def value_range(self) -> Tuple[int, int]:
        third = self.vocab_size // 3
        return third, 2 * third

    @property
    def noise_range(self) -> Tuple[int, int]:
        third = self.vocab_size // 3
        return 2 * third, self.vocab_size


@dataclass
class MqarSplit:
    tokens: np.ndarray
    target_pos: np.ndarray
    target_tok: np.ndarray

    @property
    def n(self) -> int:
        return self.tokens.shape[0]


@dataclass
class MqarData:
    spec: MqarSpec
    train: MqarSplit
    test: MqarSplit


def _sample_without_replacement(rng, n_rows, pool, take):
    # Row-wise distinct draws via random-key argsort (vectorized).
    order = np.argsort(rng.random((n_rows, pool)), axis=1, kind="stable")
    return order[:, :take]


def _generate_split(spec: MqarSpec, rng, n: int) -> MqarSplit:
    P, Q, L = spec.num_pairs, spec.num_queries, spec.seq_len
    klo, khi = spec.key_range
    vlo, vhi = spec.value_range
    nlo, nhi = spec.noise_range

    keys = klo + _sample_without_replacement(rng, n, khi - klo, P)
    vals = vlo + _sample_without_replacement(rng, n, vhi - vlo, P)

    if spec.noise_fill:
        tokens = rng.integers(nlo, nhi, size=(n, L), dtype=np.int64)
    else:
        tokens = np.full((n, L), nlo, dtype=np.int64)
    tokens[:, 0 : 2 * P : 2] = keys
    tokens[:, 1 : 2 * P + 1 : 2] = vals

    which = _sample_without_replacement(rng, n, P, Q)
    if spec.queries_at_end:
        qpos = np.broadcast_to(np.arange(L - Q, L, dtype=np.int64), (n, Q)).copy()
    else:
        qpos = 2 * P + np.sort(_sample_without_replacement(rng, n, L - 2 * P, Q), axis=1)
    rows = np.arange(n)[:, None]
    qkeys = keys[rows, which]
    qvals = vals[rows, which]
    tokens[rows, qpos] = qkeys
    return MqarSplit(tokens=tokens, target_pos=qpos, target_tok=qvals)


def generate_mqar(spec: MqarSpec) -> MqarData:
    """Deterministic train/test splits for the given spec and seed."""
    rng = np.random.default_rng(spec.seed)
    train = _generate_split(spec, rng, spec.num_train)
    test = _generate_split(spec, rng, spec.num_test)
    return MqarData(spec=spec, train=train, test=test)


# ---------------------------------------------------------------------------
# Tiny pre-norm transformer


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    keep_per_row: int = 16
    mlp_hidden: int = 128
    attn_variant: str = "dynamic"
    window: int = 16
    block_q: int = 16
    block_k: int = 16
    use_rope: bool = True
    rope_base: float = 10000.0
    tie_output: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.attn_variant not in ATTN_VARIANTS:
            raise ConfigError(f"attn_variant must be one of {ATTN_VARIANTS}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.window < 1:
            raise ConfigError("window must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def attn_config(self) -> AttnConfig:
        return AttnConfig(
            n_heads=self.n_heads,
            head_dim=self.head_dim,
            keep_per_row=self.keep_per_row,
            block_q=self.block_q,
            block_k=self.block_k,
            dtype="f64",
            use_rope=self.use_rope,
            rope_base=self.rope_base,
        )


@dataclass
class LayerWeights:
    attn: AttnWeights
    norm_attn: np.ndarray
    norm_mlp: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class TinyModel:
    cfg: ModelConfig
    embed: np.ndarray
    layers: List[LayerWeights]
    norm_out: np.ndarray
    head: Optional[np.ndarray]


def build_model(cfg: ModelConfig) -> TinyModel:
    rng = np.random.default_rng(cfg.seed)
    d, hid, V = cfg.d_model, cfg.mlp_hidden, cfg.vocab_size
    H, dh = cfg.n_heads, cfg.head_dim

    def mat(rows, cols, fan):
        return rng.standard_normal((rows, cols)) / math.sqrt(fan)

    layers = []
    for _ in range(cfg.n_layers):
        attn = AttnWeights(
            wq=mat(d, H * dh, d),
            wk=mat(d, H * dh, d),
            wv=mat(d, H * dh, d),
            w_out=mat(H * dh, d, H * dh),
            score_vec=rng.standard_normal((H, dh)) / math.sqrt(dh),
            score_gate=rng.uniform(0.2, 0.8, H),
        )
        layers.append(LayerWeights(
            attn=attn,
            norm_attn=np.ones(d),
            norm_mlp=np.ones(d),
            w1=mat(d, hid, d),
            b1=np.zeros(hid),
            w2=mat(hid, d, hid),
            b2=np.zeros(d),
        ))
    head = None if cfg.tie_output else mat(d, V, d)
    # tied head: logits are <x, embed_row> with rms(x)=1 after the output
    # norm, so unit-variance rows would start logits at std sqrt(d)
    return TinyModel(
        cfg=cfg,
        embed=rng.standard_normal((V, d)) / math.sqrt(d),
        layers=layers,
        norm_out=np.ones(d),
        head=head,
    )


def param_dict(model: TinyModel) -> Dict[str, np.ndarray]:
    """Named parameters in a fixed order; arrays are the live ones."""
    out = {"embed": model.embed}
    for i, lw in enumerate(model.layers):
        p = f"layers.{i}."
        out[p + "attn.wq"] = lw.attn.wq
        out[p + "attn.wk"] = lw.attn.wk
        out[p + "attn.wv"] = lw.attn.wv
        out[p + "attn.w_out"] = lw.attn.w_out
        out[p + "attn.score_vec"] = lw.attn.score_vec
        out[p + "attn.score_gate"] = lw.attn.score_gate
        out[p + "norm_attn"] = lw.norm_attn
        out[p + "norm_mlp"] = lw.norm_mlp
        out[p + "w1"] = lw.w1
        out[p + "b1"] = lw.b1
        out[p + "w2"] = lw.w2
        out[p + "b2"] = lw.b2
    out["norm_out"] = model.norm_out
    if model.head is not None:
        out["head"] = model.head
    return out


def set_params(model: TinyModel, values: Dict[str, np.ndarray]) -> None:
    live = param_dict(model)
    if set(live) != set(values):
        raise CheckpointFormatError(
            f"parameter names mismatch: {sorted(set(live) ^ set(values))}"
        )
    for name, arr in live.items():
        src = values[name]
        if src.shape != arr.shape:
            raise CheckpointFormatError(f"{name}: shape {src.shape} != {arr.shape}")
        arr[...] = src


# ---------------------------------------------------------------------------
# Forward/backward plumbing (batch folded into the head axis)


def _rms_norm(x, g):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    xhat = x / r
    return xhat * g, xhat, r


def _rms_norm_bwd(dy, g, xhat, r):
    dxhat = dy * g
    dg = np.einsum("bld,bld->d", dy, xhat)
    dx = (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)) / r
    return dx, dg


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _gelu(x):
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _gelu_bwd(x, dy):
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _fold_heads(flat, B, L, H, dh):
    # [B*L, H*dh] -> [B*H, L, dh]
    return np.ascontiguousarray(
        flat.reshape(B, L, H, dh).transpose(0, 2, 1, 3).reshape(B * H, L, dh)
    )


def _unfold_heads(x, B, L, H, dh):
    # [B*H, L, dh] -> [B*L, H*dh]
    return np.ascontiguousarray(
        x.reshape(B, H, L, dh).transpose(0, 2, 1, 3).reshape(B * L, H * dh)
    )


def _static_bias_row(L, window):
    # Causal (optionally windowed) [1, L, L] bias with 0.0 on kept cells.
    i = np.arange(L)[:, None]
    j = np.arange(L)[None, :]
    keep = j <= i
    if window is not None:
        keep &= j > i - window
    bias = np.where(keep, 0.0, -np.inf)[None, :, :]
    return bias, keep


def _static_mask(L, window, cfg: ModelConfig, copies: int) -> SparseMask:
    bias1, keep = _static_bias_row(L, window)
    bias = np.ascontiguousarray(np.broadcast_to(bias1, (copies, L, L)))
    nqb = -(-L // cfg.block_q)
    nkb = -(-L // cfg.block_k)
    pad_q = nqb * cfg.block_q - L
    pad_k = nkb * cfg.block_k - L
    padded = np.pad(keep, ((0, pad_q), (0, pad_k)))
    bmap1 = padded.reshape(nqb, cfg.block_q, nkb, cfg.block_k).any(axis=(1, 3))
    bmap = np.ascontiguousarray(np.broadcast_to(bmap1[None], (copies, nqb, nkb)))
    active = np.ascontiguousarray(
        np.broadcast_to(keep.sum(axis=1)[None, :], (copies, L)).astype(np.int64)
    )
    return SparseMask(bias=bias, active_count=active, block_map=bmap,
                      block_q=cfg.block_q, block_k=cfg.block_k)


def _folded_score_params(lw: LayerWeights, B: int):
    vec = np.tile(lw.attn.score_vec, (B, 1))
    gate = np.tile(lw.attn.score_gate, B)
    return vec, gate


def _attn_layer_fwd(xn, lw: LayerWeights, mcfg: ModelConfig, *, skip_blocks=True):
    """One attention block over [B, L, d]. Returns (mix output, tape)."""
    B, L, d = xn.shape
    H, dh = mcfg.n_heads, mcfg.head_dim
    flat = np.ascontiguousarray(xn.reshape(B * L, d))
    q = _fold_heads(ndtensor.matmul(flat, lw.attn.wq), B, L, H, dh)
    k = _fold_heads(ndtensor.matmul(flat, lw.attn.wk), B, L, H, dh)
    v = _fold_heads(ndtensor.matmul(flat, lw.attn.wv), B, L, H, dh)
    cos = sin = None
    if mcfg.use_rope:
        cos, sin = rope_tables(np.arange(L, dtype=np.int64), dh, mcfg.rope_base)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)

    acfg = mcfg.attn_config()
    if mcfg.attn_variant == "dynamic":
        vec, gate = _folded_score_params(lw, B)
        u = np.einsum("htd,hd->ht", v, vec)
        act = ndtensor.softplus(u)
        arg = gate[:, None] * act
        peak = float(np.max(arg)) if arg.size else 0.0
        if peak > EXP_ARG_LIMIT:
            raise MaskScoreOverflowError(f"mask-score exponent {peak:.3g} exceeds {EXP_ARG_LIMIT}")
        key_scores = np.exp(arg)
        mask = build_mask(key_scores, L, acfg)
    else:
        window = mcfg.window if mcfg.attn_variant == "window" else None
        mask = _static_mask(L, window, mcfg, B * H)
        u = act = key_scores = None

    nqb = mask.block_map.shape[1]
    nkb = mask.block_map.shape[2]
    out_heads = np.empty((B * H, L, dh), dtype=np.float64)
    dummy = np.zeros((1, 1, 1), dtype=np.float64)
    skip_counts = np.zeros(B * H * nqb, dtype=np.int64)
    row_status = np.zeros((B * H, L), dtype=np.int64)
    kernels.attn_fwd(q, k, v, mask.bias, mask.block_map, skip_blocks,
                     mask.block_q, mask.block_k, 1.0 / math.sqrt(dh),
                     out_heads, dummy, dummy, False, skip_counts, row_status)
    ctx = _unfold_heads(out_heads, B, L, H, dh)
    mix = ndtensor.matmul(ctx, lw.attn.w_out).reshape(B, L, d)
    tape = {
        "flat": flat, "q": q, "k": k, "v": v, "cos": cos, "sin": sin,
        "mask": mask, "ctx": ctx, "u": u, "act": act, "key_scores": key_scores,
        "skip_blocks": skip_blocks,
    }
    return mix, tape


def _attn_layer_bwd(d_mix, lw: LayerWeights, mcfg: ModelConfig, tape, grads, prefix):
    B, L, d = d_mix.shape
    H, dh = mcfg.n_heads, mcfg.head_dim
    mask: SparseMask = tape["mask"]
    d_mix_flat = np.ascontiguousarray(d_mix.reshape(B * L, d))
    grads[prefix + "attn.w_out"] += ndtensor.matmul(
        np.ascontiguousarray(tape["ctx"].T), d_mix_flat
    )
    d_ctx = ndtensor.matmul(d_mix_flat, np.ascontiguousarray(lw.attn.w_out.T))
    d_heads = _fold_heads(d_ctx, B, L, H, dh)

    q, k, v = tape["q"], tape["k"], tape["v"]
    d_q = np.zeros_like(q)
    d_k = np.zeros_like(k)
    d_v = np.zeros_like(v)
    d_bias_key = np.zeros((B * H, L), dtype=np.float64)
    audit = np.zeros(B * H, dtype=np.float64)
    kernels.attn_bwd(q, k, v, mask.bias, mask.block_map, d_heads,
                     tape["skip_blocks"], mask.block_q, mask.block_k,
                     1.0 / math.sqrt(dh), d_q, d_k, d_v, d_bias_key, audit)

    if mcfg.attn_variant == "dynamic":
        vec, gate = _folded_score_params(lw, B)
        g = d_bias_key * tape["key_scores"]
        d_gate = np.einsum("ht,ht->h", g, tape["act"]).reshape(B, H).sum(axis=0)
        d_u = g * gate[:, None] * ndtensor.sigmoid(tape["u"])
        d_vec = np.einsum("ht,htd->hd", d_u, v).reshape(B, H, dh).sum(axis=0)
        d_v = d_v + d_u[:, :, None] * vec[:, None, :]
        grads[prefix + "attn.score_gate"] += d_gate
        grads[prefix + "attn.score_vec"] += d_vec

    if mcfg.use_rope:
        d_q = unapply_rope_grad(d_q, tape["cos"], tape["sin"])
        d_k = unapply_rope_grad(d_k, tape["cos"], tape["sin"])

    flat = tape["flat"]
    flat_t = np.ascontiguousarray(flat.T)
    d_flat = np.zeros_like(flat)
    for name, dgrad, wmat in (
        ("attn.wq", d_q, lw.attn.wq),
        ("attn.wk", d_k, lw.attn.wk),
        ("attn.wv", d_v, lw.attn.wv),
    ):
        df = _unfold_heads(dgrad, B, L, H, dh)
        grads[prefix + name] += ndtensor.matmul(flat_t, df)
        d_flat += ndtensor.matmul(df, np.ascontiguousarray(wmat.T))
    return d_flat.reshape(B, L, d)


def _forward_tape(model: TinyModel, tokens: np.ndarray, *, skip_blocks=True):
    """Embed + all blocks + final norm; returns (normed states, tape)."""
    B, L = tokens.shape
    x = model.embed[tokens]
    tape = {"tokens": tokens, "layers": []}
    for lw in model.layers:
        xn, xhat_a, r_a = _rms_norm(x, lw.norm_attn)
        mix, attn_tape = _attn_layer_fwd(xn, lw, model.cfg, skip_blocks=skip_blocks)
        x1 = x + mix
        xn2, xhat_m, r_m = _rms_norm(x1, lw.norm_mlp)
        flat2 = np.ascontiguousarray(xn2.reshape(B * L, model.cfg.d_model))
        h_pre = ndtensor.matmul(flat2, lw.w1) + lw.b1
        h_act = _gelu(h_pre)
        mlp = (ndtensor.matmul(h_act, lw.w2) + lw.b2).reshape(B, L, model.cfg.d_model)
        x2 = x1 + mlp
        tape["layers"].append({
            "xhat_a": xhat_a, "r_a": r_a, "attn": attn_tape,
            "xhat_m": xhat_m, "r_m": r_m, "flat2": flat2,
            "h_pre": h_pre, "h_act": h_act,
        })
        x = x2
    xn, xhat_o, r_o = _rms_norm(x, model.norm_out)
    tape["xhat_o"] = xhat_o
    tape["r_o"] = r_o
    return xn, tape


def _output_matrix(model: TinyModel) -> np.ndarray:
    if model.head is not None:
        return model.head
    return np.ascontiguousarray(model.embed.T)


def query_logits(model: TinyModel, tokens: np.ndarray, target_pos: np.ndarray,
                 *, skip_blocks=True):
    """Logits at the query positions only: [B, Q, V]. Also returns the tape."""
    B, L = tokens.shape
    xn, tape = _forward_tape(model, tokens, skip_blocks=skip_blocks)
    flat_idx = (np.arange(B)[:, None] * L + target_pos).reshape(-1)
    xq = np.ascontiguousarray(xn.reshape(B * L, model.cfg.d_model)[flat_idx])
    logits = ndtensor.matmul(xq, _output_matrix(model))
    tape["flat_idx"] = flat_idx
    tape["xq"] = xq
    tape["xn_shape"] = (B, L, model.cfg.d_model)
    return logits.reshape(B, target_pos.shape[1], model.cfg.vocab_size), tape


def sequence_loss(logits: np.ndarray, target_pos: np.ndarray, target_tok: np.ndarray):
    """Mean cross-entropy over query positions, from full [B, L, V] logits.

    Only rows named by target_pos enter the loss; everything else is
    ignored by construction.
    """
    B = logits.shape[0]
    rows = np.arange(B)[:, None]
    sel = logits[rows, target_pos]
    return _xent(sel.reshape(-1, logits.shape[-1]), target_tok.reshape(-1))[0]


def _xent(logits2d: np.ndarray, targets: np.ndarray):
    n = logits2d.shape[0]
    m = np.max(logits2d, axis=1, keepdims=True)
    z = np.exp(logits2d - m)
    lse = m[:, 0] + np.log(np.sum(z, axis=1))
    loss = float(np.mean(lse - logits2d[np.arange(n), targets]))
    probs = z / np.sum(z, axis=1, keepdims=True)
    return loss, probs


def loss_and_grads(model: TinyModel, tokens, target_pos, target_tok, *, skip_blocks=True):
    """Forward + backward over one batch. Returns (loss, accuracy, grads)."""
    logits, tape = query_logits(model, tokens, target_pos, skip_blocks=skip_blocks)
    B, Q, V = logits.shape
    flat_logits = logits.reshape(B * Q, V)
    flat_tok = target_tok.reshape(-1)
    loss, probs = _xent(flat_logits, flat_tok)
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss}")
    acc = float(np.mean(np.argmax(flat_logits, axis=1) == flat_tok))

    d_logits = probs
    d_logits[np.arange(B * Q), flat_tok] -= 1.0
    d_logits /= B * Q

    grads = {name: np.zeros_like(arr) for name, arr in param_dict(model).items()}
    xq = tape["xq"]
    out_mat = _output_matrix(model)
    d_xq = ndtensor.matmul(d_logits, np.ascontiguousarray(out_mat.T))
    d_out_mat = ndtensor.matmul(np.ascontiguousarray(xq.T), d_logits)
    if model.head is not None:
        grads["head"] += d_out_mat
    else:
        grads["embed"] += d_out_mat.T

    Bt, L, d = tape["xn_shape"]
    d_xn = np.zeros((Bt * L, d))
    d_xn[tape["flat_idx"]] = d_xq
    d_xn = d_xn.reshape(Bt, L, d)

    d_x, dg = _rms_norm_bwd(d_xn, model.norm_out, tape["xhat_o"], tape["r_o"])
    grads["norm_out"] += dg

    for i in reversed(range(len(model.layers))):
        lw = model.layers[i]
        lt = tape["layers"][i]
        prefix = f"layers.{i}."
        # mlp branch
        d_mlp_flat = np.ascontiguousarray(d_x.reshape(Bt * L, d))
        grads[prefix + "b2"] += d_mlp_flat.sum(axis=0)
        grads[prefix + "w2"] += ndtensor.matmul(np.ascontiguousarray(lt["h_act"].T), d_mlp_flat)
        d_hact = ndtensor.matmul(d_mlp_flat, np.ascontiguousarray(lw.w2.T))
        d_hpre = _gelu_bwd(lt["h_pre"], d_hact)
        grads[prefix + "b1"] += d_hpre.sum(axis=0)
        grads[prefix + "w1"] += ndtensor.matmul(np.ascontiguousarray(lt["flat2"].T), d_hpre)
        d_xn2 = ndtensor.matmul(d_hpre, np.ascontiguousarray(lw.w1.T)).reshape(Bt, L, d)
        d_x1_norm, dg = _rms_norm_bwd(d_xn2, lw.norm_mlp, lt["xhat_m"], lt["r_m"])
        grads[prefix + "norm_mlp"] += dg
        d_x1 = d_x + d_x1_norm
        # attention branch
        d_xn1 = _attn_layer_bwd(d_x1, lw, model.cfg, lt["attn"], grads, prefix)
        d_x_norm, dg = _rms_norm_bwd(d_xn1, lw.norm_attn, lt["xhat_a"], lt["r_a"])
        grads[prefix + "norm_attn"] += dg
        d_x = d_x1 + d_x_norm

    np.add.at(grads["embed"], tape["tokens"].reshape(-1), d_x.reshape(-1, d))
    return loss, acc, grads


# ---------------------------------------------------------------------------
# Optimizers and the training loop


class _Sgd:
    def __init__(self, params, lr, weight_decay=0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params, grads):
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay and p.ndim >= 2:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * g


class _AdamWLite:
    beta1 = 0.9
    beta2 = 0.95
    eps = 1e-8

    def __init__(self, params, lr, weight_decay=0.01):
        self.lr = lr
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p) for n, p in params.items()}
        self.v = {n: np.zeros_like(p) for n, p in params.items()}

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            if self.weight_decay and p.ndim >= 2:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def make_optimizer(name: str, params, lr: float, weight_decay: float = 0.01):
    if name == "sgd":
        return _Sgd(params, lr, weight_decay=0.0)
    if name == "adamw-lite":
        return _AdamWLite(params, lr, weight_decay=weight_decay)
    raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {name!r}")


def train(
    model: TinyModel,
    split: MqarSplit,
    epochs: int,
    lr: float,
    optimizer: str = "adamw-lite",
    *,
    batch_size: int = 64,
    weight_decay: float = 0.01,
    shuffle_seed: int = 0,
    log_path: Optional[str] = None,
) -> List[dict]:
    """Train in place; returns one record per epoch (also written as JSONL).

    Deterministic for fixed seeds and any thread count: batches are
    visited in a seeded permutation and gradients merge in batch order.
    Raises TrainingDivergedError if the loss leaves the reals.
    """
    params = param_dict(model)
    opt = make_optimizer(optimizer, params, lr, weight_decay)
    rng = np.random.default_rng(shuffle_seed)
    n = split.n
    log: List[dict] = []
    sink = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(epochs):
            order = rng.permutation(n)
            tot_loss = 0.0
            tot_acc = 0.0
            tot_rows = 0
            for lo in range(0, n, batch_size):
                idx = order[lo : lo + batch_size]
                try:
                    loss, acc, grads = loss_and_grads(
                        model, split.tokens[idx], split.target_pos[idx], split.target_tok[idx]
                    )
                except TrainingDivergedError as e:
                    raise TrainingDivergedError(
                        f"diverged at epoch {epoch}, batch {lo // batch_size}: {e}"
                    ) from None
                opt.step(params, grads)
                tot_loss += loss * len(idx)
                tot_acc += acc * len(idx)
                tot_rows += len(idx)
            rec = {
                "epoch": epoch,
                "loss": tot_loss / tot_rows,
                "accuracy": tot_acc / tot_rows,
            }
            log.append(rec)
            if sink:
                sink.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if sink:
            sink.close()
    return log


def evaluate(model: TinyModel, split: MqarSplit, *, batch_size: int = 64) -> dict:
    """Exact-match accuracy and mean loss at the query positions."""
    tot_loss = 0.0
    hits = 0
    rows = 0
    for lo in range(0, split.n, batch_size):
        sl = slice(lo, lo + batch_size)
        logits, _ = query_logits(model, split.tokens[sl], split.target_pos[sl])
        B, Q, V = logits.shape
        flat = logits.reshape(B * Q, V)
        tok = split.target_tok[sl].reshape(-1)
        loss, _ = _xent(flat, tok)
        tot_loss += loss * B * Q
        hits += int(np.sum(np.argmax(flat, axis=1) == tok))
        rows += B * Q
    return {"accuracy": hits / rows, "mean_loss": tot_loss / rows}


def layer_masks(model: TinyModel, tokens: np.ndarray) -> List[SparseMask]:
    """Per-layer masks for one sequence [L] or [1, L] (inspection only)."""
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[0] != 1:
        raise DimensionError("layer_masks wants a single sequence")
    masks = []
    x = model.embed[tokens]
    for lw in model.layers:
        xn, _, _ = _rms_norm(x, lw.norm_attn)
        mix, tape = _attn_layer_fwd(xn, lw, model.cfg)
        masks.append(tape["mask"])
        x1 = x + mix
        xn2, _, _ = _rms_norm(x1, lw.norm_mlp)
        B, L, d = xn2.shape
        flat2 = np.ascontiguousarray(xn2.reshape(B * L, d))
        h_act = _gelu(ndtensor.matmul(flat2, lw.w1) + lw.b1)
        x = x1 + (ndtensor.matmul(h_act, lw.w2) + lw.b2).reshape(B, L, d)
    return masks


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line, then flat little-endian f64 arrays

_CKPT_MAGIC = "dynmask-checkpoint"


def save_checkpoint(path: str, model: TinyModel, extra: Optional[dict] = None) -> None:
    params = param_dict(model)
    header = {
        "format": _CKPT_MAGIC,
        "version": 1,
        "model": asdict(model.cfg),
        "seed": model.cfg.seed,
        "arrays": [{"name": n, "shape": list(p.shape)} for n, p in params.items()],
    }
    if extra:
        header["extra"] = extra  # JSON-serializable caller metadata, e.g. the task spec
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for p in params.values():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def read_checkpoint_header(path: str) -> dict:
    """Parse just the JSON header line; no weights are loaded."""
    with open(path, "rb") as f:
        header_line = f.readline()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"bad header: {e}") from None
    if header.get("format") != _CKPT_MAGIC:
        raise CheckpointFormatError(f"not a {_CKPT_MAGIC} file")
    return header


def load_checkpoint(path: str) -> TinyModel:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"bad header: {e}") from None
        if header.get("format") != _CKPT_MAGIC:
            raise CheckpointFormatError(f"not a {_CKPT_MAGIC} file")
        blob = f.read()
    cfg = ModelConfig(**header["model"])
    model = build_model(cfg)
    values = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointFormatError(f"{entry['name']}: file truncated")
        values[entry["name"]] = np.frombuffer(
            blob, dtype="<f8", count=count, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointFormatError(f"{len(blob) - offset} trailing bytes")
    set_params(model, values)
    return model
