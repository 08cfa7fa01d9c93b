"""Timing harness: block-skipping kernel vs the dense comparator.

Protocol per case: identical inputs for both paths, 2 warmup runs, then
5 timed repeats (medians reported). The dense path is the same tiled
kernel with skipping disabled, so it computes every score and applies
the mask afterwards. A case's timings only count if the two paths
produce checksum-identical outputs; correctness gates performance.

Inputs use a recency-ramp mask score (strictly increasing in key
index), so each row keeps its latest w keys and whole key blocks fall
out cleanly. That matches the analytic skipped fraction of about
1 - w/k_len, which iid-random scores would not reach.
"""

from __future__ import annotations

import hashlib
import math
import statistics
import time
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np

from . import kernels
from .core import AttnConfig, SparseMask, build_mask
from .errors import ConfigError


@dataclass
class BenchCase:
    name: str = "case"
    batch: int = 1
    n_heads: int = 2
    kv_heads: Optional[int] = None
    q_len: int = 4096
    k_len: int = 4096
    head_dim: int = 64
    keep_per_row: int = 256
    block_q: int = 16
    block_k: int = 16
    dtype: str = "f32"
    threads: int = 4
    repeats: int = 5
    warmup: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.kv_heads is None:
            self.kv_heads = self.n_heads
        if self.kv_heads != self.n_heads:
            raise ConfigError("grouped kv heads are out of scope; kv_heads must equal n_heads")
        if not (1 <= self.q_len <= self.k_len):
            raise ConfigError(f"need 1 <= q_len <= k_len, got {self.q_len}/{self.k_len}")


@dataclass
class BenchResult:
    case: BenchCase
    threads_used: int
    dense_ms: Optional[float]
    sparse_ms: Optional[float]
    speedup: Optional[float]
    blocks_skipped_fraction: float
    checksum_dense: str
    checksum_sparse: str
    valid: bool
    note: str = ""

    def as_dict(self) -> dict:
        d = asdict(self)
        d["case"] = asdict(self.case)
        return d


def checksum(arr: np.ndarray) -> str:
    # +0.0 canonicalizes the sign of zeros without touching anything else.
    return hashlib.sha256(np.ascontiguousarray(arr + 0.0).tobytes()).hexdigest()


def bench_inputs(case: BenchCase):
    """Inputs plus the prebuilt mask (mask construction is not timed)."""
    rng = np.random.default_rng(case.seed)
    H = case.batch * case.n_heads
    dt = np.float64 if case.dtype == "f64" else np.float32
    q = rng.standard_normal((H, case.q_len, case.head_dim)).astype(dt)
    k = rng.standard_normal((H, case.k_len, case.head_dim)).astype(dt)
    v = rng.standard_normal((H, case.k_len, case.head_dim)).astype(dt)
    ramp = 1.0 + np.arange(case.k_len, dtype=np.float64) / case.k_len
    key_scores = np.broadcast_to(ramp, (H, case.k_len)).copy()
    cfg = AttnConfig(n_heads=H, head_dim=case.head_dim, keep_per_row=case.keep_per_row,
                     block_q=case.block_q, block_k=case.block_k, dtype=case.dtype)
    mask = build_mask(key_scores, case.q_len, cfg)
    return q, k, v, mask


def _run_path(q, k, v, mask: SparseMask, use_skip: bool, out):
    H, n_q, head_dim = q.shape
    nqb = mask.block_map.shape[1]
    nkb = mask.block_map.shape[2]
    dummy = np.zeros((1, 1, 1), dtype=q.dtype)
    skip_counts = np.zeros(H * nqb, dtype=np.int64)
    row_status = np.zeros((H, n_q), dtype=np.int64)
    kernels.attn_fwd(q, k, v, mask.bias, mask.block_map, use_skip,
                     mask.block_q, mask.block_k, 1.0 / math.sqrt(head_dim),
                     out, dummy, dummy, False, skip_counts, row_status)
    return int(skip_counts.sum()), H * nqb * nkb


def run_case(case: BenchCase) -> BenchResult:
    """Warm up, time both paths, and gate the timings on checksum equality."""
    threads_used = kernels.use_threads(case.threads)
    q, k, v, mask = bench_inputs(case)
    out = np.empty_like(q)

    results = {}
    fraction = 0.0
    for label, use_skip in (("dense", False), ("sparse", True)):
        for _ in range(case.warmup):
            _run_path(q, k, v, mask, use_skip, out)
        times = []
        skipped = total = 0
        for _ in range(case.repeats):
            t0 = time.perf_counter()
            skipped, total = _run_path(q, k, v, mask, use_skip, out)
            times.append((time.perf_counter() - t0) * 1e3)
        results[label] = (statistics.median(times), checksum(out))
        if use_skip:
            fraction = skipped / total if total else 0.0

    dense_ms, dense_sum = results["dense"]
    sparse_ms, sparse_sum = results["sparse"]
    valid = dense_sum == sparse_sum
    if not valid:
        return BenchResult(case=case, threads_used=threads_used, dense_ms=None,
                           sparse_ms=None, speedup=None,
                           blocks_skipped_fraction=fraction,
                           checksum_dense=dense_sum, checksum_sparse=sparse_sum,
                           valid=False, note="checksum mismatch; timings withheld")
    return BenchResult(case=case, threads_used=threads_used, dense_ms=dense_ms,
                       sparse_ms=sparse_ms, speedup=dense_ms / sparse_ms,
                       blocks_skipped_fraction=fraction,
                       checksum_dense=dense_sum, checksum_sparse=sparse_sum,
                       valid=True)


def default_cases() -> List[BenchCase]:
    return [
        BenchCase(name="train_sq4096_w256"),
        BenchCase(name="train_sq4096_full_window", keep_per_row=4096),
        BenchCase(name="decode_k65536_w2048", q_len=1, k_len=65536, keep_per_row=2048),
    ]


CSV_COLUMNS = [
    "name", "batch", "n_heads", "kv_heads", "q_len", "k_len", "head_dim",
    "keep_per_row", "block_q", "block_k", "dtype", "threads", "repeats",
    "warmup", "seed", "threads_used", "dense_ms", "sparse_ms", "speedup",
    "blocks_skipped_fraction", "checksum_dense", "checksum_sparse", "valid", "note",
]


def result_row(res: BenchResult) -> dict:
    row = asdict(res.case)
    row.update({
        "threads_used": res.threads_used,
        "dense_ms": "" if res.dense_ms is None else repr(res.dense_ms),
        "sparse_ms": "" if res.sparse_ms is None else repr(res.sparse_ms),
        "speedup": "" if res.speedup is None else repr(res.speedup),
        "blocks_skipped_fraction": repr(res.blocks_skipped_fraction),
        "checksum_dense": res.checksum_dense,
        "checksum_sparse": res.checksum_sparse,
        "valid": "true" if res.valid else "false",
        "note": res.note,
    })
    return row
