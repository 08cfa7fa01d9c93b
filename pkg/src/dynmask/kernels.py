"""Numba kernels: fixed-order reductions, block-skipping attention, mask build.

Every reduction in here runs in a fixed serial order per output element
(f64 accumulators, no fastmath), and parallel loops only split work that
writes disjoint output slabs. Results are therefore bitwise identical
across runs and thread counts.
"""

import os

# Must happen before numba is first imported anywhere in the process,
# otherwise set_num_threads is capped at the detected core count.
os.environ.setdefault("NUMBA_NUM_THREADS", "8")

import numpy as np
from numba import config, njit, prange, set_num_threads

NEG_INF = -np.inf


def max_threads() -> int:
    return int(config.NUMBA_NUM_THREADS)


def use_threads(n: int) -> int:
    """Clamp n to the launch-time cap and apply it. Returns the count in use."""
    n = max(1, min(int(n), max_threads()))
    set_num_threads(n)
    return n


@njit(parallel=True, cache=True)
def matmul_into(a, b, out):
    # out[i, j] = sum_p a[i, p] * b[p, j], accumulated in f64, p ascending.
    m, kk = a.shape
    n = b.shape[1]
    for i in prange(m):
        row = np.zeros(n, dtype=np.float64)
        for p in range(kk):
            aip = np.float64(a[i, p])
            for j in range(n):
                row[j] += aip * np.float64(b[p, j])
        for j in range(n):
            out[i, j] = row[j]


@njit(parallel=True, cache=True)
def softmax_rows_into(x, out, status):
    # Masked softmax over rows. -inf entries come out exactly 0.0.
    # status[r] = number of finite entries in row r (0 means degenerate).
    rows, cols = x.shape
    for r in prange(rows):
        m = NEG_INF
        cnt = 0
        for c in range(cols):
            vv = np.float64(x[r, c])
            if vv != NEG_INF:
                cnt += 1
                if vv > m:
                    m = vv
        status[r] = cnt
        if cnt == 0:
            for c in range(cols):
                out[r, c] = 0.0
            continue
        ebuf = np.empty(cols, dtype=np.float64)
        ssum = 0.0
        for c in range(cols):
            vv = np.float64(x[r, c])
            if vv == NEG_INF:
                e = 0.0
            else:
                e = np.exp(vv - m)
            ebuf[c] = e
            ssum += e
        for c in range(cols):
            out[r, c] = ebuf[c] / ssum


@njit(cache=True)
def _heap_worse(va, ia, vb, ib):
    # Ordering for the eviction heap: smaller score is worse; on equal
    # scores the larger index is worse, so ties keep the earlier key.
    if va < vb:
        return True
    if va == vb and ia > ib:
        return True
    return False


@njit(cache=True)
def _heap_push(hval, hidx, size, cap, val, idx):
    # Min-heap on (score asc, index desc); root is the weakest kept key.
    if size < cap:
        p = size
        hval[p] = val
        hidx[p] = idx
        while p > 0:
            parent = (p - 1) >> 1
            if _heap_worse(hval[p], hidx[p], hval[parent], hidx[parent]):
                tv = hval[p]
                ti = hidx[p]
                hval[p] = hval[parent]
                hidx[p] = hidx[parent]
                hval[parent] = tv
                hidx[parent] = ti
                p = parent
            else:
                break
        return size + 1
    # Strict > only: an equal score never displaces an earlier key.
    if not _heap_worse(hval[0], hidx[0], val, idx):
        return size
    hval[0] = val
    hidx[0] = idx
    p = 0
    while True:
        left = 2 * p + 1
        if left >= cap:
            break
        worst = left
        right = left + 1
        if right < cap and _heap_worse(hval[right], hidx[right], hval[left], hidx[left]):
            worst = right
        if _heap_worse(hval[worst], hidx[worst], hval[p], hidx[p]):
            tv = hval[p]
            ti = hidx[p]
            hval[p] = hval[worst]
            hidx[p] = hidx[worst]
            hval[worst] = tv
            hidx[worst] = ti
            p = worst
        else:
            break
    return size


@njit(parallel=True, cache=True)
def build_topw_into(scores, n_q, w, block_q, block_k, bias, active_count, block_map):
    """Per head, keep the top-w causal keys of each query row.

    scores: [H, n_k] f64 per-key mask scores. Query row i attends keys
    j <= (n_k - n_q) + i. bias must be prefilled with -inf and block_map
    with False; kept cells get the key's score and mark their block.
    Runs an incremental heap over the growing causal prefix, so the whole
    head costs O(n_k log w + n_q * w) instead of n_q full sorts.
    """
    H, n_k = scores.shape
    offset = n_k - n_q
    for h in prange(H):
        hval = np.empty(w, dtype=np.float64)
        hidx = np.empty(w, dtype=np.int64)
        size = 0
        for j in range(offset):
            size = _heap_push(hval, hidx, size, w, scores[h, j], j)
        for i in range(n_q):
            jn = offset + i
            size = _heap_push(hval, hidx, size, w, scores[h, jn], jn)
            active_count[h, i] = size
            qb = i // block_q
            for s in range(size):
                j = hidx[s]
                bias[h, i, j] = scores[h, j]
                block_map[h, qb, j // block_k] = True


@njit(parallel=True, cache=True)
def attn_fwd(q, k, v, bias, block_map, use_skip, block_q, block_k, scale,
             out, probs, scores, store_acts, skip_counts, row_status):
    """Tiled attention with additive mask bias and optional block skipping.

    With use_skip, blocks whose block_map entry is False are never touched
    and positions with -inf bias inside live blocks skip the dot product.
    Without it, every score is computed and the bias applied afterwards
    (-inf still wins), which is the dense comparator. Both paths share the
    normalize/accumulate code, so results agree to the last bit (masked
    probabilities are exactly 0 either way).

    Work splits over (head, query-block); each unit owns its output rows,
    so thread count cannot change any result. skip_counts[item] reports
    skipped blocks per unit; row_status[h, i] the surviving key count.
    """
    H, n_q, d = q.shape
    n_k = k.shape[1]
    nqb = block_map.shape[1]
    nkb = block_map.shape[2]
    for item in prange(H * nqb):
        h = item // nqb
        qb = item % nqb
        i0 = qb * block_q
        i1 = min(i0 + block_q, n_q)
        nrows = i1 - i0
        sbuf = np.full((nrows, n_k), NEG_INF)
        mrow = np.full(nrows, NEG_INF)
        skipped = 0
        for kb in range(nkb):
            if use_skip and not block_map[h, qb, kb]:
                skipped += 1
                continue
            j0 = kb * block_k
            j1 = min(j0 + block_k, n_k)
            for r in range(nrows):
                i = i0 + r
                for j in range(j0, j1):
                    b = np.float64(bias[h, i, j])
                    if use_skip and b == NEG_INF:
                        continue
                    acc = 0.0
                    for dd in range(d):
                        acc += np.float64(q[h, i, dd]) * np.float64(k[h, j, dd])
                    s = acc * scale + b
                    sbuf[r, j] = s
                    if s > mrow[r]:
                        mrow[r] = s
        skip_counts[item] = skipped
        for r in range(nrows):
            i = i0 + r
            if store_acts:
                for j in range(n_k):
                    scores[h, i, j] = sbuf[r, j]
            m = mrow[r]
            if m == NEG_INF:
                row_status[h, i] = 0
                for dd in range(d):
                    out[h, i, dd] = 0.0
                continue
            ssum = 0.0
            cnt = 0
            for kb in range(nkb):
                if use_skip and not block_map[h, qb, kb]:
                    continue
                j0 = kb * block_k
                j1 = min(j0 + block_k, n_k)
                for j in range(j0, j1):
                    sv = sbuf[r, j]
                    if sv == NEG_INF:
                        e = 0.0
                    else:
                        e = np.exp(sv - m)
                        cnt += 1
                    sbuf[r, j] = e
                    ssum += e
            row_status[h, i] = cnt
            oacc = np.zeros(d, dtype=np.float64)
            for kb in range(nkb):
                if use_skip and not block_map[h, qb, kb]:
                    continue
                j0 = kb * block_k
                j1 = min(j0 + block_k, n_k)
                for j in range(j0, j1):
                    e = sbuf[r, j]
                    if store_acts:
                        probs[h, i, j] = e / ssum
                    for dd in range(d):
                        oacc[dd] += e * np.float64(v[h, j, dd])
            for dd in range(d):
                out[h, i, dd] = oacc[dd] / ssum


@njit(parallel=True, cache=True)
def attn_bwd(q, k, v, bias, block_map, d_ctx, use_skip, block_q, block_k, scale,
             d_q, d_k, d_v, d_bias_key, audit_max):
    """Backward of attn_fwd from recomputed probabilities.

    Emits d_q/d_k/d_v plus d_bias_key[h, j] = sum over rows of the score
    gradient at kept cells (the mask-score chain continues outside).
    With use_skip=False every masked cell's score gradient is computed
    and applied anyway; audit_max[h] records the largest magnitude seen
    there. The skip-safety theorem says those are exact zeros, so both
    modes must agree to max-abs-diff 0.0.

    Parallel over heads only; all per-key accumulators are head-private.
    """
    H, n_q, d = q.shape
    n_k = k.shape[1]
    nkb = block_map.shape[2]
    for h in prange(H):
        srow = np.empty(n_k, dtype=np.float64)
        dprow = np.empty(n_k, dtype=np.float64)
        for i in range(n_q):
            qb = i // block_q
            for j in range(n_k):
                srow[j] = NEG_INF
            m = NEG_INF
            for kb in range(nkb):
                if use_skip and not block_map[h, qb, kb]:
                    continue
                j0 = kb * block_k
                j1 = min(j0 + block_k, n_k)
                for j in range(j0, j1):
                    b = np.float64(bias[h, i, j])
                    if use_skip and b == NEG_INF:
                        continue
                    acc = 0.0
                    for dd in range(d):
                        acc += np.float64(q[h, i, dd]) * np.float64(k[h, j, dd])
                    s = acc * scale + b
                    srow[j] = s
                    if s > m:
                        m = s
            if m == NEG_INF:
                continue
            ssum = 0.0
            for kb in range(nkb):
                if use_skip and not block_map[h, qb, kb]:
                    continue
                j0 = kb * block_k
                j1 = min(j0 + block_k, n_k)
                for j in range(j0, j1):
                    sv = srow[j]
                    if sv == NEG_INF:
                        e = 0.0
                    else:
                        e = np.exp(sv - m)
                    srow[j] = e
                    ssum += e
            dot = 0.0
            for kb in range(nkb):
                if use_skip and not block_map[h, qb, kb]:
                    continue
                j0 = kb * block_k
                j1 = min(j0 + block_k, n_k)
                for j in range(j0, j1):
                    p = srow[j] / ssum
                    srow[j] = p
                    dp = 0.0
                    for dd in range(d):
                        dp += d_ctx[h, i, dd] * np.float64(v[h, j, dd])
                    dprow[j] = dp
                    dot += p * dp
            dqrow = np.zeros(d, dtype=np.float64)
            for kb in range(nkb):
                if use_skip and not block_map[h, qb, kb]:
                    continue
                j0 = kb * block_k
                j1 = min(j0 + block_k, n_k)
                for j in range(j0, j1):
                    p = srow[j]
                    ds = p * (dprow[j] - dot)
                    if not use_skip and bias[h, i, j] == NEG_INF:
                        a = abs(ds)
                        if a > audit_max[h]:
                            audit_max[h] = a
                    dss = ds * scale
                    d_bias_key[h, j] += ds
                    for dd in range(d):
                        dqrow[dd] += dss * np.float64(k[h, j, dd])
                        d_k[h, j, dd] += dss * np.float64(q[h, i, dd])
                        d_v[h, j, dd] += p * d_ctx[h, i, dd]
            for dd in range(d):
                d_q[h, i, dd] += dqrow[dd]
