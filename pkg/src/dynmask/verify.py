"""Correctness suites: forward vs oracle, gradients vs finite differences,
mask invariants vs brute force, and skip-safety equalities.

Each suite returns a plain dict that serializes to a byte-stable JSON
report (no timestamps, derived instance seeds recorded for replay).
The fault parameter deliberately corrupts the first instance so the
reporting path can be shown to fail loudly.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import oracle
from .core import AttnConfig, build_mask, full_forward, init_weights, validate_mask
from .errors import MaskConsistencyError
from .grad import backward, grad_skip_audit

TOL_FORWARD = {"f64": 1e-10, "f32": 1e-4}
TOL_GRAD = 1e-5

FAULTS = ("forward-sign", "mask-bit", "grad-scale", "skip-epsilon")


def _instance_seed(seed: int, i: int) -> int:
    return (seed * 1_000_003 + i) % (2 ** 31)


def forward_suite(seed: int = 0, instances: int = 20, dtype: str = "f64",
                  fault: Optional[str] = None) -> dict:
    """Sparse block-skipping forward vs the dense oracle on random instances."""
    tol = TOL_FORWARD[dtype]
    cases = []
    worst = 0.0
    failures = 0
    for i in range(instances):
        iseed = _instance_seed(seed, i)
        rng = np.random.default_rng(iseed)
        t = int(rng.integers(2, 257))
        n_heads = int(rng.integers(1, 5))
        head_dim = int(rng.choice([2, 4, 8, 16, 32]))
        w = int(rng.choice([1, 4, max(1, t // 4), t]))
        use_rope = bool(rng.integers(0, 2)) and head_dim % 2 == 0
        cfg = AttnConfig(n_heads=n_heads, head_dim=head_dim, keep_per_row=w,
                         dtype=dtype, use_rope=use_rope)
        weights = init_weights(cfg, seed=iseed)
        h = rng.standard_normal((t, cfg.d_model)).astype(cfg.np_dtype)
        acts, _ = full_forward(h, weights, cfg, store_acts=False)
        ref = oracle.dense_forward(h, weights, cfg)
        out = acts.out.astype(np.float64)
        if fault == "forward-sign" and i == 0:
            out = out.copy()
            out.flat[0] = -out.flat[0] - 1.0
        diff = float(np.max(np.abs(out - ref.out)))
        ok = diff < tol
        failures += 0 if ok else 1
        worst = max(worst, diff)
        cases.append({"seed": iseed, "t": t, "n_heads": n_heads, "head_dim": head_dim,
                      "w": w, "use_rope": use_rope, "max_abs_diff": diff, "ok": ok})
    return {"suite": "forward", "dtype": dtype, "tolerance": tol, "instances": instances,
            "max_abs_diff": worst, "failures": failures, "passed": failures == 0,
            "cases": cases}


def grad_suite(seed: int = 0, instances: int = 5, fault: Optional[str] = None) -> dict:
    """Every parameter and input gradient vs central finite differences (f64)."""
    from .core import AttnWeights

    cases = []
    worst = 0.0
    failures = 0
    for i in range(instances):
        iseed = _instance_seed(seed, i)
        rng = np.random.default_rng(iseed)
        t = int(rng.integers(4, 17))
        n_heads = int(rng.integers(1, 3))
        head_dim = int(rng.choice([2, 4, 8]))
        w = int(rng.choice([1, 2, t]))
        use_rope = bool(rng.integers(0, 2)) and head_dim % 2 == 0
        cfg = AttnConfig(n_heads=n_heads, head_dim=head_dim, keep_per_row=w,
                         dtype="f64", use_rope=use_rope)
        w0 = init_weights(cfg, seed=iseed)
        h = rng.standard_normal((t, cfg.d_model))
        direction = rng.standard_normal((t, cfg.d_model))
        params = {"wq": w0.wq.copy(), "wk": w0.wk.copy(), "wv": w0.wv.copy(),
                  "w_out": w0.w_out.copy(), "score_vec": w0.score_vec.copy(),
                  "score_gate": w0.score_gate.copy(), "h_in": h.copy()}

        def _mk(p):
            return AttnWeights(wq=p["wq"], wk=p["wk"], wv=p["wv"], w_out=p["w_out"],
                               score_vec=p["score_vec"], score_gate=p["score_gate"])

        def _loss(p):
            acts, _ = full_forward(p["h_in"], _mk(p), cfg, store_acts=False)
            return float(np.sum(acts.out * direction))

        acts, mask = full_forward(h, _mk(params), cfg)
        bundle = backward(h, _mk(params), cfg, acts, mask, direction)
        fd = oracle.finite_diff_grad(_loss, params)
        got = {"wq": bundle.d_wq, "wk": bundle.d_wk, "wv": bundle.d_wv,
               "w_out": bundle.d_w_out, "score_vec": bundle.d_score_vec,
               "score_gate": bundle.d_score_gate, "h_in": bundle.d_h_in}
        if fault == "grad-scale" and i == 0:
            got = {k: v * 1.01 for k, v in got.items()}
        rels = {}
        for name, a in got.items():
            b = fd[name]
            denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-8)
            rels[name] = float(np.max(np.abs(a - b))) / denom
        bad = [n for n, r in rels.items() if not r < TOL_GRAD]
        worst_here = max(rels.values())
        worst = max(worst, worst_here)
        failures += 1 if bad else 0
        cases.append({"seed": iseed, "t": t, "n_heads": n_heads, "head_dim": head_dim,
                      "w": w, "use_rope": use_rope, "max_rel_err": worst_here,
                      "failed_tensors": bad, "ok": not bad})
    return {"suite": "grad", "tolerance": TOL_GRAD, "instances": instances,
            "max_rel_err": worst, "failures": failures, "passed": failures == 0,
            "cases": cases}


def mask_suite(seed: int = 0, rows: int = 1000, fault: Optional[str] = None) -> dict:
    """Structural mask invariants plus row-by-row agreement with brute force.

    Half the instances use quantized scores so score ties actually occur
    and the earlier-key tie rule is exercised, not just stated.
    """
    rng = np.random.default_rng(_instance_seed(seed, 0))
    checked = 0
    mismatched = 0
    invariant_errors = []
    instances = 0
    while checked < rows:
        instances += 1
        n_heads = int(rng.integers(1, 4))
        t = int(rng.integers(2, 65))
        w = int(rng.choice([1, 3, 8, t, 2 * t]))
        cfg = AttnConfig(n_heads=n_heads, head_dim=4, keep_per_row=w)
        scores = np.exp(rng.standard_normal((n_heads, t)))
        if instances % 2 == 0:
            scores = np.round(scores, 1)  # force ties
        mask = build_mask(scores, t, cfg)
        if fault == "mask-bit" and instances == 1:
            mask.block_map[0, 0, 0] = not mask.block_map[0, 0, 0]
        try:
            validate_mask(mask, cfg.keep_per_row)
        except MaskConsistencyError as e:
            invariant_errors.append({"instance": instances, "invariant": str(e)})
        finite = np.isfinite(mask.bias)
        for h in range(n_heads):
            for i in range(t):
                kept = np.flatnonzero(finite[h, i])
                ref = oracle.brute_force_topw(scores[h], w, i + 1)
                if not np.array_equal(kept, ref):
                    mismatched += 1
                checked += 1
    # all-equal scores: ties everywhere, earliest keys must win
    eq = np.ones((2, 12))
    cfg = AttnConfig(n_heads=2, head_dim=4, keep_per_row=3)
    mask = build_mask(eq, 12, cfg)
    tie_ok = True
    for h in range(2):
        for i in range(12):
            kept = np.flatnonzero(np.isfinite(mask.bias[h, i]))
            if not np.array_equal(kept, np.arange(min(3, i + 1))):
                tie_ok = False
    passed = mismatched == 0 and not invariant_errors and tie_ok
    return {"suite": "mask", "rows_checked": checked, "instances": instances,
            "brute_force_mismatches": mismatched, "invariant_errors": invariant_errors,
            "all_ties_keep_earliest": tie_ok, "passed": passed}


def skip_suite(seed: int = 0, instances: int = 20, fault: Optional[str] = None) -> dict:
    """Exact skip-safety: outputs, probabilities, and gradients.

    Per instance: forward with and without block skipping must differ by
    exactly 0.0; dropped cells must hold probability exactly 0.0; and the
    backward audit must see zero gradient at every dropped cell.
    """
    cases = []
    failures = 0
    for i in range(instances):
        iseed = _instance_seed(seed, i)
        rng = np.random.default_rng(iseed)
        t = int(rng.integers(8, 129))
        n_heads = int(rng.integers(1, 4))
        head_dim = int(rng.choice([4, 8, 16]))
        w = int(rng.choice([1, 4, max(1, t // 8)]))
        cfg = AttnConfig(n_heads=n_heads, head_dim=head_dim, keep_per_row=w, dtype="f64")
        weights = init_weights(cfg, seed=iseed)
        h = rng.standard_normal((t, cfg.d_model))
        a_skip, mask = full_forward(h, weights, cfg, skip_blocks=True)
        a_full, _ = full_forward(h, weights, cfg, skip_blocks=False)
        fwd_diff = float(np.max(np.abs(a_skip.out - a_full.out)))
        if fault == "skip-epsilon" and i == 0:
            fwd_diff += 1e-17
        masked_probs_ok = bool(np.all(a_skip.probs[~np.isfinite(mask.bias)] == 0.0))
        d_ctx = rng.standard_normal(a_skip.q.shape)
        audit = grad_skip_audit(a_skip.q, a_skip.k, a_skip.v, mask, d_ctx)
        ok = fwd_diff == 0.0 and masked_probs_ok and audit.passed
        failures += 0 if ok else 1
        cases.append({"seed": iseed, "t": t, "n_heads": n_heads, "head_dim": head_dim,
                      "w": w, "forward_diff": fwd_diff, "masked_probs_zero": masked_probs_ok,
                      "audit": audit.as_dict(), "ok": ok})
    return {"suite": "skip", "instances": instances, "failures": failures,
            "passed": failures == 0, "cases": cases}


def run_verify(seed: int = 0, dtype: str = "f64", *, forward_instances: int = 20,
               grad_instances: int = 5, mask_rows: int = 300, skip_instances: int = 10,
               fault: Optional[str] = None) -> dict:
    """All four suites under one derived-seed umbrella; gradcheck stays f64."""
    suites = {
        "forward": forward_suite(seed, forward_instances, dtype, fault=fault),
        "grad": grad_suite(seed, grad_instances, fault=fault),
        "mask": mask_suite(seed, mask_rows, fault=fault),
        "skip": skip_suite(seed, skip_instances, fault=fault),
    }
    return {
        "schema": "dynmask-verify-report",
        "version": 1,
        "seed": seed,
        "dtype": dtype,
        "suites": suites,
        "passed": all(s["passed"] for s in suites.values()),
    }
