"""The reference implementations must agree with each other before they
are allowed to judge the fast path."""

import numpy as np
import pytest

from dynmask import AttnConfig, DimensionError, init_weights
from dynmask.oracle import (
    brute_force_topw,
    dense_forward,
    dense_forward_scalar,
    dense_mask_bias,
    finite_diff_grad,
)


def test_topw_picks_largest():
    scores = np.array([0.1, 5.0, -2.0, 3.0, 4.0])
    np.testing.assert_array_equal(brute_force_topw(scores, 2, 5), [1, 4])


def test_topw_tie_goes_to_smaller_index():
    scores = np.array([1.0, 1.0, 1.0, 1.0])
    np.testing.assert_array_equal(brute_force_topw(scores, 2, 4), [0, 1])


def test_topw_short_prefix_keeps_everything():
    scores = np.array([9.0, 1.0, 7.0, 3.0])
    np.testing.assert_array_equal(brute_force_topw(scores, 10, 3), [0, 1, 2])


def test_topw_prefix_out_of_range():
    with pytest.raises(DimensionError):
        brute_force_topw(np.zeros(4), 2, 5)
    with pytest.raises(DimensionError):
        brute_force_topw(np.zeros(4), 2, 0)


def test_dense_mask_bias_is_causal_and_budgeted():
    rng = np.random.default_rng(3)
    key_scores = rng.standard_normal((2, 12))
    bias = dense_mask_bias(key_scores, n_q=12, w=3)
    kept = np.isfinite(bias)
    # nothing above the diagonal, and min(w, i+1) entries per row
    for h in range(2):
        for i in range(12):
            assert not kept[h, i, i + 1 :].any()
            assert kept[h, i].sum() == min(3, i + 1)
    # kept cells carry the key's own score
    np.testing.assert_array_equal(bias[kept], np.broadcast_to(key_scores[:, None, :], bias.shape)[kept])


@pytest.mark.parametrize("use_rope", [False, True])
def test_dense_forward_matches_scalar_loops(use_rope):
    cfg = AttnConfig(n_heads=2, head_dim=4, keep_per_row=3, use_rope=use_rope)
    weights = init_weights(cfg, seed=4)
    rng = np.random.default_rng(4)
    h_in = rng.standard_normal((7, cfg.d_model))
    fast = dense_forward(h_in, weights, cfg).out
    slow = dense_forward_scalar(h_in, weights, cfg)
    assert np.max(np.abs(fast - slow)) < 1e-12


def test_dense_forward_probs_rows_normalize():
    cfg = AttnConfig(n_heads=2, head_dim=4, keep_per_row=2)
    weights = init_weights(cfg, seed=5)
    rng = np.random.default_rng(5)
    res = dense_forward(rng.standard_normal((9, cfg.d_model)), weights, cfg)
    np.testing.assert_allclose(res.probs.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(res.probs[~np.isfinite(res.bias)] == 0.0)


def test_finite_diff_on_quadratic():
    # f(x) = sum(x^2) has exact gradient 2x; central differences nail it
    params = {"x": np.array([1.0, -2.0, 0.5])}
    grads = finite_diff_grad(lambda p: float(np.sum(p["x"] ** 2)), params)
    np.testing.assert_allclose(grads["x"], 2.0 * params["x"], atol=1e-8)
    # and the parameters come back bit-identical
    np.testing.assert_array_equal(params["x"], [1.0, -2.0, 0.5])


def test_finite_diff_rejects_f32():
    params = {"x": np.zeros(3, dtype=np.float32)}
    with pytest.raises(DimensionError):
        finite_diff_grad(lambda p: 0.0, params)
