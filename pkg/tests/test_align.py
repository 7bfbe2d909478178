import math

import numpy as np
import pytest

import oracle
from xmodal.align import (AttentionParams, PoolParams, attend_regions_to_text, attend_text_to_regions,
                          cross_align, forward_pair, global_align, local_align, local_align_rows,
                          pool_global, prepare_batch, region_features, similarity)
from xmodal.grad import init_params
from xmodal.numkit import DegenerateVectorError
from xmodal.synth import generate

from conftest import random_instance, small_config

SQ2 = 1 / math.sqrt(2)


def test_similarity_identity_and_hand_value():
    Q = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))[0]
    C, _ = similarity(Q, Q)
    np.testing.assert_allclose(C, np.eye(4), atol=1e-14)
    C, _ = similarity(np.array([[1.0, 0], [SQ2, SQ2]]), np.array([[1.0, 0]]))
    np.testing.assert_allclose(C[:, 0], [1, SQ2], atol=1e-15)


def test_similarity_masked_row_and_dim_mismatch():
    V = np.array([[1.0, 0], [0, 0]])
    C, ok = similarity(V, np.array([[1.0, 1.0]]))
    assert list(ok) == [True, False] and C[1, 0] == 0
    with pytest.raises(ValueError):
        similarity(np.ones((2, 3)), np.ones((2, 2)))


def test_attend_text_to_regions_hand_example():
    V = np.array([[1.0, 0], [0, 1.0]])
    T = np.array([[1.0, 0]])
    C, ok = similarity(V, T)
    W, U = attend_text_to_regions(V, C, 1.0, ok)
    e = math.e
    np.testing.assert_allclose(W[0], [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    np.testing.assert_allclose(W[0], [0.7311, 0.2689], atol=1e-4)
    np.testing.assert_allclose(U[0], [0.7311, 0.2689], atol=1e-4)


def test_attend_saturation():
    V = np.array([[1.0, 0.2], [0.1, 1.0], [-1, 0]])
    T = np.array([[1.0, 0.0]])
    C, ok = similarity(V, T)
    _, U = attend_text_to_regions(V, C, 1000.0, ok)
    np.testing.assert_allclose(U[0], V[0], atol=1e-12)


def test_attend_regions_to_text_mirror():
    T = np.array([[1.0, 0], [0, 1.0]])
    V = np.array([[1.0, 0]])
    C, _ = similarity(V, T)
    W, M = attend_regions_to_text(T, C, 1.0, np.ones(2, bool))
    e = math.e
    np.testing.assert_allclose(W[0], [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    np.testing.assert_allclose(M[0], [e / (e + 1), 1 / (e + 1)], atol=1e-15)


def test_uniform_row_gives_mean_and_single_token():
    T = np.array([[1.0, 2.0], [3.0, -1.0], [5.0, 5.0]])
    C = np.zeros((2, 3))
    _, M = attend_regions_to_text(T, C, 10.0, np.array([True, True, False]))
    np.testing.assert_allclose(M, [[2.0, 0.5]] * 2, atol=1e-15)
    _, M = attend_regions_to_text(T, np.random.default_rng(0).uniform(-1, 1, (2, 3)), 10.0,
                                  np.array([False, True, False]))
    np.testing.assert_array_equal(M, [[3.0, -1.0]] * 2)


def test_no_visible_regions():
    with pytest.raises(ValueError, match="no visible regions"):
        attend_text_to_regions(np.zeros((2, 2)), np.zeros((2, 1)), 1.0, np.zeros(2, bool))


def test_lateral_half_masked_matches_frontal_only():
    rng = np.random.default_rng(1)
    Vf = rng.standard_normal((4, 5))
    T = rng.standard_normal((3, 5))
    V = np.concatenate([Vf, np.zeros((4, 5))])
    C, ok = similarity(V, T)
    _, U = attend_text_to_regions(V, C, 10.0, ok)
    Cf, okf = similarity(Vf, T)
    _, Uf = attend_text_to_regions(Vf, Cf, 10.0, okf)
    np.testing.assert_allclose(U, Uf, rtol=0, atol=1e-14)


def test_local_align_examples():
    np.testing.assert_allclose(local_align([3, 4], [3, 4]), np.array([9, 16]) / math.sqrt(337), atol=1e-15)
    np.testing.assert_allclose(local_align([3, 4], [3, 4]), [0.490261, 0.871576], atol=1e-6)
    np.testing.assert_array_equal(local_align([1, 1], [1, 0]), [1, 0])
    a, b = np.array([0.3, -2, 1]), np.array([1.5, 0.2, -0.7])
    np.testing.assert_array_equal(local_align(-a, -b), local_align(a, b))
    with pytest.raises(DegenerateVectorError):
        local_align([1, 0], [0, 1])


def test_local_align_rows_drops_degenerate():
    A = np.array([[1.0, 0], [1.0, 1.0], [2.0, 2.0]])
    B = np.array([[0, 1.0], [1.0, 1.0], [1.0, 0]])
    out, ok, n = local_align_rows(A, B, np.array([True, True, False]))
    assert list(ok) == [False, True, False] and n == 1
    np.testing.assert_array_equal(out[0], [0, 0])


def _attn(wq, wk, wv):
    return AttentionParams(np.asarray(wq, float), np.asarray(wk, float), np.asarray(wv, float))


def test_pool_examples():
    rng = np.random.default_rng(2)
    d = 3
    Wv = rng.standard_normal((d, d))
    p = _attn(rng.standard_normal((d, d)), rng.standard_normal((d, d)), Wv)
    f = rng.standard_normal(d)
    np.testing.assert_allclose(pool_global(np.tile(f, (4, 1)), p, np.ones(4, bool)), Wv @ f, atol=1e-14)
    np.testing.assert_allclose(pool_global(f[None], p, np.ones(1, bool)), Wv @ f, atol=1e-14)
    F = rng.standard_normal((5, d))
    p0 = _attn(np.zeros((d, d)), np.zeros((d, d)), np.eye(d))
    np.testing.assert_allclose(pool_global(F, p0, np.ones(5, bool)), F.mean(axis=0), atol=1e-15)
    with pytest.raises(ValueError):
        pool_global(F, p0, np.zeros(5, bool))


def test_global_align_examples():
    a, s = global_align(np.array([0.6, 0.8]), np.array([0.6, 0.8]))
    x = np.array([0.36, 0.64])
    np.testing.assert_allclose(a, x / np.linalg.norm(x), atol=1e-15)
    np.testing.assert_allclose(a, [0.49026, 0.87157], atol=1e-5)
    assert s == pytest.approx(1.36183, abs=1e-5)
    with pytest.raises(DegenerateVectorError):
        global_align(np.array([1.0, 0]), np.array([0, 1.0]))
    rng = np.random.default_rng(0)
    v, t = rng.standard_normal(6), rng.standard_normal(6)
    perm = rng.permutation(6)
    assert global_align(v[perm], t[perm])[1] == pytest.approx(global_align(v, t)[1], abs=1e-14)


def _oracle_params(p):
    pool = ((p.pool.image_pool.w_q.tolist(), p.pool.image_pool.w_k.tolist(), p.pool.image_pool.w_v.tolist()),
            (p.pool.text_pool.w_q.tolist(), p.pool.text_pool.w_k.tolist(), p.pool.text_pool.w_v.tolist()))
    aggs = [(a.w_q.tolist(), a.w_k.tolist(), a.w_v.tolist(), a.fc_weight.tolist(), float(a.fc_bias))
            for a in (p.agg_words, p.agg_regions)]
    return pool, aggs[0], aggs[1]


def compare_with_oracle(seed, tol=1e-12):
    rng = np.random.default_rng(seed)
    V, rmask, T, tmask = random_instance(rng)
    d = V.shape[1]
    p = init_params(d, seed=seed)
    lam = float(rng.uniform(0.5, 10))
    pf = forward_pair(V, rmask, T, tmask, p.pool, lam)
    from xmodal.aggregate import pair_score
    s_w, s_r = pair_score(pf, p.agg_words, p.agg_regions, two_term=True)
    ref = oracle.pair_forward(V.tolist(), rmask.tolist(), T.tolist(), tmask.tolist(), lam, *_oracle_params(p))
    for j, w in enumerate(ref["W_text"]):
        if w is not None:
            np.testing.assert_allclose(pf.W_text[j], w, rtol=0, atol=tol)
            np.testing.assert_allclose(pf.U[j], ref["U"][j], rtol=0, atol=tol)
    for i, w in enumerate(ref["W_region"]):
        if w is not None:
            np.testing.assert_allclose(pf.W_region[i], w, rtol=0, atol=tol)
            np.testing.assert_allclose(pf.M[i], ref["M"][i], rtol=0, atol=tol)
    np.testing.assert_allclose(pf.local.A_words[pf.local.ok_words], ref["A_words"], rtol=0, atol=tol)
    np.testing.assert_allclose(pf.local.A_regions[pf.local.ok_regions], ref["A_regions"], rtol=0, atol=tol)
    np.testing.assert_allclose(pf.v_bar, ref["v_bar"], rtol=0, atol=tol)
    np.testing.assert_allclose(pf.t_bar, ref["t_bar"], rtol=0, atol=tol)
    np.testing.assert_allclose(pf.A_g, ref["A_g"], rtol=0, atol=tol)
    assert abs(pf.s_g - ref["s_g"]) < tol
    assert abs(s_w - ref["s_words"]) < tol
    assert abs(s_r - ref["s_regions"]) < tol


@pytest.mark.parametrize("seed", range(10))
def test_batched_matches_loop_oracle(seed):
    compare_with_oracle(seed)


def test_invariants_on_pair():
    rng = np.random.default_rng(5)
    V, rmask, T, tmask = random_instance(rng, n_r=3, n_w=4, d=5)
    loc = cross_align(V, rmask, T, tmask, 10.0)
    np.testing.assert_allclose(loc.W_text.sum(axis=1), 1, atol=1e-12)
    np.testing.assert_allclose(loc.W_region[loc.region_mask].sum(axis=1), 1, atol=1e-12)
    assert np.all(loc.W_text[:, ~loc.region_mask] == 0)
    np.testing.assert_allclose(np.linalg.norm(loc.A_words[loc.ok_words], axis=1), 1, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(loc.A_regions[loc.ok_regions], axis=1), 1, atol=1e-12)


def test_region_permutation_equivariance():
    rng = np.random.default_rng(6)
    V, rmask, T, tmask = random_instance(rng, n_r=3, n_w=3, d=4)
    perm = rng.permutation(V.shape[0])
    a = cross_align(V, rmask, T, tmask, 10.0)
    b = cross_align(V[perm], rmask[perm], T, tmask, 10.0)
    np.testing.assert_allclose(b.W_text, a.W_text[:, perm], atol=1e-14)
    np.testing.assert_allclose(b.W_region, a.W_region[perm], atol=1e-14)
    np.testing.assert_allclose(b.U, a.U, atol=1e-13)


def test_absent_vs_zero_lateral_bitwise():
    c = generate(small_config(lateral_fraction=0.0))
    s = c.studies[0]
    p = init_params(8, seed=0)
    V1, m1 = region_features(s)
    s.lateral = np.zeros_like(s.frontal)
    V2, m2 = region_features(s)
    assert V1.tobytes() == V2.tobytes() and (m1 == m2).all()
    f1 = forward_pair(V1, m1, s.tokens, s.token_mask, p.pool, 10.0)
    f2 = forward_pair(V2, m2, s.tokens, s.token_mask, p.pool, 10.0)
    assert f1.U.tobytes() == f2.U.tobytes() and f1.s_g == f2.s_g


def test_prepare_batch_pads_tokens(small_corpus):
    s0 = small_corpus.studies[0]
    s0.tokens = s0.tokens[:3]
    s0.token_mask = s0.token_mask[:3]
    b = prepare_batch(small_corpus.studies)
    assert b.T.shape == (4, 4, 8)
    assert list(b.tmask[0]) == [True, True, True, False]
    assert b.V.shape == (4, 12, 8)
