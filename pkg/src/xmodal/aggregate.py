"""Aggregation of local alignment vectors into one pair score per direction."""

from dataclasses import dataclass

import numpy as np

from .align import mean_query_attention, mean_query_attention_backward


@dataclass
class AggParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    fc_weight: np.ndarray
    fc_bias: np.ndarray  # 0-d


def aggregate(A_T, p, valid=None, return_cache=False):
    """Collapse a set of alignment vectors ``A_T`` (..., n, d).

    Returns ``(a_f, q, score)``; rows with ``valid`` False are left out of the
    set entirely.
    """
    A_T = np.asarray(A_T, dtype=np.float64)
    if A_T.shape[-2] == 0:
        raise ValueError("empty alignment set")
    if valid is None:
        valid = np.ones(A_T.shape[:-1], dtype=bool)
    a_f, cache = mean_query_attention(A_T, valid, p.w_q, p.w_k, p.w_v)
    score = np.einsum("...d,d->...", a_f, p.fc_weight) + p.fc_bias
    q = cache[3]
    if return_cache:
        return a_f, q, score, cache
    return a_f, q, score


def aggregate_backward(cache, a_f, d_score, p):
    """Parameter gradients of ``sum(d_score * score)``."""
    d = a_f.shape[-1]
    d_score = np.asarray(d_score, dtype=np.float64)
    g_fc = np.einsum("p,pd->d", d_score.reshape(-1), a_f.reshape(-1, d))
    g_b = np.asarray(np.sum(d_score))
    d_af = d_score[..., None] * p.fc_weight
    g_wq, g_wk, g_wv = mean_query_attention_backward(cache, d_af.reshape(-1, d), p.w_k, p.w_v)
    return {"w_q": g_wq, "w_k": g_wk, "w_v": g_wv, "fc_weight": g_fc, "fc_bias": g_b}


def pair_score(pf, p_words, p_regions, two_term=False):
    """Aggregated score of a pair: word-side plus region-side.

    With ``two_term`` the two directional scores are returned separately.
    """
    loc = pf.local
    s_w = aggregate(loc.A_words, p_words, loc.ok_words)[2]
    s_r = aggregate(loc.A_regions, p_regions, loc.ok_regions)[2]
    if two_term:
        return float(s_w), float(s_r)
    return float(s_w + s_r)
