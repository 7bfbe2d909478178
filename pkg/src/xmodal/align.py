"""Cross-modal alignment forward pass.

Word side: each token attends over regions (softmax of lambda * cosine) to get
an attended visual feature ``u_j``; region side mirrors it with ``m_i``. The
local alignment of two vectors is their normalized element-wise product, and
the same construction on pooled whole-image / whole-report features gives the
global alignment.

Functions accept optional leading batch dimensions so the cross-pair scoring
in training reuses exactly the single-pair code path.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .numkit import EPS, DegenerateVectorError, cosine_matrix, l2_norm, masked_softmax
from .posenc import add_pe

log = logging.getLogger(__name__)


@dataclass
class AttentionParams:
    """Mean-query attention: query/key/value maps, each d x d."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray


@dataclass
class PoolParams:
    image_pool: AttentionParams
    text_pool: AttentionParams


@dataclass
class Batch:
    """Studies stacked for scoring; lateral rows follow frontal rows."""

    V: np.ndarray      # (N, R, d) region features, PE added
    rmask: np.ndarray  # (N, R)
    T: np.ndarray      # (N, W, d) token features, zero padded
    tmask: np.ndarray  # (N, W)
    ids: list

    def __len__(self):
        return self.V.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Batch(self.V[idx], self.rmask[idx], self.T[idx], self.tmask[idx],
                     [self.ids[i] for i in idx])


def region_features(study, use_pe=True, use_lateral=True):
    """Concatenated frontal + lateral region set and its visibility mask.

    An absent (or ignored) lateral view is zero-filled; zero rows stay zero
    after PE and are masked out.
    """
    frontal = np.asarray(study.frontal, dtype=np.float64)
    if use_lateral and study.lateral is not None:
        lateral = np.asarray(study.lateral, dtype=np.float64)
    else:
        lateral = np.zeros_like(frontal)
    if use_pe:
        frontal = add_pe(frontal, study.grid)
        lateral = add_pe(lateral, study.grid, preserve_zero_rows=True)
    V = np.concatenate([frontal, lateral], axis=0)
    return V, l2_norm(V) > EPS


def prepare_batch(studies, use_pe=True, use_lateral=True):
    if not studies:
        raise ValueError("empty batch")
    regions = [region_features(s, use_pe, use_lateral) for s in studies]
    n_w = max(s.tokens.shape[0] for s in studies)
    d = studies[0].dim
    T = np.zeros((len(studies), n_w, d))
    tmask = np.zeros((len(studies), n_w), dtype=bool)
    for k, s in enumerate(studies):
        T[k, :s.tokens.shape[0]] = s.tokens
        tmask[k, :s.tokens.shape[0]] = s.token_mask
    V = np.stack([r[0] for r in regions])
    rmask = np.stack([r[1] for r in regions])
    return Batch(V, rmask, T, tmask, [s.id for s in studies])


def similarity(V, T, region_mask=None):
    """Cosine matrix C[..., i, j] between regions and tokens.

    Returns ``(C, region_ok)``; rows of masked or zero regions are zero and
    flagged False in ``region_ok``.
    """
    V = np.asarray(V, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if V.shape[-1] != T.shape[-1]:
        raise ValueError(f"feature dims differ: {V.shape[-1]} vs {T.shape[-1]}")
    C, r_ok, _ = cosine_matrix(V, T)
    if region_mask is not None:
        r_ok = r_ok & region_mask
        C = np.where(r_ok[..., :, None], C, 0.0)
    return C, r_ok


def attend_text_to_regions(V, C, lam, region_mask):
    """Per-word attention over visible regions and the attended visual features.

    Returns ``(W_text, U)`` with ``W_text[..., j, i]`` the weight of region i
    for word j.
    """
    region_mask = np.asarray(region_mask, dtype=bool)
    if not np.all(region_mask.any(axis=-1)):
        raise ValueError("no visible regions")
    logits = lam * np.swapaxes(C, -1, -2)
    W = masked_softmax(logits, region_mask[..., None, :])
    U = np.einsum("...ji,...id->...jd", W, V)
    return W, U


def attend_regions_to_text(T, C, lam, token_mask):
    """Per-region attention over unmasked tokens and the attended textual features."""
    token_mask = np.asarray(token_mask, dtype=bool)
    if not np.all(token_mask.any(axis=-1)):
        raise ValueError("no visible tokens")
    W = masked_softmax(lam * C, token_mask[..., None, :])
    M = np.einsum("...ij,...jd->...id", W, T)
    return W, M


def local_align(a, b):
    """Unit-normalized element-wise product of two vectors."""
    p = np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)
    n = l2_norm(p)
    if n <= EPS:
        raise DegenerateVectorError("degenerate alignment: |a o b| ~ 0")
    return p / n


def local_align_rows(A, B, valid):
    """Row-wise ``local_align`` with exclusion instead of raising.

    Returns ``(aligned, ok, n_degenerate)``: rows of valid inputs whose product
    norm is <= EPS are dropped (ok False, zero output) and counted.
    """
    p = A * B
    n = l2_norm(p)
    big = n > EPS
    ok = valid & big
    out = np.where(ok[..., None], p / np.where(big, n, 1.0)[..., None], 0.0)
    return out, ok, int(np.count_nonzero(valid & ~big))


def scalarize(a):
    """Scalar score of an alignment vector: the sum of its entries."""
    return np.sum(a, axis=-1)


def mean_query_attention(F, mask, w_q, w_k, w_v):
    """Attention with the mean of the visible rows as the query.

    ``F`` is (..., n, d). Scores ``(W_q mean) . (W_k f_t) / sqrt(d)`` are
    softmaxed over visible rows; the output is ``sum_t p_t W_v f_t``.
    Returns ``(out, cache)``; the cache feeds ``mean_query_attention_backward``.
    """
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("attention over an empty set")
    d = F.shape[-1]
    cnt = mask.sum(axis=-1)
    mean = np.einsum("...t,...td->...d", mask.astype(np.float64), F) / cnt[..., None]
    query = np.einsum("ed,...d->...e", w_q, mean)
    keys = np.einsum("ed,...td->...te", w_k, F)
    scores = np.einsum("...te,...e->...t", keys, query) / np.sqrt(d)
    p = masked_softmax(scores, mask)
    z = np.einsum("...t,...td->...d", p, F)
    out = np.einsum("ed,...d->...e", w_v, z)
    return out, (F, mean, query, p, z)


def mean_query_attention_backward(cache, d_out, w_k, w_v):
    """Gradients of ``sum(d_out * out)`` w.r.t. (w_q, w_k, w_v); F is constant."""
    F, mean, query, p, z = cache
    d = F.shape[-1]
    lead = F.shape[:-2]
    flat = int(np.prod(lead)) if lead else 1
    d_out = d_out.reshape(flat, d)
    z2, mean2, query2 = z.reshape(flat, d), mean.reshape(flat, d), query.reshape(flat, d)
    F2 = F.reshape(flat, *F.shape[-2:]) if lead else F[None]
    p2 = p.reshape(flat, -1)
    g_wv = np.einsum("pe,pd->ed", d_out, z2)
    dz = np.einsum("pe,ed->pd", d_out, w_v)
    dp = np.einsum("ptd,pd->pt", F2, dz)
    ds = p2 * (dp - np.sum(p2 * dp, axis=-1, keepdims=True)) / np.sqrt(d)
    # scores = query . (W_k f_t)
    s_f = np.einsum("pt,ptd->pd", ds, F2)
    keyq = np.einsum("ed,pd->pe", w_k, s_f)
    g_wk = np.einsum("pe,pd->ed", query2, s_f)
    g_wq = np.einsum("pe,pd->ed", keyq, mean2)
    return g_wq, g_wk, g_wv


def pool_global(F, p, mask):
    """Pool a set of local features into one vector with mean-query attention."""
    out, _ = mean_query_attention(np.asarray(F, dtype=np.float64), mask, p.w_q, p.w_k, p.w_v)
    return out


def global_align(v_bar, t_bar):
    """Global alignment vector and its scalar score (sum of entries)."""
    x = np.asarray(v_bar, dtype=np.float64) * np.asarray(t_bar, dtype=np.float64)
    n = l2_norm(x)
    if np.any(n <= EPS):
        raise DegenerateVectorError("degenerate global alignment: |v o t| ~ 0")
    a = x / n[..., None]
    return a, scalarize(a)


@dataclass
class LocalSets:
    """Local alignment sets for one or many (image, report) pairs."""

    C: np.ndarray
    W_text: np.ndarray
    U: np.ndarray
    W_region: np.ndarray
    M: np.ndarray
    A_words: np.ndarray
    ok_words: np.ndarray
    A_regions: np.ndarray
    ok_regions: np.ndarray
    region_mask: np.ndarray
    token_mask: np.ndarray
    n_degenerate: int
    n_local: int
    V: np.ndarray
    T: np.ndarray


def cross_align(V, rmask, T, tmask, lam):
    """Both attention directions and local alignment vectors.

    Leading dimensions of (V, rmask) and (T, tmask) broadcast against each
    other, so ``V[:, None]`` with ``T[None, :]`` scores every cross pair.
    """
    C, r_ok = similarity(V, T, rmask)
    t_ok = np.asarray(tmask, dtype=bool) & (l2_norm(T) > EPS)
    C = np.where(t_ok[..., None, :], C, 0.0)
    W_text, U = attend_text_to_regions(V, C, lam, r_ok)
    W_region, M = attend_regions_to_text(T, C, lam, t_ok)
    shape_w = np.broadcast_shapes(U.shape, T.shape)
    shape_r = np.broadcast_shapes(M.shape, V.shape)
    t_valid = np.broadcast_to(t_ok, shape_w[:-1])
    r_valid = np.broadcast_to(r_ok, shape_r[:-1])
    A_w, ok_w, deg_w = local_align_rows(U, T, t_valid)
    A_r, ok_r, deg_r = local_align_rows(M, V, r_valid)
    n_local = int(np.count_nonzero(t_valid) + np.count_nonzero(r_valid))
    return LocalSets(C, W_text, U, W_region, M, A_w, ok_w, A_r, ok_r,
                     r_valid, t_valid, deg_w + deg_r, n_local, V, T)


@dataclass
class PairForward:
    """Cached intermediates of one image-report pair."""

    local: LocalSets
    v_bar: np.ndarray
    t_bar: np.ndarray
    A_g: np.ndarray
    s_g: float

    @property
    def C(self):
        return self.local.C

    @property
    def W_text(self):
        return self.local.W_text

    @property
    def W_region(self):
        return self.local.W_region

    @property
    def U(self):
        return self.local.U

    @property
    def M(self):
        return self.local.M


def forward_pair(V, rmask, T, tmask, pool, lam):
    """Full alignment forward for a single pair (2-D inputs)."""
    local = cross_align(V, rmask, T, tmask, lam)
    v_bar = pool_global(V, pool.image_pool, local.region_mask)
    t_bar = pool_global(T, pool.text_pool, local.token_mask)
    A_g, s_g = global_align(v_bar, t_bar)
    if local.n_degenerate:
        log.warning("%d degenerate local alignments excluded", local.n_degenerate)
    return PairForward(local, v_bar, t_bar, A_g, float(s_g))
