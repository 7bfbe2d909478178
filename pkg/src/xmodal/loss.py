"""Contrastive losses: global, local external and local internal."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .aggregate import aggregate
from .align import cross_align, global_align, mean_query_attention
from .numkit import EPS, l2_norm, logsumexp

log = logging.getLogger(__name__)

# image rows scored per work unit; fixed so results never depend on --threads
CHUNK_ROWS = 4
MAX_DEGENERATE_FRACTION = 0.01


class DegenerateAlignmentError(RuntimeError):
    pass


def info_nce_sym(S, tau):
    """Symmetric InfoNCE over a square score matrix, averaged over pairs."""
    return info_nce_sym_grad(S, tau)[0]


def info_nce_sym_grad(S, tau):
    """Loss and dL/dS of ``info_nce_sym``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    if S.ndim != 2 or S.shape[1] != n:
        raise ValueError(f"score matrix must be square, got {S.shape}")
    Z = S / tau
    diag = np.diag(Z)
    lse_row = logsumexp(Z, axis=1)
    lse_col = logsumexp(Z, axis=0)
    loss = float(np.mean((lse_row - diag) + (lse_col - diag)))
    p_row = np.exp(Z - lse_row[:, None])
    p_col = np.exp(Z - lse_col[None, :])
    eye = np.eye(n)
    dS = (p_row - eye + p_col - eye) / (n * tau)
    return loss, dS


def internal_side_loss(X, Y, valid, tau):
    """Within-study contrastive loss between rows of X and their attended rows Y.

    The score of (x_j, y_i) is the scalarized local alignment; each j
    contributes a row term (x_j against all y) and a column term (y_j against
    all x). Works on leading batch dims; returns ``(per-item sums, n_degenerate)``.
    """
    P = X[..., :, None, :] * Y[..., None, :, :]
    norm = l2_norm(P)
    big = norm > EPS
    pair_ok = valid[..., :, None] & valid[..., None, :]
    ok = pair_ok & big
    S = np.where(ok, np.sum(P, axis=-1) / np.where(big, norm, 1.0), 0.0) / tau
    masked = np.where(ok, S, -np.inf)
    diag_ok = np.diagonal(ok, axis1=-2, axis2=-1)
    diag = np.diagonal(S, axis1=-2, axis2=-1)
    with np.errstate(invalid="ignore"):
        lse_row = logsumexp(masked, axis=-1)
        lse_col = logsumexp(masked, axis=-2)
    terms = np.where(diag_ok, (lse_row - diag) + (lse_col - diag), 0.0)
    return terms.sum(axis=-1), int(np.count_nonzero(pair_ok & ~big))


def local_internal_loss(pair, tau):
    """Word-side plus region-side internal loss of a PairForward (or LocalSets)."""
    loc = getattr(pair, "local", pair)
    word, dw = internal_side_loss(loc.T, loc.U, loc.token_mask, tau)
    region, dr = internal_side_loss(loc.V, loc.M, loc.region_mask, tau)
    if dw or dr:
        log.debug("internal loss: %d degenerate cross pairs excluded", dw + dr)
    return word + region


@dataclass
class CrossScores:
    """Aggregated scores for every (image k, report j) pair."""

    S_words: np.ndarray
    S_regions: np.ndarray
    n_degenerate: int
    n_local: int
    chunks: list = field(default_factory=list)  # (row slice, word cache, region cache) when kept

    @property
    def S_agg(self):
        return self.S_words + self.S_regions


def _score_rows(images, reports, params, rows, keep_cache):
    loc = cross_align(images.V[rows, None], images.rmask[rows, None],
                      reports.T[None], reports.tmask[None], params.lam)
    a_w, _, s_w, c_w = aggregate(loc.A_words, params.agg_words, loc.ok_words, return_cache=True)
    a_r, _, s_r, c_r = aggregate(loc.A_regions, params.agg_regions, loc.ok_regions, return_cache=True)
    cache = (rows, (c_w, a_w), (c_r, a_r)) if keep_cache else None
    return s_w, s_r, loc.n_degenerate, loc.n_local, cache


def score_cross(images, reports, params, threads=1, keep_cache=False):
    """Aggregated scores of all images against all reports (two Batches)."""
    n = len(images)
    units = [slice(k, min(k + CHUNK_ROWS, n)) for k in range(0, n, CHUNK_ROWS)]

    def work(rows):
        return _score_rows(images, reports, params, rows, keep_cache)

    if threads > 1 and len(units) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, units))
    else:
        results = [work(u) for u in units]
    S_w = np.concatenate([r[0] for r in results], axis=0)
    S_r = np.concatenate([r[1] for r in results], axis=0)
    deg = sum(r[2] for r in results)
    n_local = sum(r[3] for r in results)
    chunks = [r[4] for r in results] if keep_cache else []
    return CrossScores(S_w, S_r, deg, n_local, chunks)


def global_scores(images, reports, params, keep_cache=False):
    """Scalar global alignment for all image/report pairs, plus pooling caches."""
    v_bar, c_img = mean_query_attention(images.V, images.rmask, *_attn(params.pool.image_pool))
    t_bar, c_txt = mean_query_attention(reports.T, reports.tmask, *_attn(params.pool.text_pool))
    _, S_g = global_align(v_bar[:, None, :], t_bar[None, :, :])
    if keep_cache:
        return S_g, (v_bar, c_img, t_bar, c_txt)
    return S_g


def _attn(p):
    return p.w_q, p.w_k, p.w_v


@dataclass
class BatchForward:
    loss: float
    components: dict
    S_g: np.ndarray
    cross: CrossScores
    global_cache: tuple | None


def batch_forward(batch, params, tau=None, ext_mode="summed", threads=1, keep_cache=False,
                  max_degenerate=MAX_DEGENERATE_FRACTION):
    tau = params.tau if tau is None else tau
    cross = score_cross(batch, batch, params, threads, keep_cache)
    if cross.n_local and cross.n_degenerate / cross.n_local > max_degenerate:
        raise DegenerateAlignmentError(
            f"{cross.n_degenerate} of {cross.n_local} local alignments degenerate (> {max_degenerate:.0%})")
    if cross.n_degenerate:
        log.info("%d degenerate local alignments excluded", cross.n_degenerate)
    if keep_cache:
        S_g, gcache = global_scores(batch, batch, params, keep_cache=True)
    else:
        S_g, gcache = global_scores(batch, batch, params), None
    L_g = info_nce_sym(S_g, tau)
    if ext_mode == "summed":
        L_ext = info_nce_sym(cross.S_agg, tau)
    elif ext_mode == "two_term":
        L_ext = info_nce_sym(cross.S_words, tau) + info_nce_sym(cross.S_regions, tau)
    else:
        raise ValueError(f"unknown ext_mode {ext_mode!r}")
    loc = cross_align(batch.V, batch.rmask, batch.T, batch.tmask, params.lam)
    L_int = float(np.mean(local_internal_loss(loc, tau)))
    comps = {"L_g": L_g, "L_ext": L_ext, "L_int": L_int}
    return BatchForward(L_g + L_ext + L_int, comps, S_g, cross, gcache)


def total_loss(batch, params, tau=None, ext_mode="summed", threads=1):
    """Total loss ``L_g + L_ext + L_int`` of a Batch and its components."""
    fwd = batch_forward(batch, params, tau, ext_mode, threads)
    return fwd.loss, fwd.components
