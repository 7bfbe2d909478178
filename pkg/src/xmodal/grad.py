"""Analytic gradients of the total loss and a finite-difference checker.

Only the head is trainable: the two pooling attentions and the two
aggregation attentions with their FC scorers. Input features are constants,
so the local alignment sets (and the internal loss) carry no gradient.
"""

import copy
from dataclasses import dataclass

import numpy as np

from .aggregate import AggParams, aggregate_backward
from .align import AttentionParams, PoolParams, mean_query_attention_backward
from .loss import batch_forward, info_nce_sym_grad

DEFAULT_LAMBDA = 10.0
DEFAULT_TAU = 0.1


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class HeadParams:
    pool: PoolParams
    agg_words: AggParams
    agg_regions: AggParams
    lam: float = DEFAULT_LAMBDA
    tau: float = DEFAULT_TAU

    @property
    def dim(self):
        return self.agg_words.w_q.shape[0]

    def blocks(self):
        """Trainable arrays by name, in a fixed order (views, not copies)."""
        out = {}
        for name, p in (("image_pool", self.pool.image_pool), ("text_pool", self.pool.text_pool)):
            for f in ("w_q", "w_k", "w_v"):
                out[f"{name}.{f}"] = getattr(p, f)
        for name, p in (("agg_words", self.agg_words), ("agg_regions", self.agg_regions)):
            for f in ("w_q", "w_k", "w_v", "fc_weight", "fc_bias"):
                out[f"{name}.{f}"] = getattr(p, f)
        return out

    def copy(self):
        return copy.deepcopy(self)

    @classmethod
    def from_blocks(cls, blocks, lam=DEFAULT_LAMBDA, tau=DEFAULT_TAU):
        def attn(prefix):
            return AttentionParams(*(np.array(blocks[f"{prefix}.{f}"], dtype=np.float64)
                                     for f in ("w_q", "w_k", "w_v")))

        def agg(prefix):
            return AggParams(*(np.array(blocks[f"{prefix}.{f}"], dtype=np.float64)
                               for f in ("w_q", "w_k", "w_v", "fc_weight", "fc_bias")))

        return cls(PoolParams(attn("image_pool"), attn("text_pool")),
                   agg("agg_words"), agg("agg_regions"), lam, tau)


def init_params(d, seed=0, lam=DEFAULT_LAMBDA, tau=DEFAULT_TAU):
    """Uniform(-1/sqrt(d), 1/sqrt(d)) linear maps and FC weights; zero FC bias."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)

    def mat():
        return rng.uniform(-bound, bound, size=(d, d))

    def attn():
        return AttentionParams(mat(), mat(), mat())

    def agg():
        return AggParams(mat(), mat(), mat(), rng.uniform(-bound, bound, size=d), np.array(0.0))

    return HeadParams(PoolParams(attn(), attn()), agg(), agg(), lam, tau)


def backward(batch, params, ext_mode="summed", threads=1, return_components=False):
    """Total loss and its exact gradient w.r.t. every block of ``params.blocks()``."""
    fwd = batch_forward(batch, params, ext_mode=ext_mode, threads=threads, keep_cache=True)
    tau = params.tau
    grads = {k: np.zeros_like(v) for k, v in params.blocks().items()}

    # global branch: S_g[k, j] = sum(x) / |x|, x = v_bar_k o t_bar_j
    _, dS_g = info_nce_sym_grad(fwd.S_g, tau)
    v_bar, c_img, t_bar, c_txt = fwd.global_cache
    x = v_bar[:, None, :] * t_bar[None, :, :]
    nx = np.sqrt(np.sum(x * x, axis=-1))
    a = x / nx[..., None]
    ds_dx = (1.0 - fwd.S_g[..., None] * a) / nx[..., None]
    g_x = dS_g[..., None] * ds_dx
    d_vbar = np.einsum("kjd,jd->kd", g_x, t_bar)
    d_tbar = np.einsum("kjd,kd->jd", g_x, v_bar)
    for name, cache, d_out in (("image_pool", c_img, d_vbar), ("text_pool", c_txt, d_tbar)):
        p = getattr(params.pool, name)
        gq, gk, gv = mean_query_attention_backward(cache, d_out, p.w_k, p.w_v)
        grads[f"{name}.w_q"] += gq
        grads[f"{name}.w_k"] += gk
        grads[f"{name}.w_v"] += gv

    # local external branch
    cross = fwd.cross
    if ext_mode == "summed":
        _, dS = info_nce_sym_grad(cross.S_agg, tau)
        dS_w = dS_r = dS
    else:
        _, dS_w = info_nce_sym_grad(cross.S_words, tau)
        _, dS_r = info_nce_sym_grad(cross.S_regions, tau)
    for rows, (c_w, a_w), (c_r, a_r) in cross.chunks:
        for name, cache, a_f, dS in (("agg_words", c_w, a_w, dS_w), ("agg_regions", c_r, a_r, dS_r)):
            g = aggregate_backward(cache, a_f, dS[rows], getattr(params, name))
            for f, v in g.items():
                grads[f"{name}.{f}"] += v

    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteGradientError(f"non-finite gradient in block {k}")
    if return_components:
        return fwd.loss, grads, fwd.components
    return fwd.loss, grads


def fd_check(batch, params, step=1e-5, max_coords=200, seed=0, ext_mode="summed",
             backward_fn=backward):
    """Central-difference check of ``backward_fn`` per parameter block.

    Up to ``max_coords`` coordinates per block (all of them for smaller
    blocks) are perturbed. Returns ``{block: max relative error}`` with the
    relative error ``|g - g_fd| / max(1, |g|, |g_fd|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, grads = backward_fn(batch, params, ext_mode=ext_mode)
    work = params.copy()
    blocks = work.blocks()
    rng = np.random.default_rng(seed)
    report = {}
    for name, arr in blocks.items():
        size = arr.size
        coords = np.arange(size) if size <= max_coords else np.sort(rng.choice(size, max_coords, replace=False))
        flat = arr.reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            lp = batch_forward(batch, work, ext_mode=ext_mode).loss
            flat[c] = orig - step
            lm = batch_forward(batch, work, ext_mode=ext_mode).loss
            flat[c] = orig
            g_fd = (lp - lm) / (2 * step)
            g = grads[name].reshape(-1)[c]
            worst = max(worst, abs(g - g_fd) / max(1.0, abs(g), abs(g_fd)))
        report[name] = worst
    return report
