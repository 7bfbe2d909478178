"""Retrieval metrics, class-based precision and phrase-grounding CNR."""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .align import attend_text_to_regions, prepare_batch, region_features, similarity
from .loss import global_scores, score_cross

log = logging.getLogger(__name__)

RANK_SCORES = ("agg", "global", "sum")
DEFAULT_KS = (1, 5, 10)
CNR_EPS = 1e-18


def _ranks_of_diagonal(S):
    """1-based rank of S[k, k] in row k; ties go to the lower column index."""
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    diag = np.diag(S)[:, None]
    cols = np.arange(n)
    better = (S > diag) | ((S == diag) & (cols[None, :] < cols[:, None]))
    return 1 + better.sum(axis=1)


def recall_at_k(S, k):
    """Percent of rows whose diagonal entry ranks within the top k.

    Rows are queries, columns candidates; use ``S.T`` for the other direction.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"score matrix must be square, got {S.shape}")
    if not 1 <= k <= S.shape[0]:
        raise ValueError(f"K={k} out of range for {S.shape[0]} candidates")
    return 100.0 * float(np.mean(_ranks_of_diagonal(S) <= k))


def precision_at_k(S, query_labels, item_labels, k):
    """Mean share (percent) of each query's top-k items sharing its label."""
    S = np.asarray(S, dtype=np.float64)
    if query_labels is None or item_labels is None:
        raise ValueError("missing labels")
    q = np.asarray(query_labels)
    it = np.asarray(item_labels)
    if S.shape != (len(q), len(it)):
        raise ValueError(f"scores {S.shape} do not match labels ({len(q)}, {len(it)})")
    if not 1 <= k <= S.shape[1]:
        raise ValueError(f"K={k} out of range for {S.shape[1]} items")
    top = np.argsort(-S, axis=1, kind="stable")[:, :k]
    return 100.0 * float(np.mean(it[top] == q[:, None]))


def score_matrix(images, reports, params, rank_score="agg", threads=1):
    """Score every image (rows) against every report (columns).

    ``images`` / ``reports`` are Batches; ``rank_score`` picks the aggregated
    local score, the global score, or their sum.
    """
    if rank_score not in RANK_SCORES:
        raise ValueError(f"rank_score must be one of {RANK_SCORES}")
    parts = []
    if rank_score in ("agg", "sum"):
        parts.append(score_cross(images, reports, params, threads).S_agg)
    if rank_score in ("global", "sum"):
        parts.append(global_scores(images, reports, params))
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]


def retrieval_metrics(S, ks=DEFAULT_KS):
    """Image-to-text and text-to-image Recall@K and their sum R_sum.

    K values above the candidate count are clamped to it.
    """
    n = S.shape[0]
    out = {}
    for direction, M in (("i2t", S), ("t2i", S.T)):
        for k in ks:
            out[f"{direction}_R@{k}"] = recall_at_k(M, min(k, n))
    out["R_sum"] = float(sum(out.values()))
    return out


def phrase_attention(study, token_indices, lam, mode="attention", use_pe=True, use_lateral=True):
    """Heat map over the frontal grid for a phrase (a set of token indices).

    ``attention`` averages the word-to-region attention rows of the phrase
    tokens and renormalizes over frontal regions, so the map sums to 1.
    ``cosine`` averages raw cosine rows instead (not normalized).
    """
    idx = list(token_indices)
    if not idx:
        raise ValueError("empty phrase")
    for t in idx:
        if not (0 <= t < study.tokens.shape[0]) or not study.token_mask[t]:
            raise ValueError(f"phrase token {t} invalid or masked")
    V, rmask = region_features(study, use_pe, use_lateral)
    T = np.asarray(study.tokens, dtype=np.float64)
    C, r_ok = similarity(V, T, rmask)
    n_front = study.grid.size
    if mode == "attention":
        W, _ = attend_text_to_regions(V, C, lam, r_ok)
        m = W[idx, :n_front].mean(axis=0)
        total = m.sum()
        if total <= 0:
            raise ValueError("phrase attention has no mass on the frontal view")
        m = m / total
    elif mode == "cosine":
        m = C[:n_front, idx].mean(axis=1)
    else:
        raise ValueError(f"unknown map mode {mode!r}")
    return m.reshape(study.grid.height, study.grid.width)


def cnr_stats(heatmap, box):
    """Contrast-to-noise ratio of a map inside vs outside ``box``.

    Returns ``(cnr, degenerate)``; when both population variances vanish the
    denominator gets CNR_EPS and ``degenerate`` is True.
    """
    m = np.asarray(heatmap, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("heat map must be 2-D")
    h, w = m.shape
    if not (0 <= box.y0 < box.y1 <= h and 0 <= box.x0 < box.x1 <= w):
        raise ValueError(f"box {box} outside {h}x{w} map")
    inside = np.zeros_like(m, dtype=bool)
    inside[box.y0:box.y1, box.x0:box.x1] = True
    if inside.all():
        raise ValueError("empty exterior")
    a, b = m[inside], m[~inside]
    var = a.var() + b.var()
    degenerate = var < CNR_EPS
    denom = np.sqrt(var + CNR_EPS) if degenerate else np.sqrt(var)
    return float(abs(a.mean() - b.mean()) / denom), bool(degenerate)


def cnr(heatmap, box):
    return cnr_stats(heatmap, box)[0]


def write_map_csv(path, heatmap):
    np.savetxt(path, np.asarray(heatmap), delimiter=",", fmt="%.9g")


def write_map_pgm(path, heatmap):
    """8-bit binary PGM, min-max scaled."""
    m = np.asarray(heatmap, dtype=np.float64)
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi - lo <= 0 else (m - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


@dataclass
class MetricsReport:
    recall: dict = field(default_factory=dict)
    R_sum: float | None = None
    precision: dict | None = None
    cnr: dict | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate_retrieval(corpus, params, rank_score="agg", ks=DEFAULT_KS, precision_ks=None,
                       use_pe=True, use_lateral=True, threads=1):
    batch = prepare_batch(corpus.studies, use_pe, use_lateral)
    S = score_matrix(batch, batch, params, rank_score, threads)
    rec = retrieval_metrics(S, ks)
    r_sum = rec.pop("R_sum")
    report = MetricsReport(recall=rec, R_sum=r_sum, config={
        "rank_score": rank_score, "ks": list(ks), "lambda": params.lam, "tau": params.tau,
        "n": len(corpus), "use_pe": use_pe, "use_lateral": use_lateral,
    })
    labels = [s.label for s in corpus.studies]
    if precision_ks:
        if any(l is None for l in labels):
            raise ValueError("missing labels")
        # class-based retrieval: text queries against images
        report.precision = {f"P@{k}": precision_at_k(S.T, labels, labels, min(k, len(labels)))
                            for k in precision_ks}
        report.config["precision_ks"] = list(precision_ks)
    return report, S


def evaluate_grounding(corpus, params, mode="attention", use_pe=True, use_lateral=True, map_dir=None):
    """CNR over every grounding record; optionally writes CSV/PGM maps."""
    values, per_class, n_degenerate = [], {}, 0
    per_study = {}
    for s in corpus.studies:
        for gi, g in enumerate(s.grounding):
            m = phrase_attention(s, g.token_indices, params.lam, mode, use_pe, use_lateral)
            c, deg = cnr_stats(m, g.box)
            n_degenerate += deg
            values.append(c)
            per_study.setdefault(s.id, []).append(c)
            if s.label is not None:
                per_class.setdefault(str(s.label), []).append(c)
            if map_dir is not None:
                base = Path(map_dir) / f"{s.id}_g{gi}"
                write_map_csv(base.with_suffix(".csv"), m)
                write_map_pgm(base.with_suffix(".pgm"), m)
    if not values:
        raise ValueError("corpus has no grounding records")
    return {
        "mean_cnr": float(np.mean(values)),
        "n_boxes": len(values),
        "n_degenerate": n_degenerate,
        "per_class": {k: float(np.mean(v)) for k, v in sorted(per_class.items())},
        "per_study": {k: [float(x) for x in v] for k, v in per_study.items()},
        "mode": mode,
    }
