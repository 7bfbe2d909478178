"""Dense math kernels shared by the rest of the package.

Everything runs in float64. Reductions go through numpy's fixed-order
routines so identical inputs give bit-identical outputs.
"""

import numpy as np

EPS = 1e-12


class DegenerateVectorError(ValueError):
    pass


def as_matrix(x, name="features"):
    """Validate a rows x dim feature matrix and return it as float64."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def softmax_scaled(x, lam=1.0):
    """Softmax of ``lam * x`` with max subtraction."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty input")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    z = lam * x
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def masked_softmax(logits, mask, axis=-1):
    """Softmax along ``axis`` where masked-out entries get exactly zero weight.

    Raises if any slice has no unmasked entry.
    """
    mask = np.broadcast_to(mask, logits.shape)
    if not np.all(mask.any(axis=axis)):
        raise ValueError("softmax over a fully masked slice")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def l2_norm(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(np.sum(x * x, axis=axis))


def l2_normalize(x):
    x = np.asarray(x, dtype=np.float64)
    n = l2_norm(x)
    if n <= EPS:
        raise DegenerateVectorError("degenerate vector")
    return x / n


def cosine(u, v):
    """Cosine similarity and a masked flag.

    A zero (or near-zero) argument yields ``(0.0, True)`` instead of raising,
    which is how zero-filled views drop out downstream.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = l2_norm(u), l2_norm(v)
    if nu <= EPS or nv <= EPS:
        return 0.0, True
    return float(np.dot(u, v) / (nu * nv)), False


def cosine_matrix(a, b):
    """Pairwise cosines between rows of ``a`` (..., n, d) and ``b`` (..., m, d).

    Returns ``(C, a_ok, b_ok)``; rows with norm <= EPS give zero cosines and a
    False entry in their ok-mask.
    """
    na = l2_norm(a)
    nb = l2_norm(b)
    a_ok = na > EPS
    b_ok = nb > EPS
    an = a / np.where(a_ok, na, 1.0)[..., None]
    bn = b / np.where(b_ok, nb, 1.0)[..., None]
    c = np.einsum("...id,...jd->...ij", an, bn)
    c = np.where(a_ok[..., :, None] & b_ok[..., None, :], c, 0.0)
    return c, a_ok, b_ok
