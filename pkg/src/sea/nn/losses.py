"""Distribution outputs and training criteria.

softmax2d turns a spatial logit map into a probability map over pixels;
kl_divergence is the gaze criterion (gradient flows to the prediction only);
cross_entropy is the action criterion (fused stable log-softmax).
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _accumulate, _attach, as_tensor

KL_CLAMP = 1e-10
NORMALIZATION_TOL = 1e-4


class NormalizationError(ValueError):
    """A map that must sum to 1 does not."""


def softmax2d(logits) -> Tensor:
    """Softmax over the trailing two (spatial) axes; accepts (H,W) or (N,H,W)."""
    logits = as_tensor(logits)
    if logits.ndim not in (2, 3):
        raise ValueError(f"softmax2d expects (H,W) or (N,H,W), got {logits.shape}")
    x = logits.data
    m = x.max(axis=(-2, -1), keepdims=True)
    e = np.exp(x - m)
    q = e / e.sum(axis=(-2, -1), keepdims=True)
    out = Tensor(q)

    def bwd(g):
        dot = (g * q).sum(axis=(-2, -1), keepdims=True)
        _accumulate(logits, q * (g - dot))

    return _attach(out, (logits,), bwd)


def _check_normalized(arr: np.ndarray, name: str) -> None:
    sums = arr.sum(axis=(-2, -1))
    if not np.all(np.abs(sums - 1.0) <= NORMALIZATION_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise NormalizationError(f"{name} must sum to 1 within {NORMALIZATION_TOL}; off by {worst:g}")


def kl_divergence(p_true, q_pred) -> Tensor:
    """KL(p || q) summed over cells; mean over the batch when inputs are (N,H,W).

    ``p_true`` is the target distribution and receives no gradient. ``q_pred``
    is clamped below at 1e-10 before the log; cells where the clamp is active
    get zero gradient.
    """
    q = as_tensor(q_pred)
    p = p_true.data if isinstance(p_true, Tensor) else np.asarray(p_true, dtype=q.dtype)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: p {p.shape} vs q {q.shape}")
    _check_normalized(p, "p_true")
    _check_normalized(q.data, "q_pred")
    batched = p.ndim == 3
    n = p.shape[0] if batched else 1
    qc = np.maximum(q.data, KL_CLAMP)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.maximum(p, KL_CLAMP)), 0.0)
    val = (plogp - p * np.log(qc)).sum() / n
    out = Tensor(np.asarray(val, dtype=q.dtype))

    def bwd(g):
        gq = np.where(q.data > KL_CLAMP, -p / qc, 0.0) * (g / n)
        _accumulate(q, gq.astype(q.dtype))

    return _attach(out, (q,), bwd)


def cross_entropy(logits, label) -> Tensor:
    """-log softmax(logits)[label]; mean over the batch for (N,A) logits."""
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    x = logits.data if logits.ndim == 2 else logits.data[None]
    n, a = x.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if np.any(labels < 0) or np.any(labels >= a):
        bad = labels[(labels < 0) | (labels >= a)][0]
        raise IndexError(f"label {bad} out of range for {a} classes")
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    val = -logp[np.arange(n), labels].mean()
    out = Tensor(np.asarray(val, dtype=x.dtype))

    def bwd(g):
        sm = np.exp(logp)
        sm[np.arange(n), labels] -= 1.0
        gx = sm * (g / n)
        _accumulate(logits, gx if logits.ndim == 2 else gx[0])

    return _attach(out, (logits,), bwd)
