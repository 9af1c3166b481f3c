"""Classification loss, attention hinge regularizer and their combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, EvaluationError
from .tensor_core import as_tensor


@dataclass(frozen=True)
class LossBreakdown:
    l_class: float
    r_term: float
    total: float
    lam: float


def softmax(logits):
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Cross-entropy of a softmax over the class axis.

    ``logits`` is ``(C,)`` with an integer ``label``, or ``(B, C)`` with a
    length-``B`` label array, in which case per-row losses are returned.
    The gradient is ``softmax(logits) - onehot(label)``.
    """
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits)):
        raise EvaluationError("non-finite logits")
    C = logits.shape[-1]
    if C < 2:
        raise DimensionError(f"class axis must have size >= 2, got {C}")
    label = np.asarray(label)
    if label.shape != logits.shape[:-1]:
        raise DimensionError(f"label shape {label.shape} does not match logits batch shape {logits.shape[:-1]}")
    if np.any(label < 0) or np.any(label >= C):
        raise DomainError(f"label outside [0, {C})")

    z = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, label[..., None].astype(np.intp), axis=-1)[..., 0]
    loss = log_norm - picked
    grad = np.exp(z - log_norm[..., None])
    np.put_along_axis(
        grad,
        label[..., None].astype(np.intp),
        np.take_along_axis(grad, label[..., None].astype(np.intp), axis=-1) - 1.0,
        axis=-1,
    )
    if loss.ndim == 0:
        return float(loss), grad
    return loss, grad


def attention_hinge(u, delta):
    """``max(0, 1 - delta * max(u))`` over the last three axes ``(K, d, d)``.

    The subgradient is ``-delta`` at the first (lowest linear index) argmax
    when the hinge is active and zero otherwise, including exactly at the
    margin.  Leading axes are batch axes; ``delta`` broadcasts against them.
    """
    u = as_tensor(u)
    if u.ndim < 3:
        raise DimensionError(f"u must be (..., K, d, d), got shape {u.shape}")
    lead = u.shape[:-3]
    flat = u.reshape(*lead, -1)
    idx = np.argmax(flat, axis=-1)
    m = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), lead)
    if not np.all(np.abs(delta) == 1.0):
        raise DomainError("delta must be +1 or -1")
    margin = 1.0 - delta * m
    r = np.maximum(0.0, margin)
    grad = np.zeros_like(flat)
    np.put_along_axis(grad, idx[..., None], np.where(margin > 0, -delta, 0.0)[..., None], axis=-1)
    grad = grad.reshape(u.shape)
    if r.ndim == 0:
        return float(r), grad
    return r, grad


def combine(l_class: float, r: float, lam: float) -> LossBreakdown:
    """Weighted objective ``l_class + lam * r``."""
    if lam < 0:
        raise DomainError(f"lambda must be non-negative, got {lam}")
    return LossBreakdown(l_class=float(l_class), r_term=float(r), total=float(l_class + lam * r), lam=float(lam))
