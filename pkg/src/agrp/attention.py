"""Attention pooling over a group of feature maps.

Shapes: a group is ``(K, d, d, c)``; a batch of groups ``(N, K, d, d, c)``.
Every function accepts arbitrary leading axes before ``K``.

Forward path, per spatial cell ``x`` of image ``k``::

    u = w . x + b
    s = softplus(u)
    a = (s + eps) / sum_ij (s + eps)        # over the cells of image k only
    x_hat = a * x
    h = sum_ijk x_hat / (d^2 K)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, StateError
from .tensor_core import as_tensor, sigmoid, softplus


@dataclass
class AttentionParams:
    w: np.ndarray
    b: float = 0.0

    @classmethod
    def zeros(cls, channels: int) -> "AttentionParams":
        return cls(np.zeros(channels), 0.0)


@dataclass
class AttentionTrace:
    u: np.ndarray  # (..., K, d, d)
    s: np.ndarray
    a: np.ndarray
    x_hat: np.ndarray  # (..., K, d, d, c)
    h: np.ndarray  # (..., c)
    epsilon: float


def _check_maps(maps):
    maps = as_tensor(maps)
    if maps.ndim < 4:
        raise DimensionError(f"maps must be (..., K, d, d, c), got shape {maps.shape}")
    if maps.shape[-4] < 1:
        raise DimensionError("group axis K must be at least 1")
    if maps.shape[-3] != maps.shape[-2]:
        raise DimensionError(f"spatial axes must be square, got {maps.shape[-3:-1]}")
    return maps


def linear_scores(maps, params: AttentionParams):
    """Raw detector responses ``u = w . x + b``, shape ``(..., K, d, d)``."""
    maps = _check_maps(maps)
    w = as_tensor(params.w)
    if w.shape != (maps.shape[-1],):
        raise DimensionError(f"detector weight has size {w.shape}, channel axis of maps has size {maps.shape[-1]}")
    return maps @ w + float(params.b)


def normalize_scores(s, epsilon):
    """Per-image ``(s + eps) / sum(s + eps)`` over the two spatial axes."""
    t = s + epsilon
    total = t.sum(axis=(-2, -1), keepdims=True)
    if np.any(total == 0.0):
        raise ZeroDivisionError("attention normalizer is zero (epsilon = 0 and all scores vanished)")
    return t / total


def attention_forward(maps, params: AttentionParams, epsilon: float = 0.1) -> AttentionTrace:
    maps = _check_maps(maps)
    if epsilon < 0:
        raise DomainError(f"epsilon must be non-negative, got {epsilon}")
    u = linear_scores(maps, params)
    s = softplus(u)
    a = normalize_scores(s, epsilon)
    x_hat = a[..., None] * maps
    K, d = maps.shape[-4], maps.shape[-3]
    h = x_hat.sum(axis=(-4, -3, -2)) / (d * d * K)
    return AttentionTrace(u=u, s=s, a=a, x_hat=x_hat, h=h, epsilon=float(epsilon))


def attention_backward(trace: AttentionTrace, maps, params: AttentionParams, grad_h):
    """Gradients of ``grad_h . h`` w.r.t. maps, detector weight and bias.

    Returns ``(grad_maps, grad_w, grad_b)``; ``grad_w`` and ``grad_b`` are
    summed over any leading batch axes.
    """
    maps = _check_maps(maps)
    if trace.x_hat.shape != maps.shape or trace.u.shape != maps.shape[:-1]:
        raise StateError(f"trace was built for maps of shape {trace.x_hat.shape}, got {maps.shape}")
    grad_h = as_tensor(grad_h)
    if grad_h.shape != trace.h.shape:
        raise DimensionError(f"grad_h has shape {grad_h.shape}, expected {trace.h.shape}")
    w = as_tensor(params.w)
    K, d = maps.shape[-4], maps.shape[-3]
    scale = 1.0 / (d * d * K)

    g = grad_h[..., None, None, None, :] * scale  # broadcast over K, d, d
    grad_maps = trace.a[..., None] * g
    grad_a = np.sum(maps * g, axis=-1)

    total = (trace.s + trace.epsilon).sum(axis=(-2, -1), keepdims=True)
    grad_t = (grad_a - np.sum(grad_a * trace.a, axis=(-2, -1), keepdims=True)) / total
    grad_u = grad_t * sigmoid(trace.u)

    grad_maps = grad_maps + grad_u[..., None] * w
    grad_w = np.tensordot(grad_u, maps, axes=(list(range(grad_u.ndim)), list(range(grad_u.ndim))))
    grad_b = float(grad_u.sum())
    return grad_maps, grad_w, grad_b


def average_pool_forward(maps):
    """Plain mean over the group and spatial axes, ``(..., K, d, d, c) -> (..., c)``."""
    maps = _check_maps(maps)
    return maps.mean(axis=(-4, -3, -2))


def average_pool_backward(maps_shape, grad_h):
    grad_h = as_tensor(grad_h)
    K, d1, d2 = maps_shape[-4:-1]
    scale = 1.0 / (K * d1 * d2)
    return np.broadcast_to(grad_h[..., None, None, None, :] * scale, maps_shape).copy()
