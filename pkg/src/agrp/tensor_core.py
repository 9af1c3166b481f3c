"""Dense float64 primitives with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` in float64.  Spatial layouts are
channels-last: an image or feature map is ``(..., h, w, c)`` where any
number of leading batch axes is allowed.  Every ``*_forward`` has a
matching ``*_backward`` that returns exact gradients, and ``grad_check``
compares those against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, EvaluationError

SOFTPLUS_SWITCH = 30.0


@dataclass
class LayerGrads:
    """Gradients produced by one backward call."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    input: np.ndarray | None = None


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def softplus(x):
    """ln(1 + exp(x)), switching to x + ln(1 + exp(-x)) above 30."""
    x = as_tensor(x)
    out = np.empty_like(x)
    big = x > SOFTPLUS_SWITCH
    out[big] = x[big] + np.log1p(np.exp(-x[big]))
    small = ~big
    out[small] = np.log1p(np.exp(x[small]))
    return out


def sigmoid(x):
    """Derivative of softplus, evaluated without overflow."""
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _check_conv_shapes(x, kernels, bias, stride):
    if x.ndim < 3:
        raise DimensionError(f"input must be (..., h, w, cin), got shape {x.shape}")
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be (k, k, cin, cout), got shape {kernels.shape}")
    k, k2, cin, cout = kernels.shape
    if k != k2:
        raise DimensionError(f"kernel axis 1 has size {k2}, expected square size {k}")
    if x.shape[-1] != cin:
        raise DimensionError(f"input channel axis has size {x.shape[-1]}, kernels expect cin={cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias axis 0 has size {bias.shape}, expected cout={cout}")
    h, w = x.shape[-3], x.shape[-2]
    if k > h:
        raise DimensionError(f"input height axis has size {h}, smaller than kernel size {k}")
    if k > w:
        raise DimensionError(f"input width axis has size {w}, smaller than kernel size {k}")
    if int(stride) != stride or stride < 1:
        raise DimensionError(f"stride must be a positive integer, got {stride}")
    return k, cin, cout


def _patches(x, k, stride):
    # (..., ho, wo, cin, k, k) view; copied by the reshape in callers
    win = sliding_window_view(x, (k, k), axis=(-3, -2))
    return win[..., ::stride, ::stride, :, :, :]


def conv2d_forward(x, kernels, bias, stride=1):
    """Valid cross-correlation of ``(..., h, w, cin)`` with ``(k, k, cin, cout)`` kernels."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    k, cin, cout = _check_conv_shapes(x, kernels, bias, stride)
    win = _patches(x, k, stride)
    ho, wo = win.shape[-5], win.shape[-4]
    cols = win.reshape(*win.shape[:-3], cin * k * k)
    kmat = kernels.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)
    out = cols @ kmat + bias
    assert out.shape[-3:] == (ho, wo, cout)
    return out


def conv2d_backward(x, kernels, grad_out, stride=1) -> LayerGrads:
    x, kernels, grad_out = as_tensor(x), as_tensor(kernels), as_tensor(grad_out)
    k, cin, cout = _check_conv_shapes(x, kernels, None, stride)
    win = _patches(x, k, stride)
    ho, wo = win.shape[-5], win.shape[-4]
    if grad_out.shape != win.shape[:-3] + (cout,):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match conv output {win.shape[:-3] + (cout,)}"
        )
    cols = win.reshape(-1, cin * k * k)
    g2 = grad_out.reshape(-1, cout)
    grad_k = (cols.T @ g2).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
    grad_b = g2.sum(axis=0)

    kmat = kernels.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)
    dcols = (grad_out @ kmat.T).reshape(*grad_out.shape[:-1], cin, k, k)
    grad_x = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            grad_x[..., i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[..., i, j]
    return LayerGrads(params={"kernels": grad_k, "bias": grad_b}, input=grad_x)


def relu_forward(x):
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x, grad_out):
    return np.where(as_tensor(x) > 0.0, grad_out, 0.0)


def maxpool2_forward(x):
    """2x2 stride-2 max pool over ``(..., h, w, c)``.

    Returns ``(pooled, argmax)``; ``argmax`` indexes the row-major 2x2
    window so ties resolve to the lowest linear index.  Odd trailing rows
    and columns are dropped.
    """
    x = as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"input must be (..., h, w, c), got shape {x.shape}")
    h2, w2 = x.shape[-3] // 2, x.shape[-2] // 2
    if h2 == 0 or w2 == 0:
        raise DimensionError(f"spatial axes {x.shape[-3:-1]} too small for a 2x2 pool")
    lead = x.shape[:-3]
    c = x.shape[-1]
    win = x[..., : 2 * h2, : 2 * w2, :].reshape(*lead, h2, 2, w2, 2, c)
    n = len(lead)
    win = np.moveaxis(win, (n + 1, n + 3), (-2, -1)).reshape(*lead, h2, w2, c, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(grad_out, argmax, input_shape):
    grad_out = as_tensor(grad_out)
    if grad_out.shape != argmax.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match pooled shape {argmax.shape}")
    lead = grad_out.shape[:-3]
    h2, w2, c = grad_out.shape[-3:]
    win = np.zeros(grad_out.shape + (4,))
    np.put_along_axis(win, argmax[..., None], grad_out[..., None], axis=-1)
    n = len(lead)
    win = win.reshape(*lead, h2, w2, c, 2, 2)
    win = np.moveaxis(win, (-2, -1), (n + 1, n + 3)).reshape(*lead, 2 * h2, 2 * w2, c)
    grad_x = np.zeros(input_shape)
    grad_x[..., : 2 * h2, : 2 * w2, :] = win
    return grad_x


def linear_forward(x, weight, bias):
    """y = W x + bias for ``x`` of shape ``(..., n_in)`` and ``W`` of shape ``(n_out, n_in)``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"input feature axis has size {x.shape[-1]}, weight expects {weight.shape[-1]}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias axis 0 has size {bias.shape}, expected {weight.shape[0]}")
    return x @ weight.T + bias


def linear_backward(x, weight, grad_out) -> LayerGrads:
    x, grad_out = as_tensor(x), as_tensor(grad_out)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    return LayerGrads(
        params={"weight": g2.T @ x2, "bias": g2.sum(axis=0)},
        input=grad_out @ weight,
    )


def grad_check(
    fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    probe_count: int = 20,
    fd_step: float = 1e-6,
    seed: int = 0,
    skip: Callable[[str, int], bool] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(params)`` must return ``(scalar_value, grads)`` where ``grads`` has
    the same keys and shapes as ``params``.  ``probe_count`` coordinates are
    drawn uniformly over all parameters (every coordinate when there are
    fewer).  ``skip(name, flat_index)`` can veto a probe, e.g. near a kink.
    """
    if not 1e-7 <= fd_step <= 1e-4:
        raise DomainError(f"fd_step must lie in [1e-7, 1e-4], got {fd_step}")
    work = {name: as_tensor(p).copy() for name, p in params.items()}

    def value_of(p):
        v = fn(p)[0]
        if np.ndim(v) != 0:
            raise DimensionError(f"forward_fn must be scalar-valued, got shape {np.shape(v)}")
        v = float(v)
        if not np.isfinite(v):
            raise EvaluationError(f"forward_fn returned non-finite value {v}")
        return v

    value_of(work)
    _, grads = fn(work)
    for name, p in work.items():
        if np.shape(grads[name]) != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {np.shape(grads[name])}, expected {p.shape}")

    names = sorted(work)
    sizes = np.array([work[n].size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    if total <= probe_count:
        flat = np.arange(total)
    else:
        flat = rng.choice(total, size=probe_count, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for f in np.sort(flat):
        which = int(np.searchsorted(offsets, f, side="right") - 1)
        name, idx = names[which], int(f - offsets[which])
        if skip is not None and skip(name, idx):
            continue
        view = work[name].reshape(-1)
        orig = view[idx]
        view[idx] = orig + fd_step
        f_plus = value_of(work)
        view[idx] = orig - fd_step
        f_minus = value_of(work)
        view[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * fd_step)
        analytic = float(np.asarray(grads[name]).reshape(-1)[idx])
        err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, err)
    return worst


def random_probe(shape, seed=0):
    """Fixed random direction for reducing a vector-valued map to a scalar."""
    return np.random.default_rng(seed).standard_normal(shape)
