"""Network assembly: shared extractor, group pooling, linear classifier.

Parameters live in one flat ``dict[str, ndarray]`` so that SGD, gradient
checks and checkpoints all treat them uniformly:

    conv{i}.kernels   (k, k, cin, cout)
    conv{i}.bias      (cout,)
    attention.w       (c,)
    attention.b       ()
    classifier.weight (C, c)
    classifier.bias   (C,)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import attention as att
from . import tensor_core as tc
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class ExtractorSpec:
    """Either ``identity`` (inputs already are feature maps) or
    ``blocks`` repetitions of conv(k x k, valid) -> relu -> maxpool2."""

    kind: str = "conv"
    blocks: int = 1
    channels: int = 8
    kernel: int = 3
    input_shift: float = 0.5  # subtracted from pixels before the first conv

    def __post_init__(self):
        if self.kind not in ("identity", "conv"):
            raise ConfigurationError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "conv" and not 1 <= self.blocks <= 2:
            raise ConfigurationError(f"conv extractor supports 1 or 2 blocks, got {self.blocks}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ExtractorSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown extractor keys: {sorted(unknown)}")
        return cls(**d)

    def output_side(self, side: int) -> int:
        if self.kind == "identity":
            return side
        for _ in range(self.blocks):
            side = (side - self.kernel + 1) // 2
        if side < 1:
            raise DimensionError("input too small for the extractor")
        return side

    def output_channels(self, channels_in: int) -> int:
        return channels_in if self.kind == "identity" else self.channels

    def cell_centers(self, d: int) -> np.ndarray:
        """Receptive-field centre of each output cell, in continuous pixel
        coordinates where pixel ``q`` spans ``[q, q + 1)``."""
        centers = np.arange(d, dtype=np.float64) + 0.5
        if self.kind == "identity":
            return centers
        offset, stride = 0.0, 1.0
        for _ in range(self.blocks):
            # conv shifts the centre by (k - 1) / 2, pool doubles the stride
            offset += stride * (self.kernel - 1) / 2
            offset += stride * 0.5
            stride *= 2
        return offset + stride * np.arange(d) + 0.5


def extractor_forward(params, spec: ExtractorSpec, images):
    """``(..., S, S, cin) -> (..., d, d, c)`` plus a cache for the backward pass."""
    x = tc.as_tensor(images)
    if spec.kind == "identity":
        return x, []
    x = x - spec.input_shift
    cache = []
    for i in range(spec.blocks):
        pre = tc.conv2d_forward(x, params[f"conv{i}.kernels"], params[f"conv{i}.bias"])
        act = tc.relu_forward(pre)
        pooled, arg = tc.maxpool2_forward(act)
        cache.append((x, pre, arg))
        x = pooled
    return x, cache


def extractor_backward(params, spec: ExtractorSpec, cache, grad_out, grads):
    """Accumulate extractor parameter gradients into ``grads``; return input gradient."""
    g = grad_out
    for i in reversed(range(len(cache))):
        x, pre, arg = cache[i]
        g = tc.maxpool2_backward(g, arg, pre.shape)
        g = tc.relu_backward(pre, g)
        lg = tc.conv2d_backward(x, params[f"conv{i}.kernels"], g)
        grads[f"conv{i}.kernels"] = lg.params["kernels"]
        grads[f"conv{i}.bias"] = lg.params["bias"]
        g = lg.input
    return g


def init_params(spec: ExtractorSpec, class_count: int, channels_in: int, rng) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights; attention detector and biases start at zero."""
    params = {}
    cin = channels_in
    if spec.kind == "conv":
        for i in range(spec.blocks):
            fan_in = spec.kernel * spec.kernel * cin
            limit = np.sqrt(6.0 / fan_in)
            params[f"conv{i}.kernels"] = rng.uniform(-limit, limit, size=(spec.kernel, spec.kernel, cin, spec.channels))
            params[f"conv{i}.bias"] = np.zeros(spec.channels)
            cin = spec.channels
    params["attention.w"] = np.zeros(cin)
    params["attention.b"] = np.zeros(())
    limit = 1.0 / np.sqrt(cin)
    params["classifier.weight"] = rng.uniform(-limit, limit, size=(class_count, cin))
    params["classifier.bias"] = np.zeros(class_count)
    return params


def attention_params(params) -> att.AttentionParams:
    return att.AttentionParams(params["attention.w"], float(params["attention.b"]))


def attention_rescale(feats) -> float:
    """Fixed factor d^2 applied to the attention-pooled vector.

    Attention weights already sum to one per image, so the extra 1/d^2 of
    the pooling formula only shrinks the classifier input.  Multiplying it
    back is a reparametrization of the classifier weight that keeps SGD
    step sizes comparable with plain average pooling.
    """
    d = feats.shape[-2]
    return float(d * d)


@dataclass
class ForwardCache:
    images_shape: tuple
    feats: np.ndarray  # (N, K, d, d, c)
    ext_cache: list
    trace: att.AttentionTrace | None
    h: np.ndarray
    logits: np.ndarray = field(repr=False, default=None)


def forward_groups(params, spec: ExtractorSpec, images, use_attention: bool, epsilon: float):
    """Logits for a batch of groups ``(N, K, S, S, cin) -> (N, C)``."""
    images = tc.as_tensor(images)
    if images.ndim != 5:
        raise DimensionError(f"group batch must be (N, K, S, S, cin), got shape {images.shape}")
    N, K = images.shape[:2]
    flat, ext_cache = extractor_forward(params, spec, images.reshape(N * K, *images.shape[2:]))
    feats = flat.reshape(N, K, *flat.shape[1:])
    if use_attention:
        trace = att.attention_forward(feats, attention_params(params), epsilon)
        h = trace.h * attention_rescale(feats)
    else:
        trace = None
        h = att.average_pool_forward(feats)
    logits = tc.linear_forward(h, params["classifier.weight"], params["classifier.bias"])
    return logits, ForwardCache(images.shape, feats, ext_cache, trace, h, logits)


def backward_groups(params, spec: ExtractorSpec, cache: ForwardCache, grad_logits, grad_u=None):
    """Parameter gradients of ``sum(grad_logits * logits) + sum(grad_u * u)``."""
    grads = {}
    lg = tc.linear_backward(cache.h, params["classifier.weight"], grad_logits)
    grads["classifier.weight"] = lg.params["weight"]
    grads["classifier.bias"] = lg.params["bias"]
    feats = cache.feats
    if cache.trace is not None:
        ap = attention_params(params)
        grad_h = lg.input * attention_rescale(feats)
        g_feats, g_w, g_b = att.attention_backward(cache.trace, feats, ap, grad_h)
        if grad_u is not None:
            g_feats = g_feats + grad_u[..., None] * ap.w
            g_w = g_w + np.tensordot(grad_u, feats, axes=(list(range(grad_u.ndim)),) * 2)
            g_b = g_b + float(grad_u.sum())
        grads["attention.w"] = g_w
        grads["attention.b"] = np.asarray(g_b)
    else:
        g_feats = att.average_pool_backward(feats.shape, lg.input)
        grads["attention.w"] = np.zeros_like(params["attention.w"])
        grads["attention.b"] = np.zeros(())
    N, K = cache.images_shape[:2]
    g_flat = g_feats.reshape(N * K, *feats.shape[2:])
    extractor_backward(params, spec, cache.ext_cache, g_flat, grads)
    return grads
