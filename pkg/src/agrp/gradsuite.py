"""Finite-difference verification of every differentiable component.

Each check builds a random problem for one seed and returns the worst
relative error reported by ``tensor_core.grad_check``.  ``perturb`` scales
the analytic gradient by a small factor so the harness can prove that it
notices a wrong backward pass.
"""

from __future__ import annotations

import numpy as np

from . import attention as att
from . import losses
from . import tensor_core as tc

TOLERANCE = 1e-5
PERTURB_FACTOR = 1.01
FD_STEP = 1e-6


def _scaled(grads, factor):
    return {k: np.asarray(v) * factor for k, v in grads.items()}


def check_conv(seed, factor=1.0):
    rng = np.random.default_rng(seed)
    side = int(rng.integers(4, 8))
    cin, cout, k = (int(v) for v in rng.integers(1, 4, size=3))
    stride = int(rng.integers(1, 3))
    params = {
        "x": rng.standard_normal((side, side, cin)),
        "kernels": rng.standard_normal((k, k, cin, cout)),
        "bias": rng.standard_normal(cout),
    }
    probe = tc.random_probe(tc.conv2d_forward(params["x"], params["kernels"], params["bias"], stride).shape, seed)

    def f(p):
        y = tc.conv2d_forward(p["x"], p["kernels"], p["bias"], stride)
        lg = tc.conv2d_backward(p["x"], p["kernels"], probe, stride)
        return float(np.sum(y * probe)), _scaled({"x": lg.input, **lg.params}, factor)

    return tc.grad_check(f, params, probe_count=30, fd_step=FD_STEP, seed=seed)


def check_linear(seed, factor=1.0):
    rng = np.random.default_rng(seed)
    n_in, n_out = (int(v) for v in rng.integers(1, 6, size=2))
    params = {
        "x": rng.standard_normal((3, n_in)),
        "weight": rng.standard_normal((n_out, n_in)),
        "bias": rng.standard_normal(n_out),
    }
    probe = tc.random_probe((3, n_out), seed)

    def f(p):
        y = tc.linear_forward(p["x"], p["weight"], p["bias"])
        lg = tc.linear_backward(p["x"], p["weight"], probe)
        return float(np.sum(y * probe)), _scaled({"x": lg.input, **lg.params}, factor)

    return tc.grad_check(f, params, probe_count=30, fd_step=FD_STEP, seed=seed)


def check_relu(seed, factor=1.0):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((5, 5, 2))
    x0[np.abs(x0) < 10 * FD_STEP] = 0.5  # keep probes off the kink
    probe = tc.random_probe(x0.shape, seed)

    def f(p):
        y = tc.relu_forward(p["x"])
        return float(np.sum(y * probe)), _scaled({"x": tc.relu_backward(p["x"], probe)}, factor)

    return tc.grad_check(f, {"x": x0}, probe_count=30, fd_step=FD_STEP, seed=seed)


def check_maxpool(seed, factor=1.0):
    rng = np.random.default_rng(seed)
    side = int(rng.integers(2, 8))
    x0 = rng.standard_normal((side, side, 3))
    probe = tc.random_probe(tc.maxpool2_forward(x0)[0].shape, seed)

    def f(p):
        y, arg = tc.maxpool2_forward(p["x"])
        return float(np.sum(y * probe)), _scaled({"x": tc.maxpool2_backward(probe, arg, p["x"].shape)}, factor)

    return tc.grad_check(f, {"x": x0}, probe_count=30, fd_step=FD_STEP, seed=seed)


def check_softmax_ce(seed, factor=1.0):
    rng = np.random.default_rng(seed)
    label = int(rng.integers(5))

    def f(p):
        loss, grad = losses.softmax_cross_entropy(p["z"], label)
        return loss, _scaled({"z": grad}, factor)

    return tc.grad_check(f, {"z": rng.standard_normal(5)}, probe_count=5, fd_step=FD_STEP, seed=seed)


def check_hinge(seed, factor=1.0):
    rng = np.random.default_rng(seed)
    delta = 1.0 if seed % 2 == 0 else -1.0
    while True:
        u0 = 0.8 * rng.standard_normal((2, 3, 3))
        top = np.sort(u0.ravel())
        # guard: away from the hinge kink, with a unique argmax, and active
        if abs(1 - delta * top[-1]) >= 10 * FD_STEP and top[-1] - top[-2] >= 10 * FD_STEP and delta * top[-1] < 1:
            break

    def f(p):
        r, g = losses.attention_hinge(p["u"], delta)
        return r, _scaled({"u": g}, factor)

    return tc.grad_check(f, {"u": u0}, probe_count=18, fd_step=FD_STEP, seed=seed)


def check_attention(seed, factor=1.0, group_size=2):
    rng = np.random.default_rng(seed)
    params = {
        "maps": rng.standard_normal((group_size, 4, 4, 3)),
        "w": rng.standard_normal(3),
        "b": np.asarray(rng.standard_normal()),
    }
    probe = tc.random_probe((3,), seed)

    def f(p):
        ap = att.AttentionParams(p["w"], float(p["b"]))
        tr = att.attention_forward(p["maps"], ap)
        gm, gw, gb = att.attention_backward(tr, p["maps"], ap, probe)
        return float(tr.h @ probe), _scaled({"maps": gm, "w": gw, "b": np.asarray(gb)}, factor)

    return tc.grad_check(f, params, probe_count=30, fd_step=FD_STEP, seed=seed)


COMPONENTS = {
    "conv": check_conv,
    "linear": check_linear,
    "relu": check_relu,
    "maxpool": check_maxpool,
    "softmax_ce": check_softmax_ce,
    "hinge": check_hinge,
    "attention_k1": lambda seed, factor=1.0: check_attention(seed, factor, 1),
    "attention_k2": lambda seed, factor=1.0: check_attention(seed, factor, 2),
    "attention_k3": lambda seed, factor=1.0: check_attention(seed, factor, 3),
}


def run_suite(seeds=20, perturb=False, components=None) -> dict[str, float]:
    """Worst relative error of each component over ``seeds`` random problems."""
    factor = PERTURB_FACTOR if perturb else 1.0
    names = list(COMPONENTS) if components is None else list(components)
    return {name: max(COMPONENTS[name](seed, factor) for seed in range(seeds)) for name in names}
