import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from agrp import attention as att
from agrp import tensor_core as tc
from agrp.errors import DimensionError, StateError


def naive_attention(maps, w, b, eps):
    """Loop-by-loop reference for the pooled vector of one group (K, d, d, c)."""
    K, d, _, c = maps.shape
    h = np.zeros(c)
    for k in range(K):
        s = np.zeros((d, d))
        for i in range(d):
            for j in range(d):
                u = sum(w[ch] * maps[k, i, j, ch] for ch in range(c)) + b
                s[i, j] = np.log1p(np.exp(u))
        total = sum(s[i, j] + eps for i in range(d) for j in range(d))
        for i in range(d):
            for j in range(d):
                h += (s[i, j] + eps) / total * maps[k, i, j]
    return h / (d * d * K)


def random_case(seed, K=2, d=4, c=3):
    rng = np.random.default_rng(seed)
    maps = rng.standard_normal((K, d, d, c))
    params = att.AttentionParams(rng.standard_normal(c), float(rng.standard_normal()))
    return maps, params


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_naive_oracle(seed):
    maps, p = random_case(seed)
    trace = att.attention_forward(maps, p, 0.1)
    np.testing.assert_allclose(trace.h, naive_attention(maps, p.w, p.b, 0.1), rtol=0, atol=1e-12)


def test_very_negative_scores_give_uniform_weights():
    maps = np.random.default_rng(0).random((2, 4, 4, 3))
    trace = att.attention_forward(maps, att.AttentionParams(np.zeros(3), -60.0), 0.1)
    np.testing.assert_allclose(trace.a, 1 / 16, atol=1e-6)


def test_constant_feature_vector_scales_by_cell_count():
    v = np.array([2.0, -1.0, 0.5])
    maps = np.broadcast_to(v, (1, 2, 2, 3)).copy()
    for seed in range(3):
        rng = np.random.default_rng(seed)
        p = att.AttentionParams(rng.standard_normal(3), float(rng.standard_normal()))
        np.testing.assert_allclose(att.attention_forward(maps, p).h, v / 4, atol=1e-14)


def test_uniform_attention_is_average_pool_up_to_cell_count():
    # a = 1/d^2 everywhere; the pooled vector carries an extra 1/d^2 that the
    # model layer multiplies back (see model.attention_rescale)
    maps, _ = random_case(4)
    trace = att.attention_forward(maps, att.AttentionParams(np.zeros(3), 0.0), 0.1)
    np.testing.assert_allclose(trace.h * 16, att.average_pool_forward(maps), atol=1e-14)


def test_batched_groups_match_one_by_one():
    rng = np.random.default_rng(7)
    maps = rng.standard_normal((3, 2, 4, 4, 3))
    p = att.AttentionParams(rng.standard_normal(3), 0.2)
    batched = att.attention_forward(maps, p).h
    for n in range(3):
        np.testing.assert_allclose(batched[n], att.attention_forward(maps[n], p).h, atol=1e-15)


def test_channel_mismatch():
    with pytest.raises(DimensionError):
        att.attention_forward(np.zeros((1, 4, 4, 3)), att.AttentionParams(np.zeros(2)))


def test_zero_epsilon_with_vanishing_scores():
    # softplus(-800) underflows to exactly zero
    with pytest.raises(ZeroDivisionError):
        att.attention_forward(np.zeros((1, 2, 2, 1)), att.AttentionParams(np.zeros(1), -800.0), 0.0)


def test_backward_rejects_foreign_trace():
    maps, p = random_case(0)
    trace = att.attention_forward(maps, p)
    with pytest.raises(StateError):
        att.attention_backward(trace, maps[:1], p, np.ones(3))


def test_zero_upstream_gradient_gives_zero_gradients():
    maps, p = random_case(1)
    trace = att.attention_forward(maps, p)
    gm, gw, gb = att.attention_backward(trace, maps, p, np.zeros(3))
    assert not gm.any() and not gw.any() and gb == 0.0


def test_detector_weight_gradient_at_flat_scores():
    maps, _ = random_case(2)
    probe = np.array([0.3, -1.2, 0.7])

    def f(p):
        ap = att.AttentionParams(p["w"], 0.4)
        tr = att.attention_forward(maps, ap)
        _, gw, _ = att.attention_backward(tr, maps, ap, probe)
        return float(tr.h @ probe), {"w": gw}

    assert tc.grad_check(f, {"w": np.zeros(3)}, probe_count=3) < 1e-6


@pytest.mark.parametrize("K", [1, 2, 3])
@pytest.mark.parametrize("seed", range(20))
def test_backward_grad_check(seed, K):
    rng = np.random.default_rng(seed)
    params = {
        "maps": rng.standard_normal((K, 4, 4, 3)),
        "w": rng.standard_normal(3),
        "b": np.asarray(rng.standard_normal()),
    }
    probe = tc.random_probe((3,), seed)

    def f(p):
        ap = att.AttentionParams(p["w"], float(p["b"]))
        tr = att.attention_forward(p["maps"], ap)
        gm, gw, gb = att.attention_backward(tr, p["maps"], ap, probe)
        return float(tr.h @ probe), {"maps": gm, "w": gw, "b": np.asarray(gb)}

    assert tc.grad_check(f, params, probe_count=30, seed=seed) < 1e-5


def test_average_pool_constant_and_antisymmetric():
    v = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(att.average_pool_forward(np.broadcast_to(v, (2, 4, 4, 3))), v)
    m = np.random.default_rng(0).standard_normal((4, 4, 3))
    assert np.allclose(att.average_pool_forward(np.stack([m, -m])), 0.0, atol=1e-15)


def test_average_pool_matches_direct_sum():
    maps = np.random.default_rng(5).standard_normal((2, 4, 4, 3))
    want = sum(maps[k, i, j] for k in range(2) for i in range(4) for j in range(4)) / 32
    np.testing.assert_allclose(att.average_pool_forward(maps), want, atol=1e-12)


def test_average_pool_backward_grad_check():
    probe = tc.random_probe((3,), 1)

    def f(p):
        return float(att.average_pool_forward(p["m"]) @ probe), {"m": att.average_pool_backward(p["m"].shape, probe)}

    assert tc.grad_check(f, {"m": np.random.default_rng(1).random((2, 3, 3, 3))}) < 1e-6


finite = st.floats(-20, 20, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(
    maps=arrays(np.float64, (2, 3, 3, 2), elements=finite),
    w=arrays(np.float64, (2,), elements=finite),
    b=finite,
    eps=st.floats(1e-3, 1.0),
)
def test_weights_positive_and_sum_to_one(maps, w, b, eps):
    trace = att.attention_forward(maps, att.AttentionParams(w, b), eps)
    assert np.all(trace.a > 0) and np.all(trace.a <= 1)
    np.testing.assert_allclose(trace.a.sum(axis=(-2, -1)), 1.0, atol=1e-9)
