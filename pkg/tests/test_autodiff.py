import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from floodstgcn import autodiff as ad
from floodstgcn.exceptions import DimensionError, FloodSTGCNError, WindowTooShortError
from oracles import finite_difference_check, naive_causal_conv

T = ad.Tensor


def fd_ok(loss_fn, params, seed=0, n=30, tol=1e-4):
    errs, _ = finite_difference_check(loss_fn, params, n, np.random.default_rng(seed))
    assert errs.max() < tol, errs.max()


# -- matmul --------------------------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(np.eye(2), a).data, a)


def test_matmul_hand_arithmetic():
    assert ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    params = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=(3, 3))}
    errs, _ = finite_difference_check(lambda p: ad.tsum(p["a"] @ p["b"]), params, 18, rng)
    assert errs.max() < 1e-6


def test_matmul_gradient_rules():
    rng = np.random.default_rng(2)
    a, b = T(rng.normal(size=(2, 3)), requires_grad=True), T(rng.normal(size=(3, 4)), requires_grad=True)
    g = rng.normal(size=(2, 4))
    da, db = ad.backward(ad.tsum(ad.matmul(a, b) * g), [a, b])
    np.testing.assert_allclose(da, g @ b.data.T, rtol=1e-14)
    np.testing.assert_allclose(db, a.data.T @ g, rtol=1e-14)


# -- causal convolution ------------------------------------------------------------------------

def test_causal_conv_time_extent():
    out = ad.causal_conv1d(np.zeros((12, 4, 2)), np.zeros((3, 2, 5)))
    assert out.shape == (10, 4, 5)


def test_causal_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(6, 3, 4))
    out = ad.causal_conv1d(x, np.eye(4)[None])
    np.testing.assert_array_equal(out.data, x)


def test_causal_conv_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x, k, b = rng.normal(size=(9, 5, 3)), rng.normal(size=(3, 3, 4)), rng.normal(size=4)
    np.testing.assert_allclose(ad.causal_conv1d(x, k, b).data, naive_causal_conv(x, k, b), rtol=0, atol=1e-12)


def test_causal_conv_batched_matches_per_sample():
    rng = np.random.default_rng(4)
    x, k = rng.normal(size=(3, 7, 4, 2)), rng.normal(size=(2, 2, 3))
    out = ad.causal_conv1d(x, k).data
    for i in range(3):
        np.testing.assert_allclose(out[i], naive_causal_conv(x[i], k), atol=1e-12)


def test_causal_conv_window_too_short():
    with pytest.raises(WindowTooShortError):
        ad.causal_conv1d(np.zeros((2, 3, 1)), np.zeros((3, 1, 1)))


@given(n=st.integers(2, 8), kt=st.integers(1, 4), t0=st.integers(0, 7), seed=st.integers(0, 2**16))
def test_causal_conv_never_reads_the_future(n, kt, t0, seed):
    if kt > n or t0 > n - kt:
        return
    rng = np.random.default_rng(seed)
    x, k = rng.normal(size=(n, 3, 2)), rng.normal(size=(kt, 2, 2))
    base = ad.causal_conv1d(x, k).data[t0]
    for t in range(t0 + kt, n):
        y = x.copy()
        y[t] += rng.normal(size=y[t].shape)
        assert np.array_equal(ad.causal_conv1d(y, k).data[t0], base)


def test_causal_conv_gradients():
    rng = np.random.default_rng(5)
    params = {"x": rng.normal(size=(6, 3, 2)), "k": rng.normal(size=(3, 2, 4)), "b": rng.normal(size=4)}
    w = rng.normal(size=(4, 3, 4))
    fd_ok(lambda p: ad.tsum(ad.causal_conv1d(p["x"], p["k"], p["b"]) * w), params)


# -- GLU, ReLU, layer norm -----------------------------------------------------------------------

def test_glu_zero_gate_halves():
    p = np.array([1.0, -2.0, 4.0])
    np.testing.assert_array_equal(ad.glu(p, np.zeros(3)).data, 0.5 * p)


def test_glu_zero_value():
    np.testing.assert_array_equal(ad.glu(np.zeros(4), np.arange(4.0)).data, np.zeros(4))


def test_glu_log3():
    np.testing.assert_allclose(ad.glu([2.0], [math.log(3.0)]).data, [1.5], rtol=1e-15)


def test_glu_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.glu(np.zeros(3), np.zeros(2))


def test_split_glu_equals_sliced_glu():
    rng = np.random.default_rng(6)
    z, r = rng.normal(size=(4, 3, 6)), rng.normal(size=(4, 3, 3))
    expect = ad.glu(z[..., :3] + r, z[..., 3:]).data
    np.testing.assert_allclose(ad.split_glu(z, r).data, expect, rtol=1e-15)


def test_glu_and_split_glu_gradients():
    rng = np.random.default_rng(7)
    w = rng.normal(size=(3, 4))
    fd_ok(lambda p: ad.tsum(ad.glu(p["p"], p["q"]) * w), {"p": rng.normal(size=(3, 4)), "q": rng.normal(size=(3, 4))})
    fd_ok(lambda p: ad.tsum(ad.split_glu(p["z"], p["r"]) * w),
          {"z": rng.normal(size=(3, 8)), "r": rng.normal(size=(3, 4))})


def test_sigmoid_is_stable_for_large_inputs():
    out = ad.sigmoid([-800.0, 0.0, 800.0]).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-300)


def test_relu_values():
    assert ad.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]


def test_relu_identity_on_positive():
    x = np.array([0.5, 3.0, 7.25])
    np.testing.assert_array_equal(ad.relu(x).data, x)


def test_relu_subgradient():
    x = T([-1.0, 2.0], requires_grad=True)
    (g,) = ad.backward(ad.tsum(ad.relu(x)), [x])
    assert g.tolist() == [0.0, 1.0]


def test_layer_norm_constant_channels_give_zero():
    out = ad.layer_norm(np.full((2, 3, 4), 7.0), np.ones(4), np.zeros(4))
    np.testing.assert_array_equal(out.data, np.zeros((2, 3, 4)))


def test_layer_norm_two_channels():
    out = ad.layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], rtol=1e-10)


def test_layer_norm_zero_gain_gives_bias():
    rng = np.random.default_rng(8)
    b = rng.normal(size=5)
    out = ad.layer_norm(rng.normal(size=(3, 2, 5)), np.zeros(5), b)
    np.testing.assert_array_equal(out.data, np.broadcast_to(b, (3, 2, 5)))


def test_layer_norm_gradients():
    rng = np.random.default_rng(9)
    w = rng.normal(size=(2, 3, 5))
    fd_ok(lambda p: ad.tsum(ad.layer_norm(p["x"], p["g"], p["b"]) * w),
          {"x": rng.normal(size=(2, 3, 5)), "g": rng.normal(size=5), "b": rng.normal(size=5)})


# -- structural ops and backward -------------------------------------------------------------------

def test_graph_propagate_and_linear_gradients():
    rng = np.random.default_rng(10)
    op = rng.normal(size=(4, 4))
    w = rng.normal(size=(2, 4, 3))
    fd_ok(lambda p: ad.tsum(ad.linear(ad.graph_propagate(op, p["x"]), p["w"]) * w),
          {"x": rng.normal(size=(2, 4, 2)), "w": rng.normal(size=(2, 3))})


def test_getitem_concat_reshape_gradients():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(3, 5))

    def loss(p):
        a = p["a"][1:, :, :2]
        joined = ad.concat([ad.reshape(a, (3, 4)), p["b"][:, :1]], axis=-1)
        return ad.mean(joined * w)

    fd_ok(loss, {"a": rng.normal(size=(4, 2, 3)), "b": rng.normal(size=(3, 2))})


def test_broadcast_add_mul_sub_gradients():
    rng = np.random.default_rng(12)
    w = rng.normal(size=(3, 4))
    fd_ok(lambda p: ad.tsum(((p["x"] + p["b"]) * p["s"] - p["x"]) * w),
          {"x": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": rng.normal(size=(3, 1))})


def test_backward_sum_gives_ones():
    x = T(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
    (g,) = ad.backward(ad.tsum(x), [x])
    np.testing.assert_array_equal(g, np.ones((3, 2)))


def test_backward_sum_of_squares():
    x = T([1.0, -2.0], requires_grad=True)
    (g,) = ad.backward(ad.tsum(x * x), [x])
    assert g.tolist() == [2.0, -4.0]


def test_backward_shared_node_accumulates_once():
    # y = x*x + x reuses x on two paths; each path must contribute exactly once
    x = T([3.0], requires_grad=True)
    h = x * x
    (g,) = ad.backward(ad.tsum(h + h + x), [x])
    assert g.tolist() == [13.0]


def test_backward_unreachable_gets_zero():
    x, y = T([1.0, 2.0], requires_grad=True), T([[5.0]], requires_grad=True)
    gx, gy = ad.backward(ad.tsum(x), [x, y])
    assert gy.tolist() == [[0.0]]


def test_backward_mapping_returns_dict():
    x = T([1.0, 2.0], requires_grad=True)
    assert set(ad.backward(ad.tsum(x), {"x": x})) == {"x"}


def test_backward_rejects_non_scalar():
    x = T([1.0, 2.0], requires_grad=True)
    with pytest.raises(FloodSTGCNError):
        ad.backward(x * 2.0, [x])


def test_no_grad_records_nothing():
    x = T([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_tensor_data_is_immutable_copy():
    src = np.array([1.0, 2.0])
    t = T(src)
    src[0] = 9.0
    assert t.data[0] == 1.0
    with pytest.raises(ValueError):
        t.data[0] = 5.0


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_forward_is_deterministic(values):
    x = np.array(values)
    a = ad.layer_norm(ad.relu(x)[None], np.ones(len(values)), np.zeros(len(values))).data
    b = ad.layer_norm(ad.relu(x)[None], np.ones(len(values)), np.zeros(len(values))).data
    assert np.array_equal(a, b)


@given(shape=st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)), seed=st.integers(0, 2**16))
def test_elementwise_ops_match_finite_differences(shape, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=shape)
    params = {"a": rng.normal(size=shape), "b": rng.normal(size=shape)}
    fd_ok(lambda p: ad.tsum(ad.glu(p["a"], p["b"]) * w + ad.sigmoid(p["a"] * p["b"])), params, seed=seed, n=10)
