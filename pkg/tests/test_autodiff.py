import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triplesumm import autodiff as ad
from triplesumm.autodiff import GraphError, Tensor


def p64(x):
    return ad.parameter(x, dtype=np.float64)


# -- forward values ---------------------------------------------------------


def test_matmul_hand_expansion():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, [[2, 1], [4, 3]])


def test_matmul_identity_and_zero():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 3)).astype(np.float32))
    b = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
    eye = Tensor(np.eye(3, dtype=np.float32))
    np.testing.assert_array_equal(ad.matmul(a, eye).data, a.data)
    np.testing.assert_array_equal(ad.matmul(ad.matmul(a, eye), b).data, ad.matmul(a, b).data)
    assert not ad.matmul(Tensor(np.zeros((3, 3))), b).data.any()


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_rows_values():
    y = ad.softmax_rows(Tensor(np.array([[0.0, math.log(2.0)]])))
    np.testing.assert_allclose(y.data, [[1 / 3, 2 / 3]], rtol=1e-6)
    np.testing.assert_allclose(ad.softmax_rows(Tensor(np.full((2, 5), 3.0))).data, 0.2, rtol=1e-6)
    np.testing.assert_array_equal(ad.softmax_rows(Tensor(np.array([[4.0], [-2.0]]))).data, 1.0)


def test_softmax_rejects_nan_and_empty_rows():
    with pytest.raises(ValueError):
        ad.softmax_rows(Tensor(np.array([[np.nan, 1.0]])))
    with pytest.raises(ValueError):
        ad.softmax(Tensor(np.zeros((2, 2))), mask=np.array([[True, False], [False, False]]))


def test_layer_norm_reference():
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    y = ad.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-12)
    np.testing.assert_allclose(y.data, [-1.224744871391589, 0.0, 1.224744871391589], rtol=1e-9)
    const = ad.layer_norm(Tensor(np.full(4, 7.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(const.data, 0.0)
    bias = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(ad.layer_norm(Tensor(np.zeros(3)), Tensor(np.ones(3)), Tensor(bias)).data, bias)
    with pytest.raises(ValueError):
        ad.layer_norm(Tensor(np.zeros(3)), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def _reference_attention(q, k, v, mask=None):
    logits = q @ k.T / math.sqrt(q.shape[-1])
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    w = np.exp(logits - logits.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v, w


def test_attention_against_direct_formula():
    rng = np.random.default_rng(3)
    q, k, v = (rng.normal(size=(3, 2)) for _ in range(3))
    out, w = ad.scaled_masked_attention(Tensor(q), Tensor(k), Tensor(v), np.ones((3, 3), bool))
    ref_out, ref_w = _reference_attention(q, k, v)
    np.testing.assert_allclose(out.data, ref_out, rtol=1e-12)
    np.testing.assert_allclose(w.data, ref_w, rtol=1e-12)


def test_attention_trivial_cases():
    v = np.array([[1.0, 2.0, 3.0]])
    out, w = ad.scaled_masked_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((1, 4))), Tensor(v))
    np.testing.assert_array_equal(w.data, 1.0)
    np.testing.assert_array_equal(out.data, np.repeat(v, 2, axis=0))
    vals = np.arange(12.0).reshape(4, 3)
    out, _ = ad.scaled_masked_attention(Tensor(np.zeros((2, 5))), Tensor(np.ones((4, 5))), Tensor(vals))
    np.testing.assert_allclose(out.data, np.tile(vals.mean(0), (2, 1)))


def test_attention_mask_zeroes_and_full_mask_matches_unmasked():
    rng = np.random.default_rng(4)
    q, k, v = (Tensor(rng.normal(size=(5, 4)).astype(np.float32)) for _ in range(3))
    band = np.abs(np.arange(5)[:, None] - np.arange(5)[None, :]) <= 1
    _, w = ad.scaled_masked_attention(q, k, v, band)
    assert (w.data[~band] == 0.0).all()
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)
    full, _ = ad.scaled_masked_attention(q, k, v, np.ones((5, 5), bool))
    plain, _ = ad.scaled_masked_attention(q, k, v)
    np.testing.assert_array_equal(full.data, plain.data)
    with pytest.raises(ValueError):
        ad.scaled_masked_attention(q, k, v, np.zeros((5, 5), bool))


def test_activations():
    assert ad.gelu(Tensor(np.array(0.0))).data == 0.0
    assert ad.sigmoid(Tensor(np.array(0.0))).data == 0.5
    assert ad.gelu(Tensor(np.array(1.0))).data == pytest.approx(0.8413447460685429, abs=1e-12)
    assert ad.silu(Tensor(np.array(20.0))).data == pytest.approx(20.0, rel=1e-6)
    assert np.isfinite(ad.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data).all()
    with pytest.raises(ValueError):
        ad.activation(Tensor(np.zeros(2)), "tanh")


def test_swiglu_reference():
    one = Tensor(np.ones((1, 1)))
    out = ad.swiglu_ffn(Tensor(np.ones((1, 1))), one, one, one)
    assert out.data[0, 0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
    zero = np.zeros((6, 10))
    out = ad.swiglu_ffn(Tensor(np.ones((4, 6))), Tensor(zero), Tensor(zero), Tensor(np.zeros((10, 6))))
    assert out.shape == (4, 6) and not out.data.any()
    with pytest.raises(ValueError):
        ad.swiglu_ffn(Tensor(np.ones((4, 5))), Tensor(zero), Tensor(zero), Tensor(np.zeros((10, 6))))


def test_dropout_is_inverted_and_seeded():
    x = Tensor(np.ones((200, 50), dtype=np.float32))
    a = ad.dropout(x, 0.1, np.random.default_rng(7)).data
    b = ad.dropout(x, 0.1, np.random.default_rng(7)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, np.float32(1 / 0.9)}
    assert abs(a.mean() - 1.0) < 0.02
    assert ad.dropout(x, 0.1, None) is x


# -- reverse mode ------------------------------------------------------------


def test_sum_gradient_is_ones_and_unused_param_zero():
    x = p64(np.arange(6.0).reshape(2, 3))
    unused = p64(np.ones(3))
    ad.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    assert unused.grad is None


def test_fan_out_accumulates():
    x = p64(np.array([2.0, -1.0]))
    y = ad.tsum(x * x + x * 3.0 + x)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 4.0)


def test_backward_errors():
    x = p64(np.ones(3))
    with pytest.raises(GraphError):
        (x * 2.0).backward()
    loss = ad.tsum(x * 2.0)
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_no_grad_builds_no_graph():
    x = p64(np.ones(3))
    with ad.no_grad():
        y = ad.tsum(x * 2.0)
    assert not y.requires_grad


def test_norm_of_linear_map_matches_fd_32bit():
    rng = np.random.default_rng(0)
    w = ad.parameter(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(3, 1)).astype(np.float32))
    w.grad = None
    ad.tsum(ad.square(ad.matmul(w, x))).backward()
    analytic = [w.grad.copy()]
    w64 = p64(w.data)
    x64 = Tensor(x.data.astype(np.float64))
    err = ad.finite_difference_check(lambda: ad.tsum(ad.square(ad.matmul(w64, x64))), [w64], analytic=analytic)
    assert err < 1e-3


def test_fd_linear_and_quadratic_64bit():
    rng = np.random.default_rng(1)
    a = p64(rng.normal(size=5))
    c = rng.normal(size=5)
    assert ad.finite_difference_check(lambda: ad.tsum(a * c), [a]) < 1e-8
    assert ad.finite_difference_check(lambda: ad.tsum(a * a * c), [a], h=1e-3) < 1e-6
    with pytest.raises(ValueError):
        ad.finite_difference_check(lambda: ad.tsum(a), [a], h=0.0)


OPS = {
    "softmax": lambda x: ad.softmax(x, axis=-1),
    "masked_softmax": lambda x: ad.softmax(x, -1, np.tril(np.ones((3, 3), bool))),
    "layer_norm": lambda x: ad.layer_norm(x, Tensor(np.linspace(0.5, 1.5, 3)), Tensor(np.arange(3.0))),
    "gelu": ad.gelu,
    "silu": ad.silu,
    "sigmoid": ad.sigmoid,
    "transpose": lambda x: ad.transpose(x, (1, 0)),
    "getitem": lambda x: x[np.array([0, 2, 2]), 1:],
    "reshape": lambda x: ad.reshape(x, (9,)),
    "mean": lambda x: ad.mean(x, axis=0, keepdims=True),
    "concat": lambda x: ad.concat([x, x * 2.0], axis=1),
    "stack": lambda x: ad.stack([x, ad.square(x)], axis=0),
    "where": lambda x: ad.where(np.eye(3, dtype=bool), x, x * 3.0),
    "div": lambda x: x / (ad.square(x) + 1.0),
    "matmul_batched": lambda x: ad.matmul(ad.stack([x, x * 0.5]), x),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_64bit(name):
    rng = np.random.default_rng(sorted(OPS).index(name))
    x = p64(rng.normal(size=(3, 3)))
    weights = rng.normal(size=OPS[name](Tensor(x.data)).shape)
    err = ad.finite_difference_check(lambda: ad.tsum(OPS[name](x) * weights), [x])
    assert err < 1e-6, name


def test_attention_and_swiglu_gradients_64bit():
    rng = np.random.default_rng(5)
    q, k, v = (p64(rng.normal(size=(2, 4, 3))) for _ in range(3))
    mask = np.abs(np.arange(4)[:, None] - np.arange(4)[None, :]) <= 1
    r = rng.normal(size=(2, 4, 3))
    assert ad.finite_difference_check(lambda: ad.tsum(ad.scaled_masked_attention(q, k, v, mask)[0] * r),
                                      [q, k, v]) < 1e-6
    x = p64(rng.normal(size=(4, 3)))
    w1, w3 = p64(rng.normal(size=(3, 5))), p64(rng.normal(size=(3, 5)))
    w2 = p64(rng.normal(size=(5, 3)))
    assert ad.finite_difference_check(lambda: ad.tsum(ad.swiglu_ffn(x, w1, w3, w2) * r[0]), [x, w1, w3, w2]) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    y = ad.softmax_rows(Tensor(np.array([values], dtype=np.float32)))
    assert (y.data >= 0).all()
    assert abs(float(y.data.sum()) - 1.0) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_broadcast_add_gradient_shapes(a, b, c):
    x = p64(np.ones((a, 1, c)))
    y = p64(np.ones((b, 1)))
    ad.tsum(x + y).backward()
    assert x.grad.shape == x.shape and y.grad.shape == y.shape
    np.testing.assert_array_equal(x.grad, b)
    np.testing.assert_array_equal(y.grad, a * c)
