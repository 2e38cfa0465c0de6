import numpy as np
import pytest
from hypothesis import given, strategies as st

from effconf import autodiff as ad
from effconf.autodiff import DTensor
from effconf.checks import check_gradients, projected
from effconf.errors import ConfigError, ContractError, DimensionError

from conftest import leaf


def test_matmul_identity_and_projector():
    m = DTensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(DTensor(np.eye(2)), m).data, m.data)
    out = ad.matmul(DTensor([[1.0, 0.0], [0.0, 0.0]]), DTensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        ad.matmul(DTensor(np.zeros((3, 4))), DTensor(np.zeros((3, 2))))


def test_matmul_grad_of_sum(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    assert check_gradients(lambda: ad.sum(ad.matmul(a, b)), [a]) < 1e-8


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(DTensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(ad.softmax(DTensor([1000.0, 1000.0 + np.log(2)])).data, [1 / 3, 2 / 3],
                               atol=1e-12)


def test_softmax_gradient(rng):
    x = leaf(rng, 4, 5)
    assert check_gradients(projected(lambda: ad.softmax(x, -1)), [x]) < 1e-7


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_softmax_rows_sum_to_one(n, m, seed):
    x = np.random.default_rng(seed).normal(size=(n, m)) * 30
    out = ad.softmax(DTensor(x), -1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_layer_norm_examples():
    one, zero = DTensor(np.ones(3)), DTensor(np.zeros(3))
    const = ad.layer_norm(DTensor(np.full((1, 3), 7.0)), one, zero)
    np.testing.assert_array_equal(const.data, 0.0)
    sym = ad.layer_norm(DTensor([[1.0, -1.0]]), DTensor(np.ones(2)), DTensor(np.zeros(2))).data
    np.testing.assert_allclose(sym, [[1.0, -1.0]], atol=1e-5)
    assert sym[0, 0] < 1.0


def test_layer_norm_gradient(rng):
    x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
    assert check_gradients(projected(lambda: ad.layer_norm(x, g, b)), [x, g, b]) < 1e-4


def test_layer_norm_rejects_empty_rows():
    with pytest.raises(DimensionError):
        ad.layer_norm(DTensor(np.zeros((2, 0))), DTensor(np.zeros(0)), DTensor(np.zeros(0)))


def test_pointwise_identity_conv_is_noop(rng):
    x = DTensor(rng.normal(size=(6, 4)))
    out = ad.conv1d(x, DTensor(np.eye(4)), None, 1, "pointwise")
    np.testing.assert_array_equal(out.data, x.data)


def test_delta_depthwise_stride2_subsamples(rng):
    x = DTensor(rng.normal(size=(5, 3)))
    w = DTensor(np.tile([[0.0], [1.0], [0.0]], (1, 3)))
    out = ad.conv1d(x, w, None, 2, "depthwise")
    np.testing.assert_array_equal(out.data, x.data[[0, 2, 4]])


def test_even_depthwise_kernel_rejected():
    with pytest.raises(ConfigError):
        ad.conv1d(DTensor(np.zeros((4, 2))), DTensor(np.zeros((4, 2))), None, 1, "depthwise")


def test_depthwise_k15_gradient(rng):
    x, w, b = leaf(rng, 16, 3), leaf(rng, 15, 3), leaf(rng, 3)
    fn = projected(lambda: ad.conv1d(x, w, b, 1, "depthwise"))
    assert check_gradients(fn, [x, w, b]) < 1e-4


@pytest.mark.parametrize("n,k,s", [(5, 3, 1), (5, 3, 2), (10, 15, 2), (1, 3, 2), (7, 1, 2)])
def test_same_padding_lengths(n, k, s):
    n_out, left, right = ad.same_padding(n, k, s)
    assert n_out == -(-n // s)
    assert left + n + right >= (n_out - 1) * s + k


def test_conv2d_stem_shapes_and_delta(rng):
    x = DTensor(rng.normal(size=(1000, 80, 1)))
    w = np.zeros((3, 3, 1, 1))
    w[1, 1, 0, 0] = 1.0
    out = ad.conv2d(x, DTensor(w), None, 2)
    assert out.shape == (500, 40, 1)
    np.testing.assert_array_equal(out.data, x.data[::2, ::2])


def test_conv2d_gradient(rng):
    x, w, b = leaf(rng, 6, 5, 1), leaf(rng, 3, 3, 1, 2), leaf(rng, 2)
    assert check_gradients(projected(lambda: ad.conv2d(x, w, b, 2)), [x, w, b]) < 1e-4


def test_glu_and_swish_examples(rng):
    x = rng.normal(size=(3, 4))
    out = ad.glu(DTensor(np.concatenate([x, np.zeros((3, 4))], axis=1)))
    np.testing.assert_allclose(out.data, 0.5 * x)
    assert ad.swish(DTensor(np.zeros(3))).data.tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(DimensionError):
        ad.glu(DTensor(np.zeros((2, 3))))


def test_glu_gradient(rng):
    x = leaf(rng, 4, 6)
    assert check_gradients(projected(lambda: ad.glu(x)), [x]) < 1e-4


def test_backward_examples():
    x = DTensor([1.0, 2.0], requires_grad=True)
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    x.zero_grad()
    ad.sum(ad.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = DTensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.scale(x, 2.0).backward()


def test_diamond_graph_accumulates_once():
    x = DTensor([3.0], requires_grad=True)
    y = ad.mul(x, x)
    ad.sum(ad.add(y, y)).backward()
    np.testing.assert_array_equal(x.grad, [12.0])


def test_backward_is_repeatable(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    grads = []
    for _ in range(2):
        ad.zero_grad([a, b])
        ad.sum(ad.softmax(ad.matmul(a, b))).backward()
        grads.append((a.grad.copy(), b.grad.copy()))
    np.testing.assert_array_equal(grads[0][0], grads[1][0])
    np.testing.assert_array_equal(grads[0][1], grads[1][1])


def test_no_grad_records_nothing(rng):
    a = leaf(rng, 2, 2)
    with ad.no_grad():
        out = ad.matmul(a, a)
    assert out.is_leaf and not out.requires_grad


@pytest.mark.parametrize("a_shape,b_shape", [((3, 4), (4,)), ((2, 3), (3, 2)), ((3,), (4,))])
def test_add_rejects_general_broadcasting(a_shape, b_shape):
    if b_shape == (4,) and a_shape == (3, 4):
        assert ad.add(DTensor(np.zeros(a_shape)), DTensor(np.ones(b_shape))).shape == (3, 4)
        return
    with pytest.raises(DimensionError):
        ad.add(DTensor(np.zeros(a_shape)), DTensor(np.zeros(b_shape)))


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 1000))
def test_reshape_roundtrip(shape, seed):
    x = DTensor(np.random.default_rng(seed).normal(size=shape))
    flat = ad.reshape(x, (-1,))
    np.testing.assert_array_equal(ad.reshape(flat, shape).data, x.data)


def test_avg_pool_ragged_tail():
    x = DTensor(np.arange(5.0).reshape(5, 1))
    np.testing.assert_array_equal(ad.avg_pool(x, 2).data.ravel(), [0.5, 2.5, 4.0])


def test_executed_madds_counter(rng):
    with ad.count_executed_madds() as c:
        ad.matmul(DTensor(rng.normal(size=(3, 4))), DTensor(rng.normal(size=(4, 5))))
    assert c.total == 60


def test_dropout_zero_is_identity_and_seeded(rng):
    x = DTensor(rng.normal(size=(4, 4)))
    assert ad.dropout(x, 0.0) is x
    a = ad.dropout(x, 0.5, np.random.default_rng(0)).data
    b = ad.dropout(x, 0.5, np.random.default_rng(0)).data
    np.testing.assert_array_equal(a, b)
