import numpy as np
import pytest

from src.services.errors import ShapeError
from src.services.numerics import (
    IGNORE_INDEX, Tensor, backward, cross_entropy, dropout, finite_diff_check, gather_rows, gelu,
    get_default_dtype, l2_normalize, layer_norm, matmul, precision, relative_gather, relative_scatter,
    sigmoid, softmax, tensor,
)
from src.services.attention import relative_index


def _weighted(out, weights):
    return (out * Tensor(weights)).sum()


def test_matmul_matches_triple_loop(f64):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    expected = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(tensor(a), tensor(b)).data, expected, atol=1e-14)


def test_matmul_broadcasts_unbatched_operand(f64):
    rng = np.random.default_rng(1)
    a, w = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
    out = matmul(tensor(a), tensor(w))
    assert out.shape == (3, 4, 2)
    np.testing.assert_allclose(out.data[1], a[1] @ w, atol=1e-12)


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        matmul(tensor(np.ones((2, 3, 4))), tensor(np.ones((5, 4, 2))))


def test_softmax_rows_sum_to_one(f64):
    x = np.random.default_rng(2).normal(scale=10.0, size=(5, 7))
    y = softmax(tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_handles_negative_infinity(f64):
    x = np.array([[0.0, -np.inf, 1.0], [-np.inf, -np.inf, -np.inf]])
    y = softmax(tensor(x)).data
    assert y[0, 1] == 0.0
    np.testing.assert_allclose(y[0].sum(), 1.0, atol=1e-12)
    assert np.all(y[1] == 0.0)
    assert np.all(np.isfinite(y))


def test_softmax_large_logits_do_not_overflow(f64):
    y = softmax(tensor(np.array([[1000.0, 1000.0]]))).data
    np.testing.assert_allclose(y, [[0.5, 0.5]])


def test_sigmoid_saturates_without_overflow(f64):
    y = sigmoid(tensor(np.array([50.0, -50.0, 0.0]))).data
    assert np.all(np.isfinite(y))
    assert y[0] == pytest.approx(1.0)
    assert 0.0 <= y[1] < 1e-20
    assert y[2] == 0.5


def test_layer_norm_matches_two_pass_statistics(f64):
    x = np.random.default_rng(3).normal(loc=3.0, scale=2.0, size=(4, 9))
    out = layer_norm(tensor(x), tensor(np.ones(9)), tensor(np.zeros(9))).data
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    np.testing.assert_allclose(out, (x - mean) / np.sqrt(var + 1e-12), atol=1e-12)
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-9)


def test_l2_normalize_is_finite_at_zero(f64):
    x = tensor(np.zeros((1, 4)), requires_grad=True)
    y = l2_normalize(x)
    assert np.all(y.data == 0.0)
    grads = backward(y.sum())
    assert np.all(np.isfinite(grads[x]))


def test_l2_normalize_rejects_non_positive_eps():
    with pytest.raises(ValueError):
        l2_normalize(tensor(np.ones(3)), eps=0.0)


def test_gelu_is_exact_erf_form(f64):
    out = gelu(tensor(np.array([0.0, 1.0, -1.0]))).data
    np.testing.assert_allclose(out, [0.0, 0.8413447460685429, -0.15865525393145707], atol=1e-12)


def test_cross_entropy_ignores_sentinel_rows(f64):
    logits = tensor(np.random.default_rng(4).normal(size=(3, 5)), requires_grad=True)
    labels = np.array([1, IGNORE_INDEX, 4])
    loss = cross_entropy(logits, labels)
    log_probs = logits.data - np.log(np.exp(logits.data).sum(axis=-1, keepdims=True))
    assert loss.item() == pytest.approx(-(log_probs[0, 1] + log_probs[2, 4]) / 2, abs=1e-12)
    grads = backward(loss)
    assert np.all(grads[logits][1] == 0.0)


def test_cross_entropy_with_no_labels_is_zero(f64):
    logits = tensor(np.ones((2, 3)), requires_grad=True)
    loss = cross_entropy(logits, np.full(2, IGNORE_INDEX))
    assert loss.item() == 0.0
    assert np.all(backward(loss)[logits] == 0.0)


def test_gather_rows_accumulates_repeated_indices(f64):
    weight = tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = gather_rows(weight, np.array([[0, 2], [2, 2]]))
    assert out.shape == (2, 2, 2)
    grads = backward(out.sum())
    np.testing.assert_array_equal(grads[weight], [[1, 1], [0, 0], [3, 3]])


def test_relative_gather_and_scatter_are_adjoint(f64):
    rng = np.random.default_rng(5)
    index = relative_index(4, 3)
    rel = rng.normal(size=(2, 4, 5))
    absolute = rng.normal(size=(2, 4, 4))
    gathered = relative_gather(tensor(rel), index).data
    scattered = relative_scatter(tensor(absolute), index, 5).data
    assert np.sum(gathered * absolute) == pytest.approx(np.sum(rel * scattered), abs=1e-12)
    for i in range(4):
        for j in range(4):
            assert gathered[0, i, j] == rel[0, i, index[i, j]]


def test_backward_rejects_non_scalar_loss():
    with pytest.raises(ShapeError):
        backward(tensor(np.ones(3), requires_grad=True) * 2.0)


def test_gradient_accumulates_over_shared_leaf(f64):
    x = tensor(np.array([3.0]), requires_grad=True)
    grads = backward((x * x + x).sum())
    np.testing.assert_allclose(grads[x], [7.0])


def test_finite_diff_exact_for_quadratic_form(f64):
    rng = np.random.default_rng(6)
    a = rng.normal(size=(4, 4))
    x = tensor(rng.normal(size=(4, 1)), requires_grad=True)
    error = finite_diff_check(lambda: matmul(x.swap_last(), matmul(tensor(a), x)).sum(), [x])
    assert error < 1e-8


def test_finite_diff_softmax_cross_entropy(f64):
    rng = np.random.default_rng(7)
    w = tensor(rng.normal(size=(5, 3)), requires_grad=True)
    x = rng.normal(size=(6, 5))
    labels = rng.integers(0, 3, size=6)
    error = finite_diff_check(lambda: cross_entropy(matmul(tensor(x), w), labels), {"w": w})
    assert error < 1e-6


@pytest.mark.parametrize("op", ["softmax", "sigmoid", "l2_normalize", "gelu", "layer_norm", "relative"])
def test_op_gradients_match_finite_differences(f64, op):
    rng = np.random.default_rng(8)
    x = tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    gain = tensor(rng.normal(size=5), requires_grad=True)
    bias = tensor(rng.normal(size=5), requires_grad=True)
    weights = rng.normal(size=(2, 3, 5))
    index = relative_index(3, 3)

    def loss():
        if op == "softmax":
            return _weighted(softmax(x), weights)
        if op == "sigmoid":
            return _weighted(sigmoid(x), weights)
        if op == "l2_normalize":
            return _weighted(l2_normalize(x), weights)
        if op == "gelu":
            return _weighted(gelu(x), weights)
        if op == "layer_norm":
            return _weighted(layer_norm(x, gain, bias), weights)
        gathered = relative_gather(x, index)
        return _weighted(relative_scatter(gathered * gathered, index, 5), weights)

    params = [x, gain, bias] if op == "layer_norm" else [x]
    assert finite_diff_check(loss, params) < 1e-4


def test_dropout_identity_when_disabled():
    x = tensor(np.ones((2, 2)))
    assert dropout(x, 0.0, np.random.default_rng(0)) is x
    assert dropout(x, 0.5, None) is x


def test_dropout_rescales_kept_entries():
    out = dropout(tensor(np.ones((50, 50))), 0.5, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_precision_context_restores_dtype():
    before = get_default_dtype()
    with precision(np.float64):
        assert tensor([1.0]).dtype == np.float64
    assert get_default_dtype() == before
    assert tensor([1.0]).dtype == before


def test_float32_gelu_stays_float32():
    x = tensor(np.linspace(-3.0, 3.0, 7), requires_grad=True)
    out = gelu(x)
    assert out.dtype == np.float32
    grads = backward(out.sum())
    assert grads[x].dtype == np.float32


def test_backward_casts_gradients_to_parameter_dtype():
    w = tensor(np.ones(3), requires_grad=True)
    assert w.dtype == np.float32
    scale = Tensor(np.ones(3))
    scale.data = np.full(3, 2.0, dtype=np.float64)
    grads = backward((w * scale).sum())
    assert grads[w].dtype == np.float32
    np.testing.assert_array_equal(grads[w], np.full(3, 2.0, dtype=np.float32))
