import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camlmlab import ops
from camlmlab.errors import DegenerateRowError, DimensionError, GraphError, LabelError, NonFiniteError
from camlmlab.tensor import backward, finite_diff_check, no_grad, tensor


def scalar_gelu(x: float) -> float:
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


class TestTensor:
    def test_shape_and_size(self):
        t = tensor(np.zeros((2, 3)))
        assert t.shape == (2, 3)
        assert t.size == 6
        assert t.grad is None

    def test_item_requires_single_element(self):
        assert tensor([2.5]).item() == 2.5
        with pytest.raises(ValueError):
            tensor([1.0, 2.0]).item()

    def test_non_finite_forward_is_an_error(self):
        a = tensor([1.0, np.inf])
        with pytest.raises(NonFiniteError):
            ops.add(a, tensor([0.0, 0.0]))

    def test_float32_mode(self):
        a = tensor(np.ones((2, 2)), dtype=np.float32)
        out = ops.matmul(a, a)
        assert out.dtype == np.float32


class TestMatmul:
    def test_identity(self):
        b = tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ops.matmul(tensor(np.eye(2)), b).data, b.data)

    def test_projector(self):
        out = ops.matmul(tensor([[1.0, 0.0], [0.0, 0.0]]), tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])

    def test_triple_loop_oracle(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                acc = 0.0
                for p in range(4):
                    acc += a[i, p] * b[p, j]
                expected[i, j] = acc
        np.testing.assert_allclose(ops.matmul(tensor(a), tensor(b)).data, expected, rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ops.matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((2, 3))))

    def test_backward_formulas(self, rng):
        a = tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = tensor(rng.standard_normal((4, 2)), requires_grad=True)
        g = rng.standard_normal((3, 2))
        backward(ops.sum(ops.mul(ops.matmul(a, b), tensor(g))))
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-13)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-13)


class TestMaskedSoftmax:
    def test_single_allowed_column_is_one_hot(self):
        allowed = np.array([[False, True, False]])
        out = ops.masked_softmax(tensor([[3.0, -1.0, 7.0]]), allowed)
        np.testing.assert_array_equal(out.data, [[0.0, 1.0, 0.0]])

    def test_equal_scores_uniform(self):
        out = ops.masked_softmax(tensor(np.full((1, 4), 0.7)), np.ones((1, 4), dtype=bool))
        np.testing.assert_allclose(out.data, [[0.25] * 4], rtol=0, atol=1e-15)

    def test_scalar_oracle(self):
        out = ops.masked_softmax(tensor([[1.0, 2.0, 3.0]]), np.ones((1, 3), dtype=bool))
        z = math.exp(1.0) + math.exp(2.0) + math.exp(3.0)
        np.testing.assert_allclose(out.data[0], [math.exp(k) / z for k in (1.0, 2.0, 3.0)], rtol=1e-14)

    def test_degenerate_row_raises(self):
        allowed = np.array([[True, False], [False, False]])
        with pytest.raises(DegenerateRowError):
            ops.masked_softmax(tensor(np.zeros((2, 2))), allowed)

    def test_batched_heads_share_matrix(self, rng):
        scores = rng.standard_normal((2, 3, 4, 4))
        allowed = rng.random((2, 4, 4)) < 0.5
        allowed[:, np.arange(4), np.arange(4)] = True
        out = ops.masked_softmax(tensor(scores), allowed).data
        for b in range(2):
            for h in range(3):
                single = ops.masked_softmax(tensor(scores[b, h]), allowed[b]).data
                np.testing.assert_array_equal(out[b, h], single)

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(1, 9), m=st.integers(1, 9), seed=st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one_and_masked_exact_zero(self, n, m, seed):
        rng = np.random.default_rng(seed)
        scores = rng.standard_normal((n, m)) * 5
        allowed = rng.random((n, m)) < 0.5
        allowed[np.arange(n), rng.integers(0, m, n)] = True
        out = ops.masked_softmax(tensor(scores), allowed).data
        assert np.all(out[~allowed] == 0.0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)


class TestGelu:
    def test_zero(self):
        assert ops.gelu(tensor([0.0])).data[0] == 0.0

    def test_one_matches_scalar_formula(self):
        out = ops.gelu(tensor([1.0])).data[0]
        assert out == pytest.approx(scalar_gelu(1.0), abs=1e-15)
        assert out == pytest.approx(0.8411919906082768, abs=1e-12)

    def test_saturation(self):
        assert abs(ops.gelu(tensor([-10.0])).data[0]) < 1e-6

    def test_matches_scalar_formula_everywhere(self, rng):
        x = rng.standard_normal(50) * 4
        out = ops.gelu(tensor(x)).data
        np.testing.assert_allclose(out, [scalar_gelu(v) for v in x], rtol=1e-14, atol=1e-15)


class TestLayerNorm:
    def test_constant_input(self):
        out = ops.layer_norm(tensor(np.full((1, 5), 3.0)), tensor(np.ones(5)), tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 5)))

    def test_two_values_closed_form(self):
        out = ops.layer_norm(tensor([[1.0, -1.0]]), tensor(np.ones(2)), tensor(np.zeros(2)))
        a = 1.0 / math.sqrt(1.0 + 1e-6)
        np.testing.assert_allclose(out.data, [[a, -a]], rtol=1e-15)

    def test_zero_gain_returns_bias(self, rng):
        bias = rng.standard_normal(4)
        out = ops.layer_norm(tensor(rng.standard_normal((3, 4))), tensor(np.zeros(4)), tensor(bias))
        np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (3, 4)))

    def test_wrong_gain_shape(self):
        with pytest.raises(DimensionError):
            ops.layer_norm(tensor(np.zeros((2, 3))), tensor(np.ones(4)), tensor(np.zeros(3)))


class TestCrossEntropy:
    def test_confident_correct(self):
        logits = np.zeros((2, 5))
        logits[0, 3] = logits[1, 1] = 1000.0
        assert ops.cross_entropy_logits(tensor(logits), [3, 1]).item() < 1e-6

    def test_uniform(self):
        loss = ops.cross_entropy_logits(tensor(np.zeros((3, 8))), [0, 4, 7]).item()
        assert loss == pytest.approx(math.log(8), abs=1e-15)

    def test_scalar_oracle(self, rng):
        logits = rng.standard_normal((2, 5))
        labels = [4, 0]
        expected = 0.0
        for row, lab in zip(logits, labels):
            z = sum(math.exp(v) for v in row)
            expected -= math.log(math.exp(row[lab]) / z)
        expected /= 2
        assert ops.cross_entropy_logits(tensor(logits), labels).item() == pytest.approx(expected, rel=1e-14)

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            ops.cross_entropy_logits(tensor(np.zeros((1, 4))), [4])


class TestBackward:
    def test_sum_gives_ones(self):
        x = tensor([1.0, -2.0, 3.0], requires_grad=True)
        backward(ops.sum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic(self):
        x = tensor([0.5, -1.5, 2.0], requires_grad=True)
        backward(ops.scale(ops.sum(ops.mul(x, x)), 0.5))
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-15)

    def test_twice_is_an_error(self):
        x = tensor([1.0], requires_grad=True)
        loss = ops.sum(ops.mul(x, x))
        backward(loss)
        with pytest.raises(GraphError):
            backward(loss)

    def test_non_scalar(self):
        x = tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError):
            backward(ops.scale(x, 2.0))

    def test_detached(self):
        x = tensor([1.0, 2.0])
        with pytest.raises(GraphError):
            backward(ops.sum(x))

    def test_no_grad_records_nothing(self):
        x = tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = ops.sum(x)
        assert not y.requires_grad

    def test_leaf_gradients_accumulate(self):
        x = tensor([1.0, 2.0], requires_grad=True)
        backward(ops.sum(x))
        backward(ops.sum(ops.scale(x, 3.0)))
        np.testing.assert_array_equal(x.grad, [4.0, 4.0])

    def test_shared_subexpression(self):
        x = tensor([3.0], requires_grad=True)
        y = ops.mul(x, x)
        backward(ops.sum(ops.add(y, y)))
        np.testing.assert_allclose(x.grad, [12.0])


class TestFiniteDiff:
    def test_sum_is_exact(self, rng):
        x = tensor(rng.standard_normal(6))
        assert finite_diff_check(ops.sum, x) <= 1e-10

    def test_gelu_sum(self):
        x = tensor([0.5, -0.3])
        assert finite_diff_check(lambda t: ops.sum(ops.gelu(t)), x) <= 1e-6

    def test_detects_a_wrong_gradient(self):
        def bad_square(t):
            from camlmlab.tensor import make_result

            return make_result(t.data**2, (t,), lambda g: (g * t.data,), "bad_square")

        x = tensor([1.0, 2.0])
        assert finite_diff_check(lambda t: ops.sum(bad_square(t)), x) > 0.4


def _op_cases(rng):
    """(name, function of one tensor) pairs covering every differentiable op."""
    w = tensor(rng.standard_normal((4, 3)))
    shift = tensor(rng.standard_normal((3, 4)))
    gain = tensor(rng.standard_normal(4))
    bias = tensor(rng.standard_normal(4))
    weights = tensor(rng.standard_normal((3, 4)))
    allowed = rng.random((3, 4)) < 0.6
    allowed[np.arange(3), np.arange(3)] = True
    b3_first = tensor(rng.standard_normal((1, 4, 3)))
    table_ids = np.array([2, 0, 2, 1])
    flat = np.array([0, 5, 5, 11, 7])

    return [
        ("add", lambda x: ops.sum(ops.mul(ops.add(x, shift), ops.add(x, shift)))),
        ("sub", lambda x: ops.sum(ops.mul(ops.sub(shift, x), ops.sub(x, shift)))),
        ("mul", lambda x: ops.sum(ops.mul(ops.mul(x, x), weights))),
        ("scale", lambda x: ops.sum(ops.mul(ops.scale(x, -2.5), weights))),
        ("add_bias", lambda x: ops.sum(ops.mul(ops.add_bias(x, bias), ops.add_bias(x, bias)))),
        ("matmul", lambda x: ops.sum(ops.mul(ops.matmul(x, w), ops.matmul(x, w)))),
        ("bmm", lambda x: ops.sum(ops.gelu(ops.bmm(ops.reshape(x, (1, 3, 4)), b3_first)))),
        ("linear", lambda x: ops.sum(ops.gelu(ops.linear(x, w, tensor(np.arange(3.0)))))),
        ("reshape+transpose", lambda x: ops.sum(ops.mul(ops.transpose(ops.reshape(x, (2, 6)), (1, 0)), tensor(np.arange(12.0).reshape(6, 2))))),
        ("embedding", lambda x: ops.sum(ops.gelu(ops.embedding(x, table_ids)))),
        ("take_rows", lambda x: ops.sum(ops.gelu(ops.take_rows(x, [2, 0, 2])))),
        ("take", lambda x: ops.sum(ops.gelu(ops.take(x, flat)))),
        ("masked_softmax", lambda x: ops.sum(ops.mul(ops.masked_softmax(x, allowed), weights))),
        ("gelu", lambda x: ops.sum(ops.mul(ops.gelu(x), weights))),
        ("layer_norm", lambda x: ops.sum(ops.mul(ops.layer_norm(x, gain, bias), weights))),
        ("cross_entropy", lambda x: ops.cross_entropy_logits(x, [1, 3, 0])),
        ("mean", lambda x: ops.mean(ops.mul(x, x))),
        ("softplus", lambda x: ops.sum(ops.mul(ops.softplus(x), weights))),
        ("l2_normalize", lambda x: ops.sum(ops.mul(ops.l2_normalize(x), weights))),
    ]


OP_NAMES = [name for name, _ in _op_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", OP_NAMES)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradient_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    fn = dict(_op_cases(rng))[name]
    x = tensor(rng.standard_normal((3, 4)))
    assert finite_diff_check(fn, x) <= 1e-4


def test_gelu_gradient_layer_norm_gain_and_bias():
    rng = np.random.default_rng(5)
    x = tensor(rng.standard_normal((3, 4)))
    bias = tensor(rng.standard_normal(4))
    weights = tensor(rng.standard_normal((3, 4)))
    gain = tensor(rng.standard_normal(4))
    assert finite_diff_check(lambda g: ops.sum(ops.mul(ops.layer_norm(x, g, bias), weights)), gain) <= 1e-4
    assert finite_diff_check(lambda b: ops.sum(ops.mul(ops.layer_norm(x, gain, b), weights)), bias) <= 1e-4


def test_forward_ops_are_pure(rng):
    x = rng.standard_normal((3, 4))
    allowed = np.ones((3, 4), dtype=bool)
    first = ops.masked_softmax(ops.gelu(tensor(x)), allowed).data
    second = ops.masked_softmax(ops.gelu(tensor(x)), allowed).data
    assert first.tobytes() == second.tobytes()
