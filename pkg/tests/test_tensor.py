import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nfsm import tensor as T
from nfsm.errors import NumericError, ShapeError
from nfsm.tensor import Tensor


def leaf(a):
    return Tensor(a, requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        assert out.data.tolist() == [[1, 2], [3, 4]]

    def test_hand_case(self):
        out = T.matmul(Tensor([[1, 0], [0, 0]]), Tensor([[5, 6], [7, 8]]))
        assert out.data.tolist() == [[5, 6], [0, 0]]

    def test_zero(self):
        b = np.random.default_rng(0).standard_normal((3, 4))
        assert np.array_equal(T.matmul(Tensor(np.zeros((2, 3))), Tensor(b)).data, np.zeros((2, 4)))

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_rule(self):
        a, b = leaf([[1.0, 2.0], [3.0, 4.0]]), leaf([[0.5, -1.0], [2.0, 1.0]])
        T.sum_all(T.matmul(a, b)).backward()
        ones = np.ones((2, 2))
        np.testing.assert_array_equal(a.grad, ones @ b.data.T)
        np.testing.assert_array_equal(b.grad, a.data.T @ ones)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_last(Tensor([0.0, 0, 0])).data, [1 / 3] * 3, atol=1e-15)

    @pytest.mark.parametrize("c", [-1e3, -2.5, 0.0, 7.0, 1e3])
    def test_constant_slice(self, c):
        np.testing.assert_allclose(T.softmax_last(Tensor([c, c, c])).data, [1 / 3] * 3, atol=1e-15)

    def test_log_weights(self):
        out = T.softmax_last(Tensor([math.log(1), math.log(2), math.log(3)])).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            T.softmax_last(Tensor([0.0, np.inf]))
        with pytest.raises(NumericError):
            T.softmax_last(Tensor([np.nan, 1.0]))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, x, c):
        y = T.softmax_last(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(T.softmax_last(Tensor(x + c)).data, y, atol=1e-12)


class TestMeanOverAxis:
    def test_hand_case(self):
        assert T.mean_over_axis(Tensor([[1.0, 3.0], [5.0, 7.0]]), 0).data.tolist() == [3.0, 5.0]

    def test_single_element_axis(self):
        x = np.random.default_rng(1).standard_normal((1, 4))
        np.testing.assert_array_equal(T.mean_over_axis(Tensor(x), 0).data, x[0])

    def test_constant(self):
        out = T.mean_over_axis(Tensor(np.full((3, 4, 2), 2.5)), 1)
        assert out.shape == (3, 2) and np.all(out.data == 2.5)

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            T.mean_over_axis(Tensor(np.zeros((2, 2))), 2)

    def test_gradient_spreads_evenly(self):
        x = leaf(np.zeros((4, 3)))
        T.sum_all(T.mean_over_axis(x, 0)).backward()
        np.testing.assert_array_equal(x.grad, np.full((4, 3), 0.25))


class TestAttention:
    def test_single_key(self):
        rng = np.random.default_rng(2)
        v = rng.standard_normal((1, 3))
        out = T.scaled_dot_attention(Tensor(rng.standard_normal((4, 3))), Tensor(rng.standard_normal((1, 3))), Tensor(v))
        np.testing.assert_allclose(out.data, np.repeat(v, 4, axis=0), atol=1e-15)

    def test_orthogonal_query_gives_column_mean(self):
        q = Tensor([[0.0, 0.0, 1.0], [0.0, 0.0, -2.0]])
        k = Tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
        v = np.arange(9.0).reshape(3, 3)
        out = T.scaled_dot_attention(q, k, Tensor(v))
        np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (2, 1)), atol=1e-14)

    def test_two_by_two(self):
        out = T.scaled_dot_attention(Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), Tensor(np.eye(2)))
        w = math.exp(1 / math.sqrt(2))
        np.testing.assert_allclose(out.data, [[w / (w + 1), 1 / (w + 1)]], atol=1e-15)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            T.scaled_dot_attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))


class TestCrossEntropy:
    def test_perfect_prediction_is_zero(self):
        out = T.cross_entropy(Tensor([1.0, 0.0, 0.0]), Tensor([1.0, 0.0, 0.0]))
        assert out.item() == 0.0

    def test_half(self):
        assert T.cross_entropy(Tensor([0.5, 0.5]), Tensor([0.0, 1.0])).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_inverse_e(self):
        out = T.cross_entropy(Tensor([1 / math.e, 1 - 1 / math.e]), Tensor([1.0, 0.0])).item()
        assert out == pytest.approx(1.0, abs=1e-15)

    def test_zero_probability_is_clamped(self):
        out = T.cross_entropy(Tensor([0.0, 1.0]), Tensor([1.0, 0.0])).item()
        assert out == pytest.approx(-math.log(1e-12))


class TestGradCheck:
    def test_sum_of_squares(self):
        x = leaf([1.0, 2.0, 3.0])
        err = T.grad_check(lambda: T.sum_all(T.mul(x, x)), [x], eps=1e-5)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])
        assert err < 1e-6

    def test_constant(self):
        x = leaf([1.0, 2.0])
        assert T.grad_check(lambda: Tensor(3.0), [x]) == 0.0

    def test_non_finite_loss(self):
        x = leaf([1.0])
        with pytest.raises(NumericError):
            T.grad_check(lambda: T.scale(T.sum_all(x), float("inf")), [x])


def _primitive_cases(rng):
    """(name, scalar builder, leaves) for every differentiable primitive."""
    a = leaf(rng.standard_normal((2, 3, 4)))
    b = leaf(rng.standard_normal((2, 3, 4)))
    c = leaf(rng.standard_normal((2, 4, 5)))
    w = leaf(rng.standard_normal((4, 3)))
    bias3 = leaf(rng.standard_normal(3))
    gain = leaf(rng.standard_normal(4))
    shift = leaf(rng.standard_normal(4))
    probs = leaf(rng.uniform(0.05, 1.0, (3, 4)))
    onehot = Tensor(np.eye(4)[rng.integers(0, 4, 3)])
    onehot3 = Tensor(np.eye(4)[rng.integers(0, 4, (2, 3))])
    weights = {}

    def proj(name, t):
        # fixed random weights make every output a scalar with a dense gradient
        if name not in weights:
            weights[name] = Tensor(rng.standard_normal(t.shape))
        return T.sum_all(T.mul(t, weights[name]))

    return [
        ("add", lambda: proj("add", T.add(a, b)), [a, b]),
        ("sub", lambda: proj("sub", T.sub(a, b)), [a, b]),
        ("mul", lambda: proj("mul", T.mul(a, b)), [a, b]),
        ("scale", lambda: proj("scale", T.scale(a, -1.7)), [a]),
        ("add_scalar", lambda: proj("add_scalar", T.add_scalar(a, 0.3)), [a]),
        ("matmul", lambda: proj("matmul", T.matmul(a, c)), [a, c]),
        ("linear", lambda: proj("linear", T.linear(a, w, bias3)), [a, w, bias3]),
        ("transpose", lambda: proj("transpose", T.transpose_last(a)), [a]),
        ("reshape", lambda: proj("reshape", T.reshape(a, (6, 4))), [a]),
        ("take", lambda: proj("take", T.take(a, [0, 2, 2, 1], axis=1)), [a]),
        ("concat", lambda: proj("concat", T.concat([a, b], axis=1)), [a, b]),
        ("mean_over_axis", lambda: proj("mean", T.mean_over_axis(a, 1)), [a]),
        ("mean_all", lambda: T.mean_all(T.mul(a, b)), [a, b]),
        ("softmax_last", lambda: proj("softmax", T.softmax_last(a)), [a]),
        ("layer_norm", lambda: proj("layer_norm", T.layer_norm(a, gain, shift)), [a, gain, shift]),
        ("relu", lambda: proj("relu", T.relu(a)), [a]),
        ("log", lambda: proj("log", T.log(probs)), [probs]),
        ("attention", lambda: proj("attention", T.scaled_dot_attention(a, b, T.scale(b, 0.5))), [a, b]),
        ("cross_entropy", lambda: T.sum_all(T.cross_entropy(probs, onehot)), [probs]),
        ("softmax_cross_entropy", lambda: T.sum_all(T.cross_entropy(T.softmax_last(a), onehot3)), [a]),
    ]


@pytest.mark.parametrize("seed", range(10))
def test_every_primitive_passes_grad_check(seed):
    for name, f, leaves in _primitive_cases(np.random.default_rng(seed)):
        err = T.grad_check(f, leaves, eps=1e-5)
        assert err < 1e-4, f"{name} seed {seed}: relative error {err:.2e}"


def test_backward_twice_doubles():
    x = leaf([1.0, -2.0, 0.5])
    y = T.sum_all(T.mul(x, x))
    y.backward()
    first = x.grad.copy()
    y.backward()
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_shared_subexpression_accumulates():
    x = leaf([3.0])
    y = T.mul(x, x)
    T.sum_all(T.add(y, y)).backward()
    np.testing.assert_array_equal(x.grad, [12.0])


def test_tape_is_topological():
    x = leaf([1.0, 2.0])
    y = T.softmax_last(T.scale(x, 2.0))
    z = T.sum_all(T.mul(y, y))
    tape = T.GradientTape.from_graph(z)
    pos = {node.node_id: i for i, node in enumerate(tape.entries)}
    for node in tape.entries:
        for parent in node._parents:
            assert pos[parent.node_id] < pos[node.node_id]
    assert len(pos) == len(tape.entries)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.data())
def test_row_major_indexing(shape, data):
    x = Tensor(np.arange(math.prod(shape), dtype=np.float64).reshape(shape))
    idx = tuple(data.draw(st.integers(0, n - 1)) for n in shape)
    strides = [math.prod(shape[k + 1:]) for k in range(len(shape))]
    flat = sum(i * s for i, s in zip(idx, strides))
    assert x.data.reshape(-1)[flat] == x.data[idx] == flat


def test_invariants_on_construction():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))
    t = Tensor(np.zeros((2, 3)), requires_grad=True)
    T.sum_all(t).backward()
    assert t.grad.size == t.size == math.prod(t.shape)


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = T.sum_all(T.mul(x, x))
    assert not y.requires_grad and y._parents == ()


def test_scalar_only_broadcasting():
    x = Tensor([1.0, 2.0])
    assert (x * 2 + 1).data.tolist() == [3.0, 5.0]
    with pytest.raises(ShapeError):
        T.add(x, Tensor([1.0, 2.0, 3.0]))
