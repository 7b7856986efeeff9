"""Engine-level tests: forward values, backward rules, gradient checks."""

import math

import numpy as np
import pytest

from temf import tensor as T
from temf.tensor import ContractError, ShapeError, Tape, Tensor


def leaf(data):
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(eye, a).data, a.data)


def test_matmul_projector_selects_rows():
    p = Tensor([[1.0, 0.0], [0.0, 0.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(T.matmul(p, b).data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_gradient_matches_ones_times_bt():
    rng = np.random.default_rng(1)
    a = leaf(rng.uniform(-2, 2, (3, 4)))
    b = leaf(rng.uniform(-2, 2, (4, 2)))
    out = T.reduce_sum(T.reshape(T.matmul(a, b), [6]), axis=0)
    out.backward()
    expected = np.ones((3, 2)) @ b.data.T
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)
    err = T.grad_check(lambda: T.reduce_sum(T.reshape(T.matmul(a, b), [6]), axis=0),
                       [a, b], eps=1e-6)
    assert err < 1e-7


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetry():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0]), axis=0).data, [0.5, 0.5])


def test_softmax_stable_under_large_inputs():
    y = T.softmax(Tensor([1000.0, 1000.0, 1000.0]), axis=0)
    assert np.isfinite(y.data).all()
    np.testing.assert_allclose(y.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_closed_form():
    y = T.softmax(Tensor([math.log(1), math.log(2), math.log(3)]), axis=0)
    np.testing.assert_allclose(y.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_slices_sum_to_one():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = Tensor(rng.uniform(-1e4, 1e4, (5, 7)))
        y = T.softmax(x, axis=1)
        np.testing.assert_allclose(y.data.sum(axis=1), np.ones(5), atol=1e-12)


def test_softmax_mask_zeroes_positions_exactly():
    x = Tensor(np.array([[3.0, -1.0, 2.0], [0.0, 0.5, 9.0]]))
    mask = np.array([True, False, True])
    y = T.softmax(x, axis=1, mask=mask)
    assert np.all(y.data[:, 1] == 0.0)
    np.testing.assert_allclose(y.data.sum(axis=1), [1.0, 1.0], atol=1e-12)


def test_softmax_all_masked_slice_rejected():
    with pytest.raises(ContractError):
        T.softmax(Tensor([[1.0, 2.0]]), axis=1, mask=np.array([False, False]))


# ---------------------------------------------------------------------------
# elementwise


def test_tanh_relu_point_values():
    assert T.tanh(Tensor([0.0])).data[0] == 0.0
    assert T.relu(Tensor([-3.5])).data[0] == 0.0
    assert T.relu(Tensor([2.0])).data[0] == 2.0


def test_tanh_derivative_matches_finite_differences():
    x = leaf([0.5])
    y = T.reduce_sum(T.tanh(x), axis=0)
    y.backward()
    eps = 1e-6
    numeric = (math.tanh(0.5 + eps) - math.tanh(0.5 - eps)) / (2 * eps)
    assert abs(x.grad[0] - numeric) < 1e-8


def test_broadcast_add_repeats_along_leading_axis():
    a = leaf(np.arange(6.0).reshape(2, 3))
    b = leaf([10.0, 20.0, 30.0])
    out = T.add(a, b)
    np.testing.assert_array_equal(out.data, a.data + b.data)
    T.reduce_sum(T.reshape(out, [6]), axis=0).backward()
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_incompatible_elementwise_shapes_rejected():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.zeros((4,))), Tensor(np.zeros((2,))))


# ---------------------------------------------------------------------------
# reductions


def test_max_pool_and_mean_values():
    np.testing.assert_array_equal(
        T.max_pool(Tensor([[1.0, 5.0], [3.0, 2.0]]), axis=0).data, [3.0, 5.0])
    np.testing.assert_array_equal(
        T.reduce_mean(Tensor([[2.0, 4.0]]), axis=1).data, [3.0])


def test_max_pool_routes_all_gradient_to_argmax():
    x = leaf([[1.0, 5.0], [3.0, 2.0]])
    T.reduce_sum(T.max_pool(x, axis=0), axis=0).backward()
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])


def test_max_pool_tie_breaks_to_first_index():
    x = leaf([[2.0], [2.0]])
    T.reduce_sum(T.max_pool(x, axis=0), axis=0).backward()
    np.testing.assert_array_equal(x.grad, [[1.0], [0.0]])


def test_max_pool_mask_excludes_positions():
    x = Tensor([[9.0, 1.0], [3.0, 2.0]])
    out = T.max_pool(x, axis=0, mask=np.array([False, True]))
    np.testing.assert_array_equal(out.data, [3.0, 2.0])


# ---------------------------------------------------------------------------
# concat / split


def test_concat_columns():
    out = T.concat([Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]])], axis=1)
    np.testing.assert_array_equal(out.data, [[1.0, 3.0], [2.0, 4.0]])


def test_concat_stacks_row_vectors():
    rows = [Tensor(np.full((1, 4), float(i))) for i in range(3)]
    assert T.concat(rows, axis=0).shape == (3, 4)


def test_split_concat_round_trip():
    rng = np.random.default_rng(3)
    xs = [Tensor(rng.normal(size=(2, d))) for d in (1, 3, 2)]
    back = T.split(T.concat(xs, axis=1), [1, 3, 2], axis=1)
    for original, piece in zip(xs, back):
        np.testing.assert_array_equal(original.data, piece.data)


def test_concat_off_axis_mismatch_rejected():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 3)))], axis=0)


# ---------------------------------------------------------------------------
# losses


def test_cross_entropy_values():
    assert T.cross_entropy(Tensor([1.0, 0.0]), [1, 0]).item() == pytest.approx(0.0, abs=1e-9)
    assert T.cross_entropy(Tensor([0.5, 0.5]), [0, 1]).item() == pytest.approx(math.log(2))
    assert T.cross_entropy(Tensor([0.25, 0.75]), [0, 1]).item() == pytest.approx(-math.log(0.75))


def test_cross_entropy_rejects_unnormalized_probs():
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor([0.7, 0.7]), [1, 0])


def test_mse_values_and_gradient():
    a, b = leaf([1.0, 2.0]), Tensor([0.0, 0.0])
    assert T.mse(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
    out = T.mse(a, b)
    assert out.item() == 5.0
    out.backward()
    np.testing.assert_array_equal(a.grad, [2.0, 4.0])
    err = T.grad_check(lambda: T.mse(a, b), [a], eps=1e-6)
    assert err < 1e-8


# ---------------------------------------------------------------------------
# grad_check itself


def test_grad_check_square_function():
    x = leaf([3.0])
    err = T.grad_check(lambda: T.reduce_sum(T.mul(x, x), axis=0), [x], eps=1e-6)
    assert x.grad[0] == pytest.approx(6.0)
    assert err < 1e-7


def test_grad_check_constant_function():
    x = leaf([1.0, -2.0])
    err = T.grad_check(lambda: T.reduce_sum(T.mul(Tensor([0.0, 0.0]), x), axis=0), [x])
    assert err < 1e-10


def test_grad_check_eps_contract():
    x = leaf([1.0])
    with pytest.raises(ContractError):
        T.grad_check(lambda: T.reduce_sum(x, axis=0), [x], eps=1e-2)


def test_grad_check_flags_wrong_backward_rule():
    x = leaf([1.0, 2.0])

    def broken_double():
        out = Tensor(x.data * 2.0)
        out.requires_grad = True
        out._parents = (x,)
        # deliberately wrong rule: claims d(2x)/dx == 3
        out._backward = lambda g: T._accumulate(x, 3.0 * g)
        return T.reduce_sum(out, axis=0)

    err = T.grad_check(broken_double, [x], eps=1e-6)
    assert err > 0.1


# ---------------------------------------------------------------------------
# graph mechanics


def test_shared_subexpression_gradients_accumulate():
    x = leaf([1.5])
    y = T.add(x, x)
    T.reduce_sum(y, axis=0).backward()
    np.testing.assert_array_equal(x.grad, [2.0])


def test_tape_touches_each_node_once():
    x = leaf([1.0, 2.0])
    h = T.tanh(x)
    out = T.reduce_sum(T.mul(h, h), axis=0)

    calls: dict[int, int] = {}
    tape = Tape.from_output(out)
    for node in tape.nodes:
        if node._backward is not None:
            original = node._backward

            def counted(g, node_id=id(node), original=original):
                calls[node_id] = calls.get(node_id, 0) + 1
                original(g)

            node._backward = counted
    tape.backward()
    assert calls and all(count == 1 for count in calls.values())


def test_forward_determinism_is_bit_identical():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.normal(size=(4, 3)))
        w = Tensor(rng.normal(size=(3, 2)))
        return T.softmax(T.tanh(T.matmul(x, w)), axis=1).data.tobytes()

    assert run() == run()


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        leaf([[1.0, 2.0]]).backward()


# ---------------------------------------------------------------------------
# gradient checks across every differentiable operation, many seeds


def _op_cases(rng):
    a2 = leaf(rng.uniform(-2, 2, (3, 4)))
    b2 = leaf(rng.uniform(-2, 2, (4, 5)))
    same = leaf(rng.uniform(-2, 2, (3, 4)))
    vec = leaf(rng.uniform(-2, 2, (4,)))
    gain = leaf(rng.uniform(0.5, 1.5, (4,)))
    bias = leaf(rng.uniform(-0.5, 0.5, (4,)))
    probs_raw = leaf(rng.uniform(-1, 1, (2,)))
    onehot = np.eye(2)[rng.integers(0, 2)]
    idx = rng.integers(0, 3, size=5)
    # fixed weighting keeps reductions of normalized outputs non-constant
    w34 = Tensor(rng.uniform(-2, 2, (3, 4)))

    def total(t):
        return T.reduce_sum(T.reshape(t, [t.size]), axis=0)

    return [
        ("matmul", lambda: total(T.matmul(a2, b2)), [a2, b2]),
        ("add", lambda: total(T.add(a2, same)), [a2, same]),
        ("add_broadcast", lambda: total(T.add(a2, vec)), [a2, vec]),
        ("sub", lambda: total(T.sub(a2, same)), [a2, same]),
        ("mul", lambda: total(T.mul(a2, same)), [a2, same]),
        ("mul_broadcast", lambda: total(T.mul(a2, vec)), [a2, vec]),
        ("scale", lambda: total(T.scale(a2, -1.7)), [a2]),
        ("tanh", lambda: total(T.tanh(a2)), [a2]),
        ("relu", lambda: total(T.relu(a2)), [a2]),
        ("softmax", lambda: total(T.mul(T.softmax(a2, axis=1), w34)), [a2]),
        ("softmax_masked",
         lambda: total(T.mul(T.softmax(a2, axis=1, mask=np.array([True, False, True, True])),
                             w34)),
         [a2]),
        ("layer_norm", lambda: total(T.layer_norm(a2, gain, bias)), [a2, gain, bias]),
        ("reduce_sum", lambda: total(T.reduce_sum(a2, axis=0)), [a2]),
        ("reduce_mean", lambda: total(T.reduce_mean(a2, axis=1)), [a2]),
        ("max_pool", lambda: total(T.max_pool(a2, axis=0)), [a2]),
        ("concat", lambda: total(T.concat([a2, same], axis=1)), [a2, same]),
        ("split", lambda: total(T.split(a2, [1, 3], axis=1)[1]), [a2]),
        ("transpose", lambda: total(T.transpose(a2)), [a2]),
        ("reshape", lambda: total(T.reshape(a2, [2, 6])), [a2]),
        ("gather_rows", lambda: total(T.gather_rows(a2, idx)), [a2]),
        ("cross_entropy",
         lambda: T.cross_entropy(T.softmax(probs_raw, axis=0), onehot), [probs_raw]),
        ("mse", lambda: T.mse(a2, same), [a2, same]),
    ]


@pytest.mark.parametrize("seed", range(100))
def test_all_ops_grad_check(seed):
    # eps 1e-5 balances truncation against float64 roundoff for O(1) values
    rng = np.random.default_rng(seed)
    for name, fn, params in _op_cases(rng):
        err = T.grad_check(fn, params, eps=1e-5)
        assert err < 1e-6, f"{name}: max relative error {err:.3e}"
