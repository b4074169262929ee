import numpy as np
import pytest

from modroute import tensor as T
from modroute.exceptions import GraphError, IndexRangeError, NonFiniteError, ShapeError


def leaf(values):
    return T.Tensor(values, requires_grad=True)


def test_matmul_identity_returns_input():
    x = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(T.Tensor(np.eye(2)), x)
    np.testing.assert_array_equal(out.data, x.data)


def test_matmul_shape_mismatch_names_the_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_softmax_of_equal_logits_is_uniform():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, 0.25, atol=1e-15)


def test_softmax_known_values():
    out = T.softmax(T.Tensor([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out.data, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_rows_sum_to_one_for_large_logits(rng):
    x = T.Tensor(rng.uniform(-50.0, 50.0, size=(64, 7)))
    np.testing.assert_allclose(T.softmax(x).data.sum(axis=-1), 1.0, atol=1e-12)


def test_tensor_data_is_read_only():
    x = T.Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        x.data[0] = 5.0


def test_non_finite_construction_rejected():
    with pytest.raises(NonFiniteError):
        T.Tensor([1.0, np.nan])


def test_non_finite_output_names_the_primitive():
    with pytest.raises(NonFiniteError, match="log"):
        T.log(T.Tensor([0.0, 1.0]))


def test_backward_of_sum_is_ones():
    x = leaf([1.0, -2.0, 3.5])
    T.backward(T.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_backward_of_zero_residual_is_zero():
    x = leaf([[1.0, 2.0], [3.0, 4.0]])
    T.backward(T.mean(T.squared_error(x, x)))
    np.testing.assert_array_equal(x.grad, np.zeros((2, 2)))


def test_backward_of_summed_softmax_is_zero(rng):
    x = leaf(rng.normal(size=5))
    T.backward(T.tensor_sum(T.softmax(x)))
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


def test_fan_out_gradients_accumulate():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.tensor_sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    y = leaf([1.0, 2.0])
    T.backward(T.tensor_sum(y) + T.tensor_sum(y))
    np.testing.assert_array_equal(y.grad, [2.0, 2.0])


def test_broadcast_add_unbroadcasts_gradient():
    x = leaf(np.ones((3, 4)))
    bias = leaf(np.zeros(4))
    T.backward(T.tensor_sum(x + bias))
    np.testing.assert_array_equal(bias.grad, np.full(4, 3.0))


def test_backward_discards_the_graph():
    x = leaf([1.0, 2.0])
    T.backward(T.tensor_sum(T.exp(x)))
    assert len(T.active_graph()) == 0


def test_backward_requires_scalar_loss():
    x = leaf([1.0, 2.0])
    with pytest.raises(GraphError):
        T.backward(T.exp(x))


def test_backward_on_constant_loss_fails():
    with pytest.raises(GraphError):
        T.backward(T.tensor_sum(T.Tensor([1.0, 2.0])))


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        out = T.tensor_sum(T.exp(x))
    assert len(T.active_graph()) == 0
    assert not out.requires_grad


def test_detach_stops_gradient():
    x = leaf([1.0, 2.0])
    T.backward(T.tensor_sum(T.mul(x, x.detach())))
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


def test_embedding_out_of_range():
    table = T.Tensor(np.ones((4, 2)))
    with pytest.raises(IndexRangeError):
        T.embedding(table, [0, 4])


def test_embedding_gradient_scatters_repeated_ids():
    table = leaf(np.zeros((3, 2)))
    T.backward(T.tensor_sum(T.embedding(table, [1, 1, 2])))
    np.testing.assert_array_equal(table.grad, [[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]])


def test_straight_through_forward_is_hard_backward_is_identity():
    relaxed = leaf([0.2, 0.7, 0.1])
    hard = np.array([0.0, 1.0, 0.0])
    out = T.straight_through(relaxed, hard)
    np.testing.assert_array_equal(out.data, hard)
    T.backward(T.tensor_sum(T.mul(out, T.Tensor([1.0, 2.0, 3.0]))))
    np.testing.assert_array_equal(relaxed.grad, [1.0, 2.0, 3.0])


def test_stack_and_slice_route_gradients(rng):
    a = leaf(rng.normal(size=(2, 3)))
    b = leaf(rng.normal(size=(2, 3)))
    stacked = T.stack([a, b], axis=1)
    assert stacked.shape == [2, 2, 3]
    T.backward(T.tensor_sum(T.slice_(stacked, (slice(None), 1))))
    np.testing.assert_array_equal(a.grad, np.zeros((2, 3)))
    np.testing.assert_array_equal(b.grad, np.ones((2, 3)))


def test_slice_with_repeated_indices_accumulates_gradient():
    x = leaf([1.0, 2.0, 3.0])
    picked = T.slice_(x, np.array([0, 2, 0, 0]))
    np.testing.assert_array_equal(picked.data, [1.0, 3.0, 1.0, 1.0])
    T.backward(T.tensor_sum(T.mul(picked, T.Tensor([1.0, 2.0, 3.0, 4.0]))))
    np.testing.assert_array_equal(x.grad, [8.0, 0.0, 2.0])


def test_same_inputs_give_bitwise_identical_results(rng):
    x = rng.normal(size=(4, 6))

    def run():
        t = leaf(x)
        loss = T.mean(T.gelu(T.layer_norm(t)))
        T.backward(loss)
        return loss.data.copy(), t.grad.copy()

    first, second = run(), run()
    assert first[0].tobytes() == second[0].tobytes()
    assert first[1].tobytes() == second[1].tobytes()


@pytest.mark.parametrize("op", ["gelu", "layer_norm", "log_softmax", "sigmoid"])
def test_matches_torch_autograd(op, rng):
    torch = pytest.importorskip("torch")
    F = torch.nn.functional
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))

    ours = {
        "gelu": T.gelu,
        "layer_norm": T.layer_norm,
        "log_softmax": T.log_softmax,
        "sigmoid": T.sigmoid,
    }[op]
    theirs = {
        "gelu": F.gelu,
        "layer_norm": lambda t: F.layer_norm(t, (5,), eps=1e-5),
        "log_softmax": lambda t: F.log_softmax(t, dim=-1),
        "sigmoid": torch.sigmoid,
    }[op]

    t = leaf(x)
    out = ours(t)
    T.backward(T.tensor_sum(T.mul(out, T.Tensor(w))))

    tx = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    tout = theirs(tx)
    (tout * torch.tensor(w, dtype=torch.float64)).sum().backward()

    np.testing.assert_allclose(out.data, tout.detach().numpy(), atol=1e-10)
    np.testing.assert_allclose(t.grad, tx.grad.numpy(), atol=1e-10)


def test_primitive_forward_by_kind():
    a = T.Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    b = T.Tensor(np.array([[3.0], [4.0]]))
    out = T.primitive_forward("matmul", [a, b])
    assert out.shape == [1, 1]
    loss = T.tensor_sum(out)
    assert loss.item() == 11.0
    T.backward(loss)
    np.testing.assert_array_equal(a.grad, [[3.0, 4.0]])


def test_primitive_forward_rejects_unknown_kind_and_arity():
    with pytest.raises(GraphError):
        T.primitive_forward("convolve", [T.Tensor(np.ones(2))])
    with pytest.raises(ShapeError):
        T.primitive_forward("matmul", [T.Tensor(np.ones((2, 2)))])
