"""Tape autodiff checked op-by-op against central finite differences."""

import numpy as np
import pytest

from madkit import tensor as T
from madkit.errors import ContractError, ParameterError, ShapeError

from .oracles import max_rel_err, numeric_gradient

FD_TOL = 1e-6


def analytic_grads(build, arrays):
    """Run build(*tensors) under a tape and return each leaf gradient."""
    tensors = [T.param(a.copy()) for a in arrays]
    with T.Tape() as tape:
        loss = build(*tensors)
        tape.backward(loss)
    return [t.grad for t in tensors]


def check_against_fd(build, arrays, tol=FD_TOL):
    grads = analytic_grads(build, arrays)
    for i, a in enumerate(arrays):
        def scalar_fn(x, i=i):
            slots = [np.asarray(v, dtype=np.float64) for v in arrays]
            slots[i] = x
            tensors = [T.Tensor(v) for v in slots]
            return float(build(*tensors).data)

        fd = numeric_gradient(scalar_fn, arrays[i].copy())
        assert grads[i] is not None, f"input {i} received no gradient"
        err = max_rel_err(grads[i], fd)
        assert err < tol, f"input {i}: rel err {err:.3e}"


def rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def test_add_sub_mul_broadcast_grads():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rand(rng, 3, 4)
        b = rand(rng, 4)  # broadcast over rows
        check_against_fd(lambda x, y: T.tensor_sum(T.mul(T.add(x, y), T.sub(x, y))), [a, b])


def test_neg_scale_grads():
    rng = np.random.default_rng(1)
    a = rand(rng, 2, 5)
    check_against_fd(lambda x: T.tensor_sum(T.scale(T.neg(x), 2.5)), [a])


def test_matmul_grads_2d():
    rng = np.random.default_rng(2)
    a = rand(rng, 3, 4)
    b = rand(rng, 4, 2)
    check_against_fd(lambda x, y: T.tensor_sum(T.matmul(x, y)), [a, b])


def test_matmul_grads_batched():
    # (B, m, k) @ (k, n): the weight gradient must sum over the batch.
    rng = np.random.default_rng(3)
    a = rand(rng, 4, 3, 5)
    b = rand(rng, 5, 2)
    check_against_fd(lambda x, y: T.tensor_sum(T.matmul(x, y)), [a, b])


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(T.Tensor(np.ones((3, 4))), T.Tensor(np.ones((3, 4))))
    with pytest.raises(ShapeError):
        T.matmul(T.Tensor(np.ones(4)), T.Tensor(np.ones((4, 2))))


def test_transpose_reshape_grads():
    rng = np.random.default_rng(4)
    a = rand(rng, 2, 3, 4)
    check_against_fd(lambda x: T.tensor_sum(T.mul(T.transpose(x), T.transpose(x))), [a])
    check_against_fd(lambda x: T.tensor_sum(T.reshape(x, (6, 4))), [a])
    check_against_fd(
        lambda x: T.tensor_sum(T.mul(T.transpose(x, (2, 0, 1)), T.transpose(x, (2, 0, 1)))),
        [a],
    )


def test_concat_slice_grads():
    rng = np.random.default_rng(5)
    a = rand(rng, 2, 3)
    b = rand(rng, 2, 5)

    def build(x, y):
        joined = T.concat([x, y], axis=1)
        left = T.slice_axis(joined, 1, 0, 2)
        right = T.slice_axis(joined, 1, 2, 8)
        return T.add(T.tensor_sum(T.mul(left, left)), T.tensor_sum(right))

    check_against_fd(build, [a, b])


def test_mean_log_clamp_grads():
    rng = np.random.default_rng(6)
    a = rng.uniform(0.2, 1.5, size=(3, 3))
    check_against_fd(lambda x: T.mean(T.log(x)), [a])
    # clamp: keep FD probes away from the clip boundaries
    b = np.array([[-0.8, -0.2, 0.0], [0.3, 0.55, 0.9]])
    check_against_fd(lambda x: T.tensor_sum(T.clamp(x, -0.5, 0.6)), [b])


def test_clamp_blocks_gradient_outside_range():
    x = T.param(np.array([-2.0, 0.0, 2.0]))
    with T.Tape() as tape:
        tape.backward(T.tensor_sum(T.clamp(x, -1.0, 1.0)))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_gelu_grads_and_values():
    rng = np.random.default_rng(7)
    a = rand(rng, 4, 4) * 3.0
    check_against_fd(lambda x: T.tensor_sum(T.gelu(x)), [a])
    # fixed points of the tanh approximation
    y = T.gelu(T.Tensor(np.array([0.0]))).data
    assert y[0] == 0.0
    big = T.gelu(T.Tensor(np.array([10.0]))).data
    assert abs(big[0] - 10.0) < 1e-8


def test_softmax_grads_and_rows_sum_to_one():
    rng = np.random.default_rng(8)
    a = rand(rng, 3, 5) * 4.0
    w = rand(rng, 3, 5)

    def build(x):
        return T.tensor_sum(T.mul(T.softmax(x), T.Tensor(w)))

    check_against_fd(build, [a])
    y = T.softmax(T.Tensor(a)).data
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    # shift invariance
    y2 = T.softmax(T.Tensor(a + 1000.0)).data
    assert np.allclose(y, y2, atol=1e-12)


def test_layernorm_grads():
    rng = np.random.default_rng(9)
    x = rand(rng, 2, 3, 6)
    gain = rng.uniform(0.5, 1.5, size=6)
    bias = rand(rng, 6)
    w = rand(rng, 2, 3, 6)

    def build(a, g, b):
        return T.tensor_sum(T.mul(T.layernorm(a, g, b), T.Tensor(w)))

    check_against_fd(build, [x, gain, bias], tol=1e-5)


def test_layernorm_output_statistics():
    rng = np.random.default_rng(10)
    x = rand(rng, 4, 16)
    y = T.layernorm(T.Tensor(x), T.Tensor(np.ones(16)), T.Tensor(np.zeros(16))).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(y.std(axis=-1), 1.0, atol=1e-3)  # eps shifts it slightly


def test_dropout_eval_mode_is_identity():
    x = T.Tensor(np.ones((4, 4)))
    assert T.dropout(x, 0.5, training=False) is x
    assert T.dropout(x, 0.0, training=True) is x


def test_dropout_training_mask_and_grad():
    rng = np.random.default_rng(11)
    x = T.param(np.ones((64, 64)))
    with T.Tape() as tape:
        y = T.dropout(x, 0.25, training=True, rng=rng)
        tape.backward(T.tensor_sum(y))
    kept = y.data != 0.0
    assert 0.6 < kept.mean() < 0.9
    assert np.allclose(y.data[kept], 1.0 / 0.75)
    # gradient equals the applied mask
    assert np.array_equal(x.grad, np.where(kept, 1.0 / 0.75, 0.0))


def test_dropout_parameter_validation():
    x = T.Tensor(np.ones(3))
    with pytest.raises(ParameterError):
        T.dropout(x, 1.0, training=True, rng=np.random.default_rng(0))
    with pytest.raises(ParameterError):
        T.dropout(x, -0.1, training=False)
    with pytest.raises(ParameterError):
        T.dropout(x, 0.5, training=True)  # rng required


def test_frozen_leaves_get_no_gradient():
    a = T.param(np.ones((2, 2)), frozen=True)
    b = T.param(np.ones((2, 2)))
    with T.Tape() as tape:
        tape.backward(T.tensor_sum(T.mul(a, b)))
    assert a.grad is None
    assert b.grad is not None


def test_gradient_accumulates_when_reused():
    a = T.param(np.array([[2.0]]))
    with T.Tape() as tape:
        tape.backward(T.tensor_sum(T.add(T.mul(a, a), a)))  # d/da (a^2 + a) = 2a + 1
    assert np.allclose(a.grad, [[5.0]])


def test_backward_requires_scalar():
    a = T.param(np.ones((2, 2)))
    with T.Tape() as tape:
        y = T.mul(a, a)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_backward_requires_recorded_loss():
    loose = T.Tensor(np.array(1.0))
    with pytest.raises(ContractError):
        T.backward(loose)


def test_ops_without_tape_do_not_record():
    a = T.Tensor(np.ones((2, 2)))
    out = T.mul(a, a)
    assert out.tape is None and out.node_id is None


def test_same_seed_same_graph_output():
    def run():
        rng = np.random.default_rng(1234)
        x = T.param(rng.normal(size=(3, 3)))
        with T.Tape() as tape:
            loss = T.mean(T.gelu(T.matmul(x, T.transpose(x))))
            tape.backward(loss)
        return loss.data.copy(), x.grad.copy()

    la, ga = run()
    lb, gb = run()
    assert np.array_equal(la, lb) and np.array_equal(ga, gb)


def test_unbroadcast_sums_correct_axes():
    g = np.ones((2, 3, 4))
    assert T._unbroadcast(g, (3, 4)).shape == (3, 4)
    assert T._unbroadcast(g, (1, 4)).shape == (1, 4)
    assert np.array_equal(T._unbroadcast(g, (1, 4)), np.full((1, 4), 6.0))
