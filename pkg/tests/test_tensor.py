import numpy as np
import pytest

from driftcast.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from driftcast.tensor import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    absolute,
    add,
    concat_last_dim,
    concat_rows,
    forward_op,
    grad_check,
    matmul,
    mean,
    mul,
    op_kinds,
    relu,
    scale,
    sigmoid,
    slice_rows,
    softmax_rows,
    square,
    sub,
    take_rows,
    tanh,
    tensor_sum,
    transpose,
)


def test_matmul_identity():
    a = np.arange(12.0).reshape(3, 4)
    out = matmul(Tensor(np.eye(3)), Tensor(a))
    assert np.array_equal(out.data, a)


def test_softmax_rows_symmetry():
    out = softmax_rows(Tensor([[0.0, 0.0], [1.0, 1.0]]))
    assert np.allclose(out.data, [[0.5, 0.5], [0.5, 0.5]])


def test_relu_definition():
    out = relu(Tensor([[-2.0, 0.0, 3.0]]))
    assert np.array_equal(out.data, [[0.0, 0.0, 3.0]])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.normal(scale=30.0, size=(5, 7))
        out = softmax_rows(Tensor(x))
        assert np.all(np.abs(out.data.sum(axis=1) - 1.0) < 1e-12)


def test_shape_error_names_kind_and_shapes():
    with pytest.raises(ShapeError) as exc:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    msg = str(exc.value)
    assert "matmul" in msg and "(2, 3)" in msg


def test_forward_op_dispatch_and_unknown_kind():
    out = forward_op("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert np.array_equal(out.data, [4.0, 6.0])
    assert "matmul" in op_kinds()
    with pytest.raises(ValueError, match="unknown operation kind"):
        forward_op("convolve", Tensor([1.0]))


def test_backward_square_scalar():
    x = Tensor(np.asarray(3.0))
    with Tape() as tape:
        loss = mul(x, x)
    tape.backward(loss)
    assert x.grad == pytest.approx(6.0)


def test_backward_softmax_row_sum_is_constant():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    with Tape() as tape:
        loss = tensor_sum(softmax_rows(x))
    tape.backward(loss)
    assert np.all(np.abs(x.grad) < 1e-12)


def test_backward_rejects_second_call():
    x = Tensor(np.asarray(2.0))
    with Tape() as tape:
        loss = mul(x, x)
    tape.backward(loss)
    with pytest.raises(TapeError, match="already ran"):
        tape.backward(loss)


def test_backward_rejects_nonscalar_and_foreign_loss():
    x = Tensor(np.ones((2, 2)))
    with Tape() as tape:
        out = relu(x)
    with pytest.raises(TapeError, match="scalar"):
        tape.backward(out)
    with Tape() as other:
        y = relu(Tensor(np.asarray(1.0)))
    with pytest.raises(TapeError, match="not recorded"):
        tape.backward(y)


def test_leaf_rejects_nonfinite():
    with pytest.raises(ValueError, match="finite"):
        Tensor([np.inf, 1.0])


def _mlp_forward(x, w1, b1, w2, b2):
    h = relu(add(matmul(x, w1), b1))
    return mean(add(matmul(h, w2), b2))


def test_two_layer_perceptron_matches_finite_differences():
    # oracle: central differences on the loss as a function of the input
    rng = np.random.default_rng(7)
    for seed in range(10):
        r = np.random.default_rng(seed)
        w1 = Tensor(r.normal(size=(4, 5)))
        b1 = Tensor(r.normal(size=5))
        w2 = Tensor(r.normal(size=(5, 1)))
        b2 = Tensor(r.normal(size=1))
        point = rng.normal(size=(3, 4))

        err = grad_check(lambda t: _mlp_forward(t, w1, b1, w2, b2), point, eps=1e-5)
        assert err < 1e-5, f"seed {seed}: {err}"


@pytest.mark.parametrize("op", [relu, sigmoid, tanh, softmax_rows, square, absolute])
def test_elementwise_gradients_match_finite_differences(op):
    # weighted sum keeps every coordinate's gradient O(1); a plain mean of
    # softmax rows would be constant and the check degenerate
    point = np.random.default_rng(11).normal(size=(3, 4)) + 0.05
    weights = Tensor(np.random.default_rng(12).normal(size=(3, 4)) + 2.0)
    err = grad_check(lambda t: tensor_sum(mul(op(t), weights)), point, eps=1e-5)
    assert err < 1e-5


def test_structural_op_gradients():
    rng = np.random.default_rng(5)
    point = rng.normal(size=(4, 3))
    other = Tensor(rng.normal(size=(2, 3)))

    err = grad_check(lambda t: mean(concat_rows([t, other])), point)
    assert err < 1e-6
    err = grad_check(lambda t: mean(square(slice_rows(t, 1, 3))), point)
    assert err < 1e-6
    err = grad_check(lambda t: mean(square(take_rows(t, [0, 2, 2]))), point)
    assert err < 1e-6
    err = grad_check(lambda t: mean(square(transpose(t))), point)
    assert err < 1e-6
    err = grad_check(
        lambda t: mean(square(concat_last_dim([t, scale(t, 2.0)]))), point
    )
    assert err < 1e-6


def test_grad_check_quadratic_is_nearly_exact():
    err = grad_check(lambda t: mul(t, t), np.asarray(3.0), eps=1e-5)
    assert err < 1e-8


def test_grad_check_rejects_nonscalar():
    with pytest.raises(TapeError, match="scalar"):
        grad_check(lambda t: relu(t), np.ones((2, 2)))


def test_bias_and_scalar_broadcast_add():
    a = Tensor(np.ones((3, 2)))
    bias = Tensor(np.array([1.0, 2.0]))
    out = add(a, bias)
    assert np.array_equal(out.data, [[2.0, 3.0]] * 3)
    with Tape() as tape:
        loss = tensor_sum(add(a, bias))
    tape.backward(loss)
    assert np.array_equal(bias.grad, [3.0, 3.0])

    c = Tensor(np.asarray(5.0))
    with Tape() as tape:
        loss = tensor_sum(add(a, c))
    tape.backward(loss)
    assert c.grad == pytest.approx(6.0)


def test_sub_and_operator_sugar():
    a = Tensor([[2.0, 4.0]])
    b = Tensor([[1.0, 1.0]])
    assert np.array_equal(sub(a, b).data, [[1.0, 3.0]])
    assert np.array_equal((a - 1.0).data, [[1.0, 3.0]])
    assert np.array_equal((2.0 * a).data, [[4.0, 8.0]])
    assert np.array_equal((-a).data, [[-2.0, -4.0]])
    assert np.array_equal((1.0 - b).data, [[0.0, 0.0]])


def test_forward_determinism_same_seed_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(6, 6)))
        w = Tensor(rng.normal(size=(6, 6)))
        out = softmax_rows(tanh(matmul(x, w)))
        return out.data

    first, second = run(), run()
    assert first.tobytes() == second.tobytes()


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(TapeError, match="already active"):
            with Tape():
                pass


def test_gradients_shapes_match_parameters():
    rng = np.random.default_rng(9)
    w = Tensor(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(2, 4)))
    with Tape() as tape:
        loss = mean(square(matmul(x, w)))
    tape.backward(loss)
    assert w.grad.shape == w.data.shape
    assert x.grad.shape == x.data.shape


# ---------------------------------------------------------------------------
# checkpoint container


def test_checkpoint_round_trip_value_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "layer.w": rng.normal(size=(7, 3)),
        "layer.b": rng.normal(size=3),
        "scalar": np.asarray(np.pi),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tensors, meta={"epoch": 3, "note": "x"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"epoch": 3, "note": "x"}
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].shape == np.asarray(tensors[name]).shape
        assert loaded[name].tobytes() == np.asarray(tensors[name], dtype=np.float64).tobytes()


def test_checkpoint_deterministic_bytes(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.asarray(1.5)}
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    save_checkpoint(p1, tensors, meta={"k": 1})
    save_checkpoint(p2, tensors, meta={"k": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
