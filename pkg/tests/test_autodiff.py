import numpy as np
from pytest import approx, mark, raises

from americanrnn import (
    NonFiniteTensor,
    NonScalarLoss,
    ShapeMismatch,
    Tape,
    Tensor,
    backward,
)
from americanrnn._autodiff import (
    concat_cols,
    mul_scalar,
    row_broadcast_add,
    scale,
    sigmoid,
    softplus,
    sum_all,
    swish,
    tanh_act,
)


def numeric_gradient(f, x: np.ndarray, h=1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def test_tensors_are_two_dimensional():
    assert Tensor([[1.0, 2.0]]).shape == (1, 2)
    with raises(ShapeMismatch):
        Tensor([1.0, 2.0])


def test_constants_are_not_recorded():
    a = Tensor(np.ones((2, 2)))
    b = a @ a + a
    assert b.tape is None
    assert b.data.tolist() == [[3, 3], [3, 3]]


def test_matmul_gradient():
    tape = Tape()
    a = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
    b = tape.leaf([[5.0], [6.0]])
    loss = sum_all(a @ b)
    grads = backward(tape, loss)
    assert grads[a.node].tolist() == [[5, 6], [5, 6]]
    assert grads[b.node].tolist() == [[4], [6]]
    assert len(tape) == 4


def test_unreachable_leaf_gets_zero_gradient():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    unused = tape.leaf(np.ones((4, 1)))
    grads = backward(tape, sum_all(scale(a, 3.0)))
    assert (grads[a.node] == 3).all()
    assert grads[unused.node].shape == (4, 1)
    assert not grads[unused.node].any()


def test_backward_does_not_consume_the_tape():
    tape = Tape()
    a = tape.leaf([[0.5, -1.0]])
    loss = sum_all(a * a)
    first = backward(tape, loss)[a.node]
    second = backward(tape, loss)[a.node]
    assert np.array_equal(first, second)
    assert first.tolist() == [[1.0, -2.0]]


def test_non_scalar_loss():
    tape = Tape()
    a = tape.leaf(np.ones((2, 1)))
    with raises(NonScalarLoss):
        backward(tape, a + a)


def test_shape_mismatch():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 2)))
    with raises(ShapeMismatch):
        a + b
    with raises(ShapeMismatch):
        a @ a
    with raises(ShapeMismatch):
        row_broadcast_add(a, Tensor(np.ones((1, 2))))
    with raises(ShapeMismatch):
        mul_scalar(a, Tensor(np.ones((1, 2))))
    with raises(ShapeMismatch):
        concat_cols(a, b)


def test_non_finite_values_are_rejected():
    a = Tensor([[np.inf]])
    with raises(NonFiniteTensor):
        scale(a, 1.0)
    big = Tensor([[1e308]])
    with raises(NonFiniteTensor):
        scale(big, 10.0)


def test_operands_from_two_tapes():
    a = Tape().leaf([[1.0]])
    b = Tape().leaf([[1.0]])
    with raises(ValueError):
        a + b


def test_softplus_is_stable():
    out = softplus(Tensor([[-1000.0, 0.0, 1000.0]])).data
    assert out == approx([[0.0, np.log(2), 1000.0]])


@mark.parametrize(
    'op', [sigmoid, tanh_act, swish, softplus], ids=lambda f: f.__name__
)
def test_activation_gradients(op):
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 4)) * 3

    def f(x):
        return float(op(Tensor(x)).data.sum())

    tape = Tape()
    x = tape.leaf(x0.copy())
    grads = backward(tape, sum_all(op(x)))
    assert grads[x.node] == approx(
        numeric_gradient(f, x0), rel=1e-6, abs=1e-7
    )


def test_composite_gradient():
    rng = np.random.default_rng(1)
    arrays = [rng.normal(size=s) for s in ((4, 3), (3, 2), (1, 2), (1, 1))]

    def forward(tape, a, w, b, s):
        if tape is not None:
            a, w, b, s = (tape.leaf(v) for v in (a, w, b, s))
        else:
            a, w, b, s = (Tensor(v) for v in (a, w, b, s))
        h = tanh_act(row_broadcast_add(a @ w, b))
        wide = concat_cols(h, sigmoid(h) - h)
        return sum_all(mul_scalar(wide * wide, s)), (a, w, b, s)

    tape = Tape()
    loss, leaves = forward(tape, *arrays)
    grads = backward(tape, loss)
    for i, leaf in enumerate(leaves):

        def f(x, i=i):
            values = list(arrays)
            values[i] = x
            return float(forward(None, *values)[0].data[0, 0])

        expected = numeric_gradient(f, arrays[i].copy())
        assert grads[leaf.node] == approx(expected, rel=1e-5, abs=1e-7)


def test_random_sum_gradients_are_ones():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        rows, cols = rng.integers(1, 5, 2)
        tape = Tape()
        a = tape.leaf(rng.normal(size=(rows, cols)))
        b = tape.leaf(rng.normal(size=(rows, cols)))
        grads = backward(tape, sum_all(a - b))
        assert (grads[a.node] == 1).all()
        assert (grads[b.node] == -1).all()
