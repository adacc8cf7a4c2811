"""Reverse-mode differentiation over dense 2-D float64 arrays.

A :class:`Tape` records every operation whose inputs live on it; tensors that
belong to no tape are constants and operations on them are evaluated eagerly
without being recorded.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
from scipy.special import expit


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class NonFiniteTensor(FloatingPointError):
    pass


class Tape:
    """Append-only record of (kind, input node ids, saved values)."""

    __slots__ = 'nodes', 'leaves'

    def __init__(self) -> None:
        self.nodes: list[tuple[str, tuple[int | None, ...], tuple]] = []
        self.leaves: list[int] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
        self, kind: str, inputs: tuple[int | None, ...], saved: tuple
    ) -> int:
        self.nodes.append((kind, inputs, saved))
        return len(self.nodes) - 1

    def leaf(self, data) -> Tensor:
        """Register ``data`` as a trainable parameter."""
        t = Tensor(data)
        node = self.record('leaf', (), (t.data.shape,))
        self.leaves.append(node)
        return Tensor(t.data, self, node)


class Tensor:
    __slots__ = 'data', 'tape', 'node'

    def __init__(
        self, data, tape: Tape | None = None, node: int | None = None
    ) -> None:
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2:
            raise ShapeMismatch(f'tensors are 2-D, got shape {data.shape}')
        self.data = data
        self.tape = tape
        self.node = node

    def __repr__(self) -> str:
        return f'Tensor({self.rows}x{self.cols})'

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul_elem(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _emit(
    kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], saved=()
) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteTensor(f'{kind} produced non-finite values')
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError('operands are recorded on different tapes')
    if tape is None:
        return Tensor(data)
    node = tape.record(kind, tuple(t.node for t in inputs), saved)
    return Tensor(data, tape, node)


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f'{kind}: {a.shape} vs {b.shape}')


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeMismatch(f'matmul: {a.shape} @ {b.shape}')
    return _emit('matmul', a.data @ b.data, (a, b), (a.data, b.data))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape('add', a, b)
    return _emit('add', a.data + b.data, (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape('sub', a, b)
    return _emit('sub', a.data - b.data, (a, b))


def mul_elem(a: Tensor, b: Tensor) -> Tensor:
    _same_shape('mul_elem', a, b)
    return _emit('mul_elem', a.data * b.data, (a, b), (a.data, b.data))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ShapeMismatch(f'concat_cols: {a.shape} beside {b.shape}')
    return _emit(
        'concat_cols', np.hstack((a.data, b.data)), (a, b), (a.cols,)
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit('scale', a.data * c, (a,), (c,))


def row_broadcast_add(a: Tensor, bias: Tensor) -> Tensor:
    """Add the 1 x cols ``bias`` to every row of ``a``."""
    if bias.rows != 1 or bias.cols != a.cols:
        raise ShapeMismatch(f'row_broadcast_add: {a.shape} + {bias.shape}')
    return _emit('row_broadcast_add', a.data + bias.data, (a, bias))


def mul_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Multiply ``a`` by the 1 x 1 tensor ``s``."""
    if s.shape != (1, 1):
        raise ShapeMismatch(f'mul_scalar: scalar operand is {s.shape}')
    return _emit('mul_scalar', a.data * s.data, (a, s), (a.data, s.data))


def sum_all(a: Tensor) -> Tensor:
    return _emit('sum_all', a.data.sum(keepdims=True), (a,), (a.shape,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _emit('sigmoid', out, (x,), (out,))


def tanh_act(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit('tanh', out, (x,), (out,))


def swish(x: Tensor) -> Tensor:
    sig = expit(x.data)
    return _emit('swish', x.data * sig, (x,), (x.data, sig))


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` without overflow for large ``|x|``."""
    return _emit('softplus', np.logaddexp(0.0, x.data), (x,), (x.data,))


def _swish_vjp(g, saved):
    x, sig = saved
    return (g * sig * (1.0 + x * (1.0 - sig)),)


_VJP: dict[str, Callable[[np.ndarray, tuple], tuple]] = {
    'matmul': lambda g, s: (g @ s[1].T, s[0].T @ g),
    'add': lambda g, s: (g, g),
    'sub': lambda g, s: (g, -g),
    'mul_elem': lambda g, s: (g * s[1], g * s[0]),
    'concat_cols': lambda g, s: (g[:, : s[0]], g[:, s[0] :]),
    'scale': lambda g, s: (g * s[0],),
    'row_broadcast_add': lambda g, s: (g, g.sum(axis=0, keepdims=True)),
    'mul_scalar': lambda g, s: (g * s[1], (g * s[0]).sum(keepdims=True)),
    'sum_all': lambda g, s: (np.full(s[0], g[0, 0]),),
    'sigmoid': lambda g, s: (g * s[0] * (1.0 - s[0]),),
    'tanh': lambda g, s: (g * (1.0 - s[0] * s[0]),),
    'swish': _swish_vjp,
    'softplus': lambda g, s: (g * expit(s[0]),),
}


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Return ``{leaf node id: gradient of loss}`` for every leaf on tape.

    Leaves the loss does not depend on get zero gradients. The tape itself is
    not modified, so calling this twice gives identical results.
    """
    if loss.shape != (1, 1):
        raise NonScalarLoss(f'loss must be 1x1, got {loss.shape}')
    if loss.tape is not tape:
        raise ValueError('loss was not recorded on this tape')
    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * len(nodes)
    grads[loss.node] = np.ones((1, 1))  # type: ignore
    for i in range(loss.node, -1, -1):  # type: ignore
        g = grads[i]
        if g is None:
            continue
        kind, inputs, saved = nodes[i]
        if kind == 'leaf':
            continue
        for node, contribution in zip(inputs, _VJP[kind](g, saved)):
            if node is None:
                continue
            acc = grads[node]
            grads[node] = contribution if acc is None else acc + contribution
    result = {}
    for leaf in tape.leaves:
        g = grads[leaf]
        result[leaf] = np.zeros(nodes[leaf][2][0]) if g is None else g
    return result
