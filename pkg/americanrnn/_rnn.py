"""Deep GRU price and delta networks."""

from __future__ import annotations

import json
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import expit

from ._autodiff import (
    ShapeMismatch,
    Tape,
    Tensor,
    concat_cols,
    mul_scalar,
    row_broadcast_add,
    scale,
    sigmoid,
    softplus,
    swish,
    tanh_act,
)
from ._market import OptionSpec, payoff_g

RNNSTATE_MAGIC = b'RNNSTATE1'
RNNSTATE_HEADER = np.dtype(
    [
        ('magic', 'S9'),
        ('L', '<u8'),
        ('d', '<u8'),
        ('H', '<u8'),
        ('out', '<u8'),
        ('head', '<u8'),
    ]
)


class Head(Enum):
    SOFTPLUS = 'softplus'  # price network
    SIGMOID = 'sigmoid'  # delta network

    @property
    def code(self) -> int:
        return 0 if self is Head.SOFTPLUS else 1


@dataclass(frozen=True, eq=False)
class GruLayerParams:
    """Gate weights map ``[h, input]`` (rows) to the hidden width (cols)."""

    W_r: Tensor
    W_z: Tensor
    W_h: Tensor
    b_r: Tensor
    b_z: Tensor
    b_h: Tensor


@dataclass(frozen=True, eq=False)
class NetworkState:
    """Weights of one network together with what it was built for.

    ``blend_raw`` is the unconstrained scalar whose sigmoid is the blending
    coefficient (alpha for the price network, beta for the delta network).
    """

    d: int
    head: Head
    layers: tuple[GruLayerParams, ...]
    W_e: Tensor
    b_e: Tensor
    W_out: Tensor
    b_out: Tensor
    blend_raw: Tensor
    payoff: str | None = None
    seed: int | None = None

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def H(self) -> int:
        return 2 * self.d

    @property
    def out_width(self) -> int:
        return self.W_out.cols

    @property
    def blend(self) -> float:
        return float(expit(self.blend_raw.data[0, 0]))

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Parameters in declaration order, which is also the file order."""
        for i, layer in enumerate(self.layers):
            for f in fields(layer):
                yield f'layers.{i}.{f.name}', getattr(layer, f.name)
        for name in ('W_e', 'b_e', 'W_out', 'b_out', 'blend_raw'):
            yield name, getattr(self, name)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.parameters()]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def with_arrays(
        self, arrays: Sequence[np.ndarray], tape: Tape | None = None
    ) -> NetworkState:
        """Rebuild the state from arrays given in declaration order.

        With a ``tape`` every array becomes a leaf recorded on it.
        """
        params = self.parameters()
        if len(arrays) != len(params):
            raise ShapeMismatch(
                f'expected {len(params)} arrays, got {len(arrays)}'
            )
        new = []
        for old, a in zip(params, arrays):
            if a.shape != old.shape:
                raise ShapeMismatch(f'{a.shape} does not match {old.shape}')
            new.append(Tensor(a) if tape is None else tape.leaf(a))
        it = iter(new)
        layers = tuple(
            GruLayerParams(*(next(it) for _ in range(6))) for _ in self.layers
        )
        return replace(
            self,
            layers=layers,
            W_e=next(it),
            b_e=next(it),
            W_out=next(it),
            b_out=next(it),
            blend_raw=next(it),
        )

    def on_tape(self, tape: Tape) -> NetworkState:
        return self.with_arrays(self.arrays(), tape)

    def metadata(self) -> dict:
        return {
            'L': self.L,
            'd': self.d,
            'H': self.H,
            'head': self.head.value,
            'payoff': self.payoff,
            'seed': self.seed,
            'alpha' if self.head is Head.SOFTPLUS else 'beta': self.blend,
            'parameters': self.parameter_count(),
        }

    def save(self, path: str | Path) -> None:
        """Write the binary weights and a ``.json`` metadata file beside it."""
        path = Path(path)
        header = np.array(
            [
                (
                    RNNSTATE_MAGIC,
                    self.L,
                    self.d,
                    self.H,
                    self.out_width,
                    self.head.code,
                )
            ],
            dtype=RNNSTATE_HEADER,
        )
        with open(path, 'wb') as f:
            f.write(header.tobytes())
            for a in self.arrays():
                f.write(a.astype('<f8').tobytes())
        path.with_suffix('.json').write_text(
            json.dumps(self.metadata(), indent=2), encoding='utf8'
        )

    @classmethod
    def load(cls, path: str | Path) -> NetworkState:
        path = Path(path)
        data = path.read_bytes()
        header = np.frombuffer(data, RNNSTATE_HEADER, 1)[0]
        if header['magic'] != RNNSTATE_MAGIC:
            raise ValueError(f'{path} is not an RNNSTATE1 file')
        L, d, out = int(header['L']), int(header['d']), int(header['out'])
        head = Head.SIGMOID if header['head'] else Head.SOFTPLUS
        meta_path = path.with_suffix('.json')
        meta = (
            json.loads(meta_path.read_text(encoding='utf8'))
            if meta_path.exists()
            else {}
        )
        template = _zeros(d, L, head, out)
        offset = RNNSTATE_HEADER.itemsize
        arrays = []
        for t in template.parameters():
            a = np.frombuffer(data, '<f8', t.data.size, offset)
            arrays.append(a.reshape(t.shape).astype(np.float64))
            offset += 8 * t.data.size
        if offset != len(data):
            raise ValueError(f'{path} has trailing or missing bytes')
        return replace(
            template.with_arrays(arrays),
            payoff=meta.get('payoff'),
            seed=meta.get('seed'),
        )


def _shapes(d: int, L: int, out: int) -> Iterator[tuple[int, int]]:
    H = 2 * d
    for _ in range(L):
        # layer 1 sees X (width 2d), deeper layers the previous h (width H)
        yield from ((H + H, H),) * 3
        yield from ((1, H),) * 3
    yield (H, H)
    yield (1, H)
    yield (H, out)
    yield (1, out)
    yield (1, 1)


def _build(
    d: int, L: int, head: Head, arrays: list[np.ndarray], **kwargs
) -> NetworkState:
    t = [Tensor(a) for a in arrays]
    layers = tuple(GruLayerParams(*t[6 * i : 6 * i + 6]) for i in range(L))
    return NetworkState(d, head, layers, *t[6 * L :], **kwargs)


def _zeros(d: int, L: int, head: Head, out: int) -> NetworkState:
    return _build(d, L, head, [np.zeros(s) for s in _shapes(d, L, out)])


def init_weights(
    d: int,
    L: int = 7,
    head: Head = Head.SOFTPLUS,
    seed: int = 0,
    payoff: str | None = None,
) -> NetworkState:
    """Glorot-uniform weights, zero biases and ``blend_raw = 0``.

    The price network (softplus head) has one output per path; the delta
    network (sigmoid head) has one output per asset.
    """
    if d < 1 or L < 1:
        raise ValueError('d and L must be at least 1')
    head = Head(head)
    out = 1 if head is Head.SOFTPLUS else d
    rng = Generator(Philox(seed))
    arrays = []
    for rows, cols in _shapes(d, L, out):
        if rows == 1:
            arrays.append(np.zeros((rows, cols)))
            continue
        bound = np.sqrt(6.0 / (rows + cols))
        arrays.append(rng.uniform(-bound, bound, (rows, cols)))
    return _build(d, L, head, arrays, payoff=payoff, seed=seed)


def network_input(spec: OptionSpec, s: np.ndarray) -> Tensor:
    """``X = [S, g(S) 1_d]``, the unnormalized M x 2d network input."""
    g = payoff_g(spec, s)
    return Tensor(np.hstack((s, np.repeat(g[:, None], s.shape[1], axis=1))))


def init_hidden(terminal, width: int) -> Tensor:
    """Pad the terminal value (M x 1) or gradient (M x d) with itself."""
    terminal = np.asarray(terminal, dtype=np.float64)
    if terminal.ndim == 1:
        terminal = terminal[:, None]
    reps, rem = divmod(width, terminal.shape[1])
    if rem:
        raise ShapeMismatch(
            f'cannot tile width {terminal.shape[1]} to {width}'
        )
    return Tensor(np.tile(terminal, (1, reps)))


def gru_cell(params: GruLayerParams, h_prev: Tensor, x: Tensor) -> Tensor:
    hx = concat_cols(h_prev, x)
    r = sigmoid(row_broadcast_add(hx @ params.W_r, params.b_r))
    z = sigmoid(row_broadcast_add(hx @ params.W_z, params.b_z))
    h_cand = tanh_act(
        row_broadcast_add(
            concat_cols(r * h_prev, x) @ params.W_h, params.b_h
        )
    )
    # (1 - z) h + z h_cand
    return h_prev + z * (h_cand - h_prev)


def deep_forward(
    state: NetworkState, h_prev: Tensor, x: Tensor, head: Head | None = None
) -> tuple[Tensor, Tensor]:
    """Run the GRU stack, the swish embedding and the output head.

    Every layer receives the same previous hidden state; the first layer takes
    ``x`` as input and each later layer the hidden state of the one below.
    Returns ``(output, top hidden state)``.
    """
    if h_prev.cols != state.H:
        raise ShapeMismatch(
            f'hidden state has width {h_prev.cols}, expected {state.H}'
        )
    h = x
    for layer in state.layers:
        h = gru_cell(layer, h_prev, h)
    e = swish(row_broadcast_add(h @ state.W_e, state.b_e))
    o = row_broadcast_add(e @ state.W_out, state.b_out)
    if (head or state.head) is Head.SOFTPLUS:
        return softplus(o), h
    return sigmoid(o), h


def price_net_step(
    state: NetworkState,
    h_prev: Tensor,
    x: Tensor,
    c_next: Tensor,
    discount: float,
) -> tuple[Tensor, Tensor]:
    """``y = (1 - alpha) discount c_next + alpha F``; returns ``(y, h)``."""
    f, h = deep_forward(state, h_prev, x, Head.SOFTPLUS)
    if c_next.shape != f.shape:
        raise ShapeMismatch(f'c_next is {c_next.shape}, expected {f.shape}')
    base = scale(c_next, discount)
    return base + mul_scalar(f - base, sigmoid(state.blend_raw)), h


def delta_net_step(
    state: NetworkState,
    h_prev: Tensor,
    x: Tensor,
    dc_next: Tensor,
    price_ratio: Tensor,
    discount: float,
) -> tuple[Tensor, Tensor]:
    """``dy = (1 - beta) discount dc_next S[n+1]/S[n] + beta G``."""
    g, h = deep_forward(state, h_prev, x, Head.SIGMOID)
    if dc_next.shape != g.shape:
        raise ShapeMismatch(f'dc_next is {dc_next.shape}, expected {g.shape}')
    base = scale(dc_next * price_ratio, discount)
    return base + mul_scalar(g - base, sigmoid(state.blend_raw)), h
