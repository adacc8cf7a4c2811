"""Backward-in-time training of the price and delta networks with Adam."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import exp, sqrt
from pathlib import Path
from time import perf_counter

import numpy as np
from numpy.random import Generator, Philox

from ._autodiff import (
    NonFiniteTensor,
    ShapeMismatch,
    Tape,
    Tensor,
    backward,
)
from ._evaluation import exercise_labels, forward_surfaces, instrument
from ._market import MarketParams, OptionSpec, PathSet
from ._report import write_csv
from ._rnn import (
    Head,
    NetworkState,
    delta_net_step,
    init_hidden,
    init_weights,
    network_input,
    price_net_step,
)
from ._targets import (
    StoppingMode,
    TargetSet,
    build_targets,
    loss_terms,
    sigma_tilde,
)

logger = logging.getLogger(__name__)

HISTORY_HEADER = ('epoch', 'loss', 'price_term', 'delta_term', 'wall_ms')


class NonFiniteLoss(FloatingPointError):
    def __init__(self, epoch: int, n: int, tensor: str) -> None:
        super().__init__(
            f'non-finite {tensor} at epoch {epoch}, timestep {n}'
        )
        self.epoch = epoch
        self.n = n
        self.tensor = tensor


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and unrolling settings.

    ``bptt_steps`` is how many timesteps one recorded graph spans; ``0``, the
    default, records the whole sequence at once. A positive value carries the
    hidden state across windows as a constant, which keeps the tape size
    independent of N. ``grad_clip`` bounds the global gradient norm of both
    networks together; ``None`` disables clipping. ``max_wall_ms`` stops
    training at the first minibatch boundary past the budget.
    """

    epochs: int = 200
    batch_size: int = 100000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    stopping_mode: StoppingMode = StoppingMode.CROSS_SECTIONAL_ARGMAX
    L: int = 7
    grad_clip: float | None = 10.0
    bptt_steps: int = 0
    threads: int = 1
    force_maturity: bool = False
    max_wall_ms: float | None = None

    def __post_init__(self):
        object.__setattr__(
            self, 'stopping_mode', StoppingMode(self.stopping_mode)
        )
        if self.epochs < 0:
            raise ValueError('epochs must be non-negative')
        if self.batch_size < 1 or self.L < 1 or self.threads < 1:
            raise ValueError('batch_size, L and threads must be positive')
        if self.bptt_steps < 0:
            raise ValueError('bptt_steps must be non-negative')
        for name in ('learning_rate', 'adam_eps'):
            if not getattr(self, name) > 0:
                raise ValueError(f'{name} must be positive')
        for name in ('adam_beta1', 'adam_beta2'):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f'{name} must lie in [0, 1)')
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError('grad_clip must be positive or None')
        if self.max_wall_ms is not None and not self.max_wall_ms > 0:
            raise ValueError('max_wall_ms must be positive or None')


class AdamState:
    """First and second moments per parameter and the step counter."""

    __slots__ = 'm', 'v', 'step', 'beta1', 'beta2', 'eps'

    def __init__(
        self,
        shapes: Sequence[tuple[int, ...]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    @classmethod
    def for_state(cls, state: NetworkState, cfg: TrainConfig) -> AdamState:
        return cls(
            [a.shape for a in state.arrays()],
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        )


def adam_step(
    adam: AdamState,
    params: NetworkState,
    grads: Sequence[np.ndarray],
    lr: float,
) -> NetworkState:
    """Return ``params`` after one bias-corrected Adam update."""
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise ShapeMismatch(f'{len(grads)} gradients for {len(arrays)} params')
    adam.step += 1
    b1, b2 = adam.beta1, adam.beta2
    step_size = lr / (1.0 - b1**adam.step)
    bc2 = 1.0 - b2**adam.step
    updated = []
    for a, g, m, v in zip(arrays, grads, adam.m, adam.v):
        if g.shape != a.shape:
            raise ShapeMismatch(f'gradient {g.shape} for parameter {a.shape}')
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        updated.append(a - step_size * m / (np.sqrt(v / bc2) + adam.eps))
    return params.with_arrays(updated)


@dataclass(frozen=True, eq=False)
class TrainResult:
    price: NetworkState
    delta: NetworkState
    history: np.ndarray = field(repr=False)
    wall_ms: float = 0.0
    peak_bytes: int = 0
    # part of peak_bytes spent on (M, N+1) buffers rebuilt during training
    path_bytes: int = 0
    budget_exhausted: bool = False

    @property
    def non_path_bytes(self) -> int:
        return max(self.peak_bytes - self.path_bytes, 0)

    def history_to_csv(self, path: str | Path) -> None:
        write_csv(path, HISTORY_HEADER, self.history)


def _chunks(rows: np.ndarray, threads: int) -> list[np.ndarray]:
    return [c for c in np.array_split(rows, threads) if len(c)]


def _windows(N: int, bptt_steps: int) -> list[range]:
    span = bptt_steps or N
    return [
        range(top, max(top - span, 0), -1) for top in range(N, 0, -span)
    ]


class _Trainer:
    __slots__ = (
        'paths',
        'spec',
        'params',
        'cfg',
        'sigma_tilde',
        'discount',
        'epoch',
    )

    def __init__(self, paths, spec, params, cfg) -> None:
        self.paths = paths
        self.spec = spec
        self.params = params
        self.cfg = cfg
        self.sigma_tilde = sigma_tilde(params)
        self.discount = exp(-params.r * spec.dt)
        self.epoch = 0

    def batch_gradients(
        self,
        price: NetworkState,
        delta: NetworkState,
        targets: TargetSet,
        rows: np.ndarray,
        weight: float,
    ) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
        """Gradients of ``weight`` times the mean per-step loss on ``rows``.

        Also returns the summed (loss, price term, delta term) over steps.
        """
        # index one step at a time; no (rows, N+1) copies
        S = self.paths.prices
        N = self.paths.N
        c, dc = targets.c, targets.dc
        price_grads = [np.zeros_like(a) for a in price.arrays()]
        delta_grads = [np.zeros_like(a) for a in delta.arrays()]
        totals = np.zeros(3)
        h_price = init_hidden(c[rows, N], price.H)
        h_delta = init_hidden(dc[rows, N], delta.H)
        for window in _windows(N, self.cfg.bptt_steps):
            tape = Tape()
            price_on = price.on_tape(tape)
            delta_on = delta.on_tape(tape)
            window_loss = None
            for n_next in window:
                n = n_next - 1
                stage = 'network output'
                try:
                    s_n = S[rows, n]
                    x = network_input(self.spec, s_n)
                    y, h_price = price_net_step(
                        price_on,
                        h_price,
                        x,
                        Tensor(c[rows, n_next, None]),
                        self.discount,
                    )
                    dy, h_delta = delta_net_step(
                        delta_on,
                        h_delta,
                        x,
                        Tensor(dc[rows, n_next]),
                        Tensor(S[rows, n_next] / s_n),
                        self.discount,
                    )
                    stage = 'loss'
                    step_loss, price_term, delta_term = loss_terms(
                        y,
                        dy,
                        c[rows, n, None],
                        dc[rows, n],
                        self.sigma_tilde,
                        self.spec.dt,
                    )
                except NonFiniteTensor as e:
                    raise NonFiniteLoss(self.epoch, n, stage) from e
                totals += (
                    step_loss.data[0, 0],
                    price_term.data[0, 0],
                    delta_term.data[0, 0],
                )
                if window_loss is None:
                    window_loss = step_loss
                else:
                    window_loss = window_loss + step_loss
            grads = backward(tape, window_loss)  # type: ignore
            scale = weight / N
            for acc, t in zip(price_grads, price_on.parameters()):
                acc += scale * grads[t.node]  # type: ignore
            for acc, t in zip(delta_grads, delta_on.parameters()):
                acc += scale * grads[t.node]  # type: ignore
            # truncate back-propagation at the window boundary
            h_price = Tensor(h_price.data)
            h_delta = Tensor(h_delta.data)
        return price_grads, delta_grads, totals * weight / N

    def minibatch(
        self,
        price: NetworkState,
        delta: NetworkState,
        targets: TargetSet,
        rows: np.ndarray,
    ):
        chunks = _chunks(rows, self.cfg.threads)
        weights = [len(c) / len(rows) for c in chunks]
        if len(chunks) > 1:
            with ThreadPoolExecutor(len(chunks)) as pool:
                parts = list(
                    pool.map(
                        self.batch_gradients,
                        [price] * len(chunks),
                        [delta] * len(chunks),
                        [targets] * len(chunks),
                        chunks,
                        weights,
                    )
                )
        else:
            parts = [
                self.batch_gradients(price, delta, targets, rows, 1.0)
            ]
        # fixed order reduction
        price_grads, delta_grads, totals = parts[0]
        for p, d, t in parts[1:]:
            for acc, g in zip(price_grads, p):
                acc += g
            for acc, g in zip(delta_grads, d):
                acc += g
            totals = totals + t
        return price_grads, delta_grads, totals


def _clip(grads: list[np.ndarray], max_norm: float | None) -> float:
    norm = sqrt(sum(float((g * g).sum()) for g in grads))
    if not np.isfinite(norm):
        raise NonFiniteTensor('gradient norm is not finite')
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


def train(
    paths: PathSet,
    spec: OptionSpec,
    params: MarketParams,
    cfg: TrainConfig | None = None,
    *,
    price: NetworkState | None = None,
    delta: NetworkState | None = None,
) -> TrainResult:
    """Fit both networks to the continuation targets of ``paths``.

    Each epoch walks a seeded permutation of the paths in minibatches and
    takes one Adam step per minibatch. The reported epoch loss is the mean
    over timesteps and paths. Networks may be passed in to resume training.
    """
    cfg = cfg or TrainConfig()
    if paths.d != params.d:
        raise ShapeMismatch(f'paths have d={paths.d}, market d={params.d}')
    if paths.N != spec.steps:
        raise ShapeMismatch(f'paths have N={paths.N}, option N={spec.steps}')
    if not spec.payoff.is_call:
        # the sigmoid delta head only spans (0, 1)
        raise ValueError(f'cannot train networks on {spec.payoff.value}')
    payoff = spec.payoff.value
    if price is None:
        price = init_weights(params.d, cfg.L, Head.SOFTPLUS, cfg.seed, payoff)
    if delta is None:
        delta = init_weights(
            params.d, cfg.L, Head.SIGMOID, cfg.seed + 1, payoff
        )
    if cfg.epochs == 0:
        return TrainResult(price, delta, np.empty((0, len(HISTORY_HEADER))))

    # path-shaped inputs are allocated before the measured call
    targets = build_targets(
        paths, spec, params, force_maturity=cfg.force_maturity
    )

    def run():
        return _train(paths, spec, params, cfg, price, delta, targets)

    (price, delta, history, path_bytes, exhausted), wall_ms, peak_bytes = (
        instrument(run)
    )
    logger.info(
        'trained %d epochs on %d paths in %.0f ms (peak %d bytes)',
        len(history),
        paths.M,
        wall_ms,
        peak_bytes,
    )
    if exhausted:
        logger.warning(
            'wall time budget of %g ms reached after %d epochs',
            cfg.max_wall_ms,
            len(history),
        )
    return TrainResult(
        price,
        delta,
        history,
        wall_ms,
        peak_bytes,
        min(path_bytes, peak_bytes),
        exhausted,
    )


def _relabel_bytes(paths: PathSet) -> int:
    """Bytes of one per-path relabelling: surfaces, labels and new targets."""
    M, n1, d = paths.M, paths.N + 1, paths.d
    surfaces = M * n1 * (1 + d) * 8
    labels = M * n1
    targets = surfaces + M * n1 * 8
    # the previous targets are still alive while the new ones are built
    return surfaces + labels + 2 * targets


def _train(paths, spec, params, cfg, price, delta, targets):
    trainer = _Trainer(paths, spec, params, cfg)
    M = paths.M
    batch = min(cfg.batch_size, M)
    rng = Generator(Philox(cfg.seed))
    price_adam = AdamState.for_state(price, cfg)
    delta_adam = AdamState.for_state(delta, cfg)
    per_path = (
        cfg.stopping_mode is StoppingMode.PER_PATH_BOUNDARY
        and not cfg.force_maturity
    )
    path_bytes = _relabel_bytes(paths) if per_path else 0
    budget = cfg.max_wall_ms
    exhausted = False
    history = []
    t0 = perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        trainer.epoch = epoch
        if per_path:
            y, _ = forward_surfaces(
                paths, spec, params, price, delta, targets, cfg.threads
            )
            targets = build_targets(
                paths,
                spec,
                params,
                cfg.stopping_mode,
                exercise_labels(spec, paths, y),
            )
            del y
        order = rng.permutation(M)
        totals = np.zeros(3)
        seen = 0
        for start in range(0, M, batch):
            rows = np.sort(order[start : start + batch])
            price_grads, delta_grads, batch_totals = trainer.minibatch(
                price, delta, targets, rows
            )
            try:
                _clip(price_grads + delta_grads, cfg.grad_clip)
            except NonFiniteTensor as e:
                raise NonFiniteLoss(epoch, 0, 'gradient') from e
            price = adam_step(
                price_adam, price, price_grads, cfg.learning_rate
            )
            delta = adam_step(
                delta_adam, delta, delta_grads, cfg.learning_rate
            )
            totals += batch_totals * len(rows)
            seen += len(rows)
            if budget is not None and (perf_counter() - t0) * 1e3 > budget:
                exhausted = True
                break
        totals /= seen
        wall_ms = (perf_counter() - t0) * 1e3
        history.append((epoch, *totals, wall_ms))
        logger.info(
            'epoch %d: loss %.6g (price %.6g, delta %.6g)', epoch, *totals
        )
        if exhausted:
            break
    history = np.array(history).reshape(-1, len(HISTORY_HEADER))
    return price, delta, history, path_bytes, exhausted
