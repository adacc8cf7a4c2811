"""Forward evaluation of trained networks and the metrics reported on it."""

from __future__ import annotations

import logging
import tracemalloc
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import exp, sqrt
from pathlib import Path
from time import perf_counter
from typing import Any

import numpy as np

from ._autodiff import Tensor
from ._baselines import FdGrid, fd_american_1d
from ._market import (
    MarketParams,
    OptionSpec,
    PathSet,
    equivalent_1d_params,
    geometric_mean,
    payoff_f,
    payoff_grad,
    reduced_market,
)
from ._report import write_csv
from ._rnn import (
    Head,
    NetworkState,
    delta_net_step,
    init_hidden,
    network_input,
    price_net_step,
)
from ._targets import StoppingMode, TargetSet, build_targets

logger = logging.getLogger(__name__)


class SpecMismatch(ValueError):
    pass


class EmptyPositiveClass(ValueError):
    pass


class ZeroReference(ZeroDivisionError):
    pass


# Peaks seen by enclosing measurements before a nested one reset the peak.
_frames: list[int] = []


def instrument(run: Callable, *args, **kwargs) -> tuple[Any, float, int]:
    """Call ``run`` and return ``(result, wall_ms, peak_bytes)``.

    Peak bytes are the traced allocations above what was live on entry.
    Calls may be nested; an inner call does not hide its allocations from the
    outer one.
    """
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    else:
        if _frames:
            _frames[-1] = max(_frames[-1], tracemalloc.get_traced_memory()[1])
        tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    _frames.append(0)
    t0 = perf_counter()
    try:
        result = run(*args, **kwargs)
    finally:
        wall_ms = (perf_counter() - t0) * 1e3
        peak = max(_frames.pop(), tracemalloc.get_traced_memory()[1])
        if started:
            tracemalloc.stop()
        elif _frames:
            _frames[-1] = max(_frames[-1], peak)
    return result, wall_ms, max(peak - base, 0)


def check_compatible(
    spec: OptionSpec,
    params: MarketParams,
    price_net: NetworkState,
    delta_net: NetworkState,
) -> None:
    for net, head in ((price_net, Head.SOFTPLUS), (delta_net, Head.SIGMOID)):
        if net.head is not head:
            raise SpecMismatch(f'expected a {head.value} head network')
        if net.d != params.d:
            raise SpecMismatch(
                f'network was built for d={net.d}, market has d={params.d}'
            )
        if net.payoff is not None and net.payoff != spec.payoff.value:
            raise SpecMismatch(
                f'network was trained on {net.payoff}, '
                f'option is {spec.payoff.value}'
            )
    if price_net.L != delta_net.L:
        raise SpecMismatch('price and delta networks differ in depth')


def _chunks(M: int, threads: int) -> list[slice]:
    bounds = np.linspace(0, M, max(1, min(threads, M)) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def forward_surfaces(
    paths: PathSet,
    spec: OptionSpec,
    params: MarketParams,
    price_net: NetworkState,
    delta_net: NetworkState,
    targets: TargetSet,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Run both networks from n = N-1 down to 0 without recording a tape.

    Returns ``y`` (M, N+1) and ``dy`` (M, N+1, d); the last column holds the
    smoothed terminal payoff and its gradient.
    """
    M, N, d = paths.M, paths.N, paths.d
    S = paths.prices
    c, dc = targets.c, targets.dc
    discount = exp(-params.r * spec.dt)
    y = np.empty((M, N + 1))
    dy = np.empty((M, N + 1, d))
    y[:, N] = c[:, N]
    dy[:, N] = dc[:, N]

    def run(rows: slice) -> None:
        h_price = init_hidden(c[rows, N], price_net.H)
        h_delta = init_hidden(dc[rows, N], delta_net.H)
        for n in range(N - 1, -1, -1):
            x = network_input(spec, S[rows, n])
            y_n, h_price = price_net_step(
                price_net,
                h_price,
                x,
                Tensor(c[rows, n + 1, None]),
                discount,
            )
            dy_n, h_delta = delta_net_step(
                delta_net,
                h_delta,
                x,
                Tensor(dc[rows, n + 1]),
                Tensor(S[rows, n + 1] / S[rows, n]),
                discount,
            )
            y[rows, n] = y_n.data[:, 0]
            dy[rows, n] = dy_n.data

    chunks = _chunks(M, threads)
    if len(chunks) > 1:
        with ThreadPoolExecutor(len(chunks)) as pool:
            list(pool.map(run, chunks))
    else:
        run(chunks[0])
    return y, dy


def exercise_labels(
    spec: OptionSpec, paths: PathSet, y: np.ndarray
) -> np.ndarray:
    """``f >= y`` before maturity and ``f > 0`` at maturity."""
    f = payoff_f(spec, paths.prices)
    labels = f >= y
    labels[:, paths.N] = f[:, paths.N] > 0
    return labels


@dataclass(frozen=True, eq=False)
class Spacetime:
    """Values, deltas and network outputs on every path and timestep."""

    v: np.ndarray
    dv: np.ndarray
    y: np.ndarray
    dy: np.ndarray


@dataclass(frozen=True, eq=False)
class EvalReport:
    price0: float
    price0_std: float
    delta0: np.ndarray
    delta0_std: np.ndarray
    exercise_labels: np.ndarray
    mode: StoppingMode
    f1: float | None = None
    pct_err_price: float | None = None
    pct_err_delta: float | None = None
    wall_ms: float = 0.0
    peak_bytes: int = 0

    def to_dict(self) -> dict:
        return {
            'price0': self.price0,
            'price0_std': self.price0_std,
            'delta0': self.delta0.tolist(),
            'delta0_std': self.delta0_std.tolist(),
            'exercised_fraction': float(self.exercise_labels.mean()),
            'stopping_mode': self.mode.value,
            'f1': self.f1,
            'pct_err_price': self.pct_err_price,
            'pct_err_delta': self.pct_err_delta,
            'wall_ms': self.wall_ms,
            'peak_bytes': self.peak_bytes,
        }


def f1_score(labels, truth) -> float:
    """``TP / (TP + (FP + FN) / 2)`` with exercise as the positive class."""
    labels = np.asarray(labels, dtype=bool).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    if labels.shape != truth.shape:
        raise ValueError(f'{labels.shape} labels vs {truth.shape} truth')
    if not truth.any():
        raise EmptyPositiveClass('truth labels contain no exercise')
    tp = np.count_nonzero(labels & truth)
    fp = np.count_nonzero(labels & ~truth)
    fn = np.count_nonzero(~labels & truth)
    return tp / (tp + 0.5 * (fp + fn))


def percent_errors(
    price0: float, delta0, ref_price: float, ref_delta
) -> tuple[float, float]:
    delta0 = np.asarray(delta0, dtype=np.float64)
    ref_delta = np.asarray(ref_delta, dtype=np.float64)
    if ref_price == 0:
        raise ZeroReference('reference price is zero')
    ref_norm = np.linalg.norm(ref_delta)
    if ref_norm == 0:
        raise ZeroReference('reference delta is zero')
    return (
        100.0 * abs(price0 - ref_price) / abs(ref_price),
        100.0 * float(np.linalg.norm(delta0 - ref_delta)) / ref_norm,
    )


def fd_exercise_labels(
    paths: PathSet,
    spec: OptionSpec,
    params: MarketParams,
    grid: FdGrid | None = None,
) -> np.ndarray:
    """Exercise labels of the finite difference solution on every sample.

    Only geometric payoffs reduce to one dimension; a sample is exercised when
    the payoff is positive and the reference value does not exceed it.
    """
    if not spec.payoff.is_geometric:
        raise SpecMismatch(
            'reference labels need a geometric payoff; '
            'compare methods against each other instead'
        )
    equivalent_1d_params(params)  # raises for heterogeneous markets
    N = paths.N
    solution = fd_american_1d(
        reduced_market(params), spec, grid or FdGrid(), store_every=1
    )
    s_reduced = geometric_mean(paths.prices)
    f = payoff_f(spec, paths.prices)
    tol = 1e-6 * spec.strike
    truth = np.empty(f.shape, dtype=bool)
    for n in range(N + 1):
        value = solution.price(s_reduced[:, n], n * spec.dt)
        truth[:, n] = (f[:, n] > 0) & (f[:, n] >= value - tol)
    truth[:, N] = f[:, N] > 0
    return truth


def evaluate(
    paths: PathSet,
    spec: OptionSpec,
    params: MarketParams,
    price_net: NetworkState,
    delta_net: NetworkState,
    *,
    mode: StoppingMode = StoppingMode.CROSS_SECTIONAL_ARGMAX,
    force_maturity: bool = False,
    reference: tuple[float, Any] | None = None,
    truth: np.ndarray | None = None,
    threads: int = 1,
) -> tuple[EvalReport, Spacetime]:
    """Price, delta and exercise boundary on fresh paths.

    ``reference`` is ``(price0, delta0)`` of another method and ``truth``
    reference exercise labels; each adds the corresponding metric.
    """
    check_compatible(spec, params, price_net, delta_net)

    def run():
        targets = build_targets(
            paths, spec, params, force_maturity=force_maturity
        )
        y, dy = forward_surfaces(
            paths, spec, params, price_net, delta_net, targets, threads
        )
        if mode is StoppingMode.PER_PATH_BOUNDARY and not force_maturity:
            # second pass with targets stopped at the networks' own boundary
            targets = build_targets(
                paths, spec, params, mode, exercise_labels(spec, paths, y)
            )
            y, dy = forward_surfaces(
                paths, spec, params, price_net, delta_net, targets, threads
            )
        return y, dy

    (y, dy), wall_ms, peak_bytes = instrument(run)
    N, M = paths.N, paths.M
    f = payoff_f(spec, paths.prices)
    df = payoff_grad(spec, paths.prices)
    labels = exercise_labels(spec, paths, y)
    v = np.maximum(f, y)
    v[:, N] = f[:, N]
    dv = np.where(labels[..., None], df, dy)
    dv[:, N] = df[:, N]

    v0 = v[:, 0]
    std = v0.std(ddof=1) / sqrt(M) if M > 1 else 0.0
    delta_std = (
        dv[:, 0].std(axis=0, ddof=1) / sqrt(M) if M > 1 else np.zeros(paths.d)
    )
    price0 = float(v0.mean())
    delta0 = dv[:, 0].mean(axis=0)
    pct_price = pct_delta = None
    if reference is not None:
        pct_price, pct_delta = percent_errors(price0, delta0, *reference)
    f1 = None if truth is None else f1_score(labels, truth)
    logger.info(
        'evaluated %d paths: price0=%.6g (std %.3g) in %.0f ms',
        M,
        price0,
        std,
        wall_ms,
    )
    report = EvalReport(
        price0=price0,
        price0_std=float(std),
        delta0=delta0,
        delta0_std=delta_std,
        exercise_labels=labels,
        mode=mode,
        f1=f1,
        pct_err_price=pct_price,
        pct_err_delta=pct_delta,
        wall_ms=wall_ms,
        peak_bytes=peak_bytes,
    )
    return report, Spacetime(v, dv, y, dy)


def write_boundary_csv(
    path: str | Path,
    paths: PathSet,
    labels: np.ndarray,
    truth: np.ndarray | None = None,
    limit: int | None = None,
) -> None:
    """Rows ``(n, m, s_1..s_d, predicted[, truth])`` for plotting."""
    M = paths.M if limit is None else min(limit, paths.M)
    N, d = paths.N, paths.d
    n, m = np.meshgrid(np.arange(N + 1), np.arange(M), indexing='ij')
    columns = [
        n.ravel(),
        m.ravel(),
        paths.prices[:M].transpose(1, 0, 2).reshape(-1, d),
        labels[:M].T.ravel(),
    ]
    header = ['n', 'm'] + [f's_{i + 1}' for i in range(d)] + ['predicted']
    if truth is not None:
        columns.append(truth[:M].T.ravel())
        header.append('truth')
    write_csv(path, header, np.column_stack(columns))
