"""Discrete delta-hedging backtests of a short American option."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from math import exp
from pathlib import Path

import numpy as np

from ._baselines import (
    FdGrid,
    _regress,
    bs_european_call,
    bs_european_put,
    fd_american_1d,
    longstaff_schwartz,
    ls_basis,
)
from ._evaluation import evaluate
from ._market import (
    MarketParams,
    OptionSpec,
    PathSet,
    equivalent_1d_params,
    geometric_mean,
    payoff_f,
    payoff_grad,
    reduced_market,
    simulate_paths,
)
from ._report import write_csv, write_json
from ._rnn import NetworkState

logger = logging.getLogger(__name__)


class Provider(Enum):
    RNN_NETS = 'rnn'
    FINITE_DIFFERENCE = 'fd'
    LONGSTAFF_SCHWARTZ = 'ls'
    BLACK_SCHOLES = 'bs'


@dataclass(frozen=True, eq=False)
class HedgeConfig:
    """``paths`` must be simulated on the hedge grid (N == intervals).

    ``calibration`` is an independent set on the same grid that the rnn
    provider fits its per-step regressions on; it is simulated from the next
    seed when missing.
    """

    intervals: int
    provider: Provider
    paths: PathSet
    bins: int = 50
    calibration: PathSet | None = None

    def __post_init__(self):
        object.__setattr__(self, 'provider', Provider(self.provider))
        if self.intervals < 1:
            raise ValueError('intervals must be at least 1')
        if self.paths.N != self.intervals:
            raise ValueError(
                f'hedge paths have {self.paths.N} steps but {self.intervals} '
                'intervals were requested; simulate paths on the hedge grid'
            )
        calibration = self.calibration
        if calibration is not None and calibration.N != self.intervals:
            raise ValueError(
                f'calibration paths have {calibration.N} steps but '
                f'{self.intervals} intervals were requested'
            )


@dataclass(frozen=True, eq=False)
class HedgeSurface:
    """Provider values (M, K+1), deltas (M, K+1, d) and exercise flags."""

    values: np.ndarray
    deltas: np.ndarray
    exercise: np.ndarray


@dataclass(frozen=True, eq=False)
class HedgeLedger:
    """Post-rebalance holdings and cash, pre-rebalance portfolio values and
    the payoff settled at each step."""

    holdings: np.ndarray
    cash: np.ndarray
    pre_value: np.ndarray
    paid: np.ndarray
    stop: np.ndarray
    relative_pnl: np.ndarray

    @property
    def post_value(self) -> np.ndarray:
        return self.pre_value - self.paid


def replicate(
    paths: PathSet,
    spec: OptionSpec,
    params: MarketParams,
    surface: HedgeSurface,
) -> HedgeLedger:
    """Run the self-financing replicating portfolio on every path.

    The portfolio starts at the provider's value, holds the provider's delta
    and keeps the rest in cash growing at ``r``; held shares also earn their
    dividend yield. At the first exercise flag (or at maturity) the option's
    payoff is paid out and the remainder stays in cash. The relative P&L is
    ``exp(-r T) Pi_T / V_0``.
    """
    M, K, d = paths.M, paths.N, paths.d
    S = paths.prices
    dt, r = spec.dt, params.r
    growth = exp(r * dt)
    dividends = np.asarray(params.dividends) * dt
    f = payoff_f(spec, S)
    v0 = surface.values[:, 0]
    if (v0 <= 0).any():
        raise ValueError('hedging needs a positive initial option value')

    exercise = surface.exercise.copy()
    exercise[:, K] = True
    stop = exercise.argmax(axis=1)

    holdings = np.zeros((M, K + 1, d))
    cash = np.zeros((M, K + 1))
    pre_value = np.zeros((M, K + 1))
    paid = np.zeros((M, K + 1))
    pre_value[:, 0] = v0
    for n in range(K + 1):
        if n:
            h = holdings[:, n - 1]
            pre_value[:, n] = (
                (h * S[:, n]).sum(axis=1)
                + cash[:, n - 1] * growth
                + (h * S[:, n - 1] * dividends).sum(axis=1)
            )
        settle = stop == n
        alive = stop > n
        paid[settle, n] = f[settle, n]
        holdings[alive, n] = surface.deltas[alive, n]
        cash[:, n] = (
            pre_value[:, n]
            - paid[:, n]
            - (holdings[:, n] * S[:, n]).sum(axis=1)
        )
    final = cash[:, K] + (holdings[:, K] * S[:, K]).sum(axis=1)
    relative = exp(-r * spec.maturity) * final / v0
    return HedgeLedger(holdings, cash, pre_value, paid, stop, relative)


def self_financing_residuals(
    ledger: HedgeLedger,
    paths: PathSet,
    spec: OptionSpec,
    params: MarketParams,
) -> np.ndarray:
    """Per-step gap between the portfolio change and its sources (M, K).

    Zero up to rounding: stock P&L, dividends and cash interest explain every
    change of value and rebalancing moves no money in or out.
    """
    S = paths.prices
    dt = spec.dt
    h, cash = ledger.holdings, ledger.cash
    post = (h * S).sum(axis=2) + cash
    stock_pnl = (h[:, :-1] * (S[:, 1:] - S[:, :-1])).sum(axis=2)
    dividend = (
        h[:, :-1] * S[:, :-1] * np.asarray(params.dividends) * dt
    ).sum(axis=2)
    interest = cash[:, :-1] * (exp(params.r * dt) - 1.0)
    change = ledger.pre_value[:, 1:] - post[:, :-1]
    rebalance = post[:, 1:] - ledger.post_value[:, 1:]
    return change - stock_pnl - dividend - interest + rebalance


# Providers


def rnn_surface(
    paths: PathSet,
    spec: OptionSpec,
    params: MarketParams,
    price_net: NetworkState,
    delta_net: NetworkState,
    calibration: PathSet,
    degree: int = 4,
) -> HedgeSurface:
    """Network values and deltas as functions of the current prices only.

    The networks run backward from maturity, so their output on a path has
    seen that path's future. They are evaluated on the independent
    ``calibration`` set instead, and at every step their continuation value
    and delta are regressed on the basis of the current prices. Every hedge
    path starts from the common price and delta of the calibration set.
    """
    if calibration.N != paths.N or calibration.d != paths.d:
        raise ValueError(
            f'calibration paths are {calibration.N} steps on '
            f'{calibration.d} assets, hedge paths {paths.N} on {paths.d}'
        )
    report, spacetime = evaluate(
        calibration, spec, params, price_net, delta_net
    )
    S = paths.prices
    M, K = paths.M, paths.N
    f = payoff_f(spec, S)
    df = payoff_grad(spec, S)
    values = f.copy()
    deltas = df.copy()
    exercise = np.zeros((M, K + 1), bool)
    exercise[:, K] = f[:, K] > 0
    y0 = float(spacetime.y[:, 0].mean())
    exercise[:, 0] = (f[:, 0] > 0) & (f[:, 0] >= y0)
    values[:, 0] = report.price0
    deltas[:, 0] = np.where(exercise[:, :1], df[:, 0], report.delta0)
    for n in range(1, K):
        fitted = ls_basis(spec, calibration.prices[:, n], degree)
        targets = np.column_stack((spacetime.y[:, n], spacetime.dy[:, n]))
        beta = _regress(fitted, targets)
        estimate = ls_basis(spec, S[:, n], degree) @ beta
        cont = estimate[:, 0]
        ex = (f[:, n] > 0) & (f[:, n] >= cont)
        exercise[:, n] = ex
        values[:, n] = np.maximum(cont, f[:, n])
        deltas[:, n] = np.where(ex[:, None], df[:, n], estimate[:, 1:])
    return HedgeSurface(values, deltas, exercise)


def fd_surface(
    paths: PathSet,
    spec: OptionSpec,
    params: MarketParams,
    grid: FdGrid | None = None,
) -> HedgeSurface:
    """Finite difference values of the geometric reduction on every state."""
    equivalent_1d_params(params)
    solution = fd_american_1d(
        reduced_market(params), spec, grid, store_every=1
    )
    S = paths.prices
    M, K, d = paths.M, paths.N, paths.d
    s_reduced = geometric_mean(S)
    f = payoff_f(spec, S)
    values = np.empty((M, K + 1))
    deltas = np.empty((M, K + 1, d))
    for n in range(K + 1):
        t = n * spec.dt
        values[:, n] = solution.price(s_reduced[:, n], t)
        reduced_delta = solution.delta(s_reduced[:, n], t)
        deltas[:, n] = (reduced_delta * s_reduced[:, n])[:, None] / (
            d * S[:, n]
        )
    exercise = (f > 0) & (f >= values - 1e-6 * spec.strike)
    return HedgeSurface(values, deltas, exercise)


def ls_surface(
    paths: PathSet,
    spec: OptionSpec,
    params: MarketParams,
    degree: int = 4,
) -> HedgeSurface:
    """Longstaff-Schwartz regressions fitted on the hedge paths themselves."""
    ls = longstaff_schwartz(paths, spec, params, degree)
    S = paths.prices
    M, K, d = paths.M, paths.N, paths.d
    f = payoff_f(spec, S)
    df = payoff_grad(spec, S)
    values = f.copy()
    deltas = df.copy()
    values[:, 0] = ls.price0
    deltas[:, 0] = ls.delta0
    for n in range(1, K):
        if ls.continuation_coefficients[n] is None:
            continue
        cont = ls.continuation(spec, n, S[:, n])
        cont_grad = ls.continuation_grad(spec, n, S[:, n])
        ex = ls.exercise[:, n]
        values[:, n] = np.where(ex, f[:, n], np.maximum(cont, f[:, n]))
        deltas[:, n] = np.where(ex[:, None], df[:, n], cont_grad)
    return HedgeSurface(values, deltas, ls.exercise)


def bs_surface(
    paths: PathSet, spec: OptionSpec, params: MarketParams
) -> HedgeSurface:
    """Closed form European values on one asset; never exercises early."""
    if paths.d != 1:
        raise ValueError('closed form hedging needs a one asset market')
    S = paths.prices[:, :, 0]
    K = paths.N
    sigma = float(params.sigma[0])
    q = float(np.asarray(params.dividends)[0])
    tau = spec.maturity - spec.dt * np.arange(K + 1)
    closed_form = bs_european_call if spec.payoff.is_call else bs_european_put
    values = np.empty_like(S)
    deltas = np.empty_like(S)
    for n in range(K + 1):
        values[:, n], deltas[:, n] = closed_form(
            S[:, n], spec.strike, params.r, q, sigma, tau[n]
        )
    exercise = np.zeros(S.shape, dtype=bool)
    return HedgeSurface(values, deltas[:, :, None], exercise)


@dataclass(frozen=True, eq=False)
class HedgeResult:
    relative_pnl: np.ndarray
    intervals: int
    provider: Provider
    ledger: HedgeLedger

    @property
    def mean(self) -> float:
        return float(self.relative_pnl.mean())

    @property
    def std(self) -> float:
        if len(self.relative_pnl) < 2:
            return 0.0
        return float(self.relative_pnl.std(ddof=1))

    def histogram(self, bins: int = 50) -> tuple[np.ndarray, np.ndarray]:
        counts, edges = np.histogram(self.relative_pnl, bins)
        return edges, counts

    def to_dict(self) -> dict:
        return {
            'mean': self.mean,
            'std': self.std,
            'intervals': self.intervals,
            'provider': self.provider.value,
            'paths': len(self.relative_pnl),
        }

    def write(self, directory: str | Path, bins: int = 50) -> None:
        """Histogram CSV, per-path CSV and summary JSON."""
        directory = Path(directory)
        edges, counts = self.histogram(bins)
        write_csv(
            directory / 'hedge_histogram.csv',
            ['bin_left', 'bin_right', 'count'],
            np.column_stack((edges[:-1], edges[1:], counts)),
        )
        write_csv(
            directory / 'hedge_pnl.csv',
            ['m', 'relative_pnl'],
            np.column_stack(
                (np.arange(len(self.relative_pnl)), self.relative_pnl)
            ),
        )
        write_json(directory / 'hedge_summary.json', self.to_dict())


def hedge(
    config: HedgeConfig,
    spec: OptionSpec,
    params: MarketParams,
    *,
    price_net: NetworkState | None = None,
    delta_net: NetworkState | None = None,
    grid: FdGrid | None = None,
    degree: int = 4,
) -> HedgeResult:
    """Hedge a short option on ``config.paths`` with the chosen provider."""
    paths = config.paths
    hedge_spec = spec.with_steps(config.intervals)
    provider = config.provider
    if provider is Provider.RNN_NETS:
        if price_net is None or delta_net is None:
            raise ValueError('the rnn provider needs both networks')
        calibration = config.calibration
        if calibration is None:
            seed = 1 if paths.seed is None else paths.seed + 1
            calibration = simulate_paths(params, hedge_spec, paths.M, seed)
        surface = rnn_surface(
            paths,
            hedge_spec,
            params,
            price_net,
            delta_net,
            calibration,
            degree,
        )
    elif provider is Provider.FINITE_DIFFERENCE:
        surface = fd_surface(paths, hedge_spec, params, grid)
    elif provider is Provider.LONGSTAFF_SCHWARTZ:
        surface = ls_surface(paths, hedge_spec, params, degree)
    else:
        surface = bs_surface(paths, hedge_spec, params)
    ledger = replicate(paths, hedge_spec, params, surface)
    result = HedgeResult(
        ledger.relative_pnl, config.intervals, provider, ledger
    )
    logger.info(
        '%s hedge over %d intervals: mean %.3g, std %.3g',
        provider.value,
        config.intervals,
        result.mean,
        result.std,
    )
    return result
