"""Reference solvers: finite differences, binomial trees, closed forms and
Longstaff-Schwartz regression."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from itertools import combinations_with_replacement
from math import ceil, exp, sqrt
from pathlib import Path
from time import perf_counter
from warnings import warn

import numpy as np
from scipy.linalg import LinAlgError, LinAlgWarning, solve, solve_banded
from scipy.stats import norm

from ._market import (
    MarketParams,
    OptionSpec,
    PathSet,
    payoff_f,
    payoff_g,
    payoff_g_grad,
    payoff_grad,
    reduced_market,
)
from ._report import write_csv

logger = logging.getLogger(__name__)


class GridTooCoarse(RuntimeError):
    pass


class SingularRegression(RuntimeWarning):
    pass


class ProviderOutOfDomain(RuntimeWarning):
    pass


def _one_asset(params: MarketParams) -> tuple[float, float, float, float]:
    """``(s0, sigma, r, dividend)`` of a one asset market."""
    if params.d != 1:
        raise ValueError(
            f'expected a one asset market, got d={params.d}; '
            'reduce geometric baskets with reduced_market first'
        )
    return (
        float(params.s0[0]),
        float(params.sigma[0]),
        params.r,
        float(params.dividends[0]),  # type: ignore
    )


# Closed forms


def bs_european_call(s0, K, r, q, sigma, T):
    """Black-Scholes call price and delta; broadcasts over ``s0``.

    ``sigma = 0`` or ``T = 0`` give the discounted intrinsic value.
    """
    s0 = np.asarray(s0, dtype=np.float64)
    disc_r, disc_q = np.exp(-r * T), np.exp(-q * T)
    vol = sigma * np.sqrt(T)
    if vol == 0:
        forward_itm = s0 * disc_q > K * disc_r
        price = np.maximum(s0 * disc_q - K * disc_r, 0.0)
        return price, forward_itm * disc_q
    with np.errstate(divide='ignore'):
        d1 = (np.log(s0 / K) + (r - q + 0.5 * sigma * sigma) * T) / vol
    d2 = d1 - vol
    price = s0 * disc_q * norm.cdf(d1) - K * disc_r * norm.cdf(d2)
    return price, disc_q * norm.cdf(d1)


def bs_european_put(s0, K, r, q, sigma, T):
    call, delta = bs_european_call(s0, K, r, q, sigma, T)
    s0 = np.asarray(s0, dtype=np.float64)
    disc_q = np.exp(-q * T)
    return call - s0 * disc_q + K * np.exp(-r * T), delta - disc_q


# Binomial tree


def binomial_american(
    params_1d: MarketParams,
    spec: OptionSpec,
    steps: int,
    american: bool = True,
) -> float:
    """Cox-Ross-Rubinstein backward induction."""
    if steps < 1:
        raise ValueError('steps must be at least 1')
    s0, sigma, r, q = _one_asset(params_1d)
    dt = spec.maturity / steps
    disc = exp(-r * dt)
    growth = exp((r - q) * dt)

    def f(s):
        return payoff_f(spec, s[:, None])

    if sigma == 0:
        s = s0 * growth ** np.arange(steps + 1)
        value = float(f(s[-1:])[0])
        for i in range(steps - 1, -1, -1):
            value *= disc
            if american:
                value = max(value, float(f(s[i : i + 1])[0]))
        return value

    u = exp(sigma * sqrt(dt))
    p = (growth - 1 / u) / (u - 1 / u)
    if not 0 <= p <= 1:
        raise ValueError(f'risk neutral probability {p} outside [0, 1]')
    j = np.arange(steps + 1)
    values = f(s0 * u ** (2 * j - steps))
    for i in range(steps - 1, -1, -1):
        values = disc * (p * values[1:] + (1 - p) * values[:-1])
        if american:
            values = np.maximum(values, f(s0 * u ** (2 * j[: i + 1] - i)))
    return float(values[0])


# Crank-Nicolson


@dataclass(frozen=True)
class FdGrid:
    """Uniform spot grid and time stepping of the one factor solver.

    ``s_max`` defaults to ``5 K exp((mu + 3 sigma) T)``. ``penalty`` times the
    strike is the coefficient enforcing ``V >= payoff``.
    """

    nodes: int = 16385
    timesteps: int = 1000
    theta: float = 0.5
    penalty: float = 1e7
    s_min: float = 0.0
    s_max: float | None = None
    rannacher: bool = True

    def __post_init__(self):
        if self.nodes < 3:
            raise ValueError('nodes must be at least 3')
        if self.timesteps < 1:
            raise ValueError('timesteps must be at least 1')
        if not 0 <= self.theta <= 1:
            raise ValueError('theta must lie in [0, 1]')


@dataclass(frozen=True, eq=False)
class FdSolution:
    """Values and deltas on the spot grid at the stored calendar times."""

    s: np.ndarray
    times: np.ndarray
    values: np.ndarray
    deltas: np.ndarray
    constraint_residual: float

    def _time_index(self, t: float) -> int:
        i = int(np.abs(self.times - t).argmin())
        if not np.isclose(self.times[i], t, rtol=0, atol=1e-9):
            raise ValueError(f'time {t} is not stored')
        return i

    def _clamped(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        lo, hi = self.s[0], self.s[-1]
        outside = (s < lo) | (s > hi)
        if outside.any():
            warn(
                f'{np.count_nonzero(outside)} queries outside '
                f'[{lo:g}, {hi:g}] were clamped to the grid',
                ProviderOutOfDomain,
                3,
            )
            s = np.clip(s, lo, hi)
        return s

    def price(self, s, t: float = 0.0) -> np.ndarray:
        i = self._time_index(t)
        return np.interp(self._clamped(s), self.s, self.values[i])

    def delta(self, s, t: float = 0.0) -> np.ndarray:
        i = self._time_index(t)
        return np.interp(self._clamped(s), self.s, self.deltas[i])

    def to_csv(self, path: str | Path) -> None:
        k, n = self.values.shape
        rows = np.column_stack(
            (
                np.repeat(self.times, n),
                np.tile(self.s, k),
                self.values.ravel(),
                self.deltas.ravel(),
            )
        )
        write_csv(path, ['t', 's', 'value', 'delta'], rows)


def _fd_solve(
    params_1d: MarketParams,
    spec: OptionSpec,
    grid: FdGrid,
    store_every: int | None,
    american: bool,
) -> FdSolution:
    s0, sigma, r, q = _one_asset(params_1d)
    K, T, N = spec.strike, spec.maturity, spec.steps
    mu = r - q
    s_max = grid.s_max or 5 * K * exp((mu + 3 * sigma) * T)
    if not grid.s_min < K < s_max:
        raise ValueError(f'grid [{grid.s_min}, {s_max}] must contain {K}')
    s = np.linspace(grid.s_min, s_max, grid.nodes)
    ds = s[1] - s[0]
    payoff = payoff_f(spec, s[:, None])
    is_call = spec.payoff.is_call

    diffusion = 0.5 * sigma * sigma * s * s / (ds * ds)
    convection = mu * s / (2 * ds)
    lower = (diffusion - convection)[1:-1]
    main = (-2 * diffusion - r)[1:-1]
    upper = (diffusion + convection)[1:-1]

    def apply(v: np.ndarray) -> np.ndarray:
        out = np.zeros_like(v)
        out[1:-1] = lower * v[:-2] + main * v[1:-1] + upper * v[2:]
        return out

    bands = {}

    def banded(theta: float, dtau: float) -> np.ndarray:
        key = theta, dtau
        if key not in bands:
            ab = np.zeros((3, grid.nodes))
            ab[0, 2:] = -theta * dtau * upper
            ab[1] = 1.0
            ab[1, 1:-1] -= theta * dtau * main
            ab[2, :-2] = -theta * dtau * lower
            bands[key] = ab
        return bands[key]

    def boundary(tau: float) -> tuple[float, float]:
        if is_call:
            far = s_max * exp(-q * tau) - K * exp(-r * tau)
            return 0.0, max(far, s_max - K) if american else max(far, 0.0)
        if american:
            return K - grid.s_min, 0.0
        return K * exp(-r * tau) - grid.s_min * exp(-q * tau), 0.0

    # strike scaled, so the constraint residual is relative to K
    penalty = grid.penalty * K

    def step(v, theta, dtau, tau_new):
        rhs = v + (1 - theta) * dtau * apply(v)
        rhs[0], rhs[-1] = boundary(tau_new)
        ab = banded(theta, dtau)
        v_new = solve_banded((1, 1), ab, rhs)
        if not american:
            return v_new
        active = np.zeros(grid.nodes, dtype=bool)
        for _ in range(100):
            new_active = v_new < payoff
            new_active[[0, -1]] = False
            if np.array_equal(new_active, active):
                break
            active = new_active
            penalized = ab.copy()
            penalized[1] += penalty * active
            v_new = solve_banded(
                (1, 1), penalized, rhs + penalty * active * payoff
            )
        return v_new

    per_step = ceil(grid.timesteps / N)
    total = per_step * N
    dtau = T / total
    keep = set(range(0, N + 1, store_every)) if store_every else set()
    keep |= {0, N}
    stored = {N: payoff.copy()}
    v = payoff.copy()
    for k in range(1, total + 1):
        tau = k * dtau
        if k == 1 and grid.rannacher:
            v = step(v, 1.0, 0.5 * dtau, 0.5 * dtau)
            v = step(v, 1.0, 0.5 * dtau, tau)
        else:
            v = step(v, grid.theta, dtau, tau)
        if k % per_step == 0 and N - k // per_step in keep:
            stored[N - k // per_step] = v.copy()
    order = sorted(stored)
    values = np.array([stored[n] for n in order])
    deltas = np.gradient(values, s, axis=1)
    return FdSolution(
        s=s,
        times=np.array(order) * spec.dt,
        values=values,
        deltas=deltas,
        constraint_residual=float(np.max(payoff - values[0])),
    )


def fd_american_1d(
    params_1d: MarketParams,
    spec: OptionSpec,
    grid: FdGrid | None = None,
    *,
    store_every: int | None = None,
    american: bool = True,
    self_check: bool = False,
) -> FdSolution:
    """Theta scheme with penalty iteration for the early exercise constraint.

    Values are stored at ``t = 0``, at maturity and, with ``store_every``,
    at every ``store_every``-th time of the option's own grid.
    """
    grid = grid or FdGrid()
    t0 = perf_counter()
    solution = _fd_solve(params_1d, spec, grid, store_every, american)
    logger.info(
        'fd solve with %d nodes and %d steps took %.0f ms',
        grid.nodes,
        grid.timesteps,
        (perf_counter() - t0) * 1e3,
    )
    if self_check:
        fine = _fd_solve(
            params_1d,
            spec,
            replace(grid, nodes=2 * grid.nodes - 1),
            None,
            american,
        )
        s0 = params_1d.s0[0]
        coarse_price = float(solution.price(s0))
        fine_price = float(fine.price(s0))
        change = abs(fine_price - coarse_price) / max(abs(fine_price), 1e-300)
        if change > 1e-3:
            raise GridTooCoarse(
                f'price moved by {100 * change:.3g}% when nodes doubled'
            )
    return solution


def fd_geometric_reference(
    params: MarketParams,
    spec: OptionSpec,
    grid: FdGrid | None = None,
) -> tuple[float, np.ndarray, FdSolution]:
    """Price and per-asset delta at ``s0`` through the geometric reduction.

    ``d s'/d s_i = s' / (d s_i)`` maps the reduced delta back to the basket.
    """
    reduced = reduced_market(params)
    solution = fd_american_1d(reduced, spec, grid)
    s_reduced = float(reduced.s0[0])
    price = float(solution.price(s_reduced))
    delta = float(solution.delta(s_reduced))
    return price, delta * s_reduced / (params.d * params.s0), solution


# Longstaff-Schwartz


def _exponents(d: int, degree: int) -> np.ndarray:
    return np.array(
        [
            np.bincount(combo, minlength=d)
            for k in range(degree + 1)
            for combo in combinations_with_replacement(range(d), k)
        ],
        dtype=np.int64,
    ).reshape(-1, d)


def ls_basis(spec: OptionSpec, s: np.ndarray, degree: int) -> np.ndarray:
    """Monomials of total degree <= ``degree`` in ``s / K``, then ``g / K``.

    One asset payoffs are affine in ``s`` so ``g`` is left out for d = 1.
    """
    K = spec.strike
    x = s / K
    E = _exponents(s.shape[1], degree)
    columns = np.prod(x[:, None, :] ** E[None], axis=2)
    if s.shape[1] == 1:
        return columns
    return np.column_stack((columns, payoff_g(spec, s) / K))


def ls_basis_grad(spec: OptionSpec, s: np.ndarray, degree: int) -> np.ndarray:
    """Derivative of every basis column with respect to every asset."""
    K = spec.strike
    x = s / K
    d = s.shape[1]
    E = _exponents(d, degree)
    grad = np.empty((len(s), len(E), d))
    for i in range(d):
        lowered = E.copy()
        lowered[:, i] = np.maximum(E[:, i] - 1, 0)
        grad[:, :, i] = (
            E[:, i] * np.prod(x[:, None, :] ** lowered[None], axis=2) / K
        )
    if d == 1:
        return grad
    return np.concatenate(
        (grad, payoff_g_grad(spec, s)[:, None, :] / K), axis=1
    )


def _regress(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Least squares through the normal equations; ridge when singular."""
    XtX = X.T @ X
    XtY = X.T @ Y
    try:
        with warnings.catch_warnings():
            warnings.simplefilter('error', LinAlgWarning)
            return solve(XtX, XtY, assume_a='pos')
    except (LinAlgError, LinAlgWarning):
        warn(
            'normal equations are singular; using ridge regression',
            SingularRegression,
            3,
        )
    ridge = 1e-8 * max(np.trace(XtX) / len(XtX), 1.0)
    return np.linalg.solve(XtX + ridge * np.eye(len(XtX)), XtY)


@dataclass(frozen=True, eq=False)
class LsResult:
    """Longstaff-Schwartz estimate with the regressions that produced it.

    ``exercise_coefficients[n]`` is the in-the-money regression behind the
    stopping rule (None where no regression was possible);
    ``continuation_coefficients[n]`` regresses over all paths and serves
    continuation values and gradients to hedging.
    """

    price0: float
    price0_std: float
    delta0: np.ndarray
    delta0_std: np.ndarray
    stop_index: np.ndarray
    exercise: np.ndarray
    degree: int
    exercise_coefficients: list[np.ndarray | None]
    continuation_coefficients: list[np.ndarray | None]

    def continuation(self, spec: OptionSpec, n: int, s) -> np.ndarray:
        beta = self.continuation_coefficients[n]
        if beta is None:
            raise ValueError(f'no continuation regression at step {n}')
        return ls_basis(spec, np.atleast_2d(s), self.degree) @ beta

    def continuation_grad(self, spec: OptionSpec, n: int, s) -> np.ndarray:
        beta = self.continuation_coefficients[n]
        if beta is None:
            raise ValueError(f'no continuation regression at step {n}')
        grad = ls_basis_grad(spec, np.atleast_2d(s), self.degree)
        return np.einsum('mkd,k->md', grad, beta)

    def to_dict(self) -> dict:
        return {
            'price0': self.price0,
            'price0_std': self.price0_std,
            'delta0': self.delta0.tolist(),
            'delta0_std': self.delta0_std.tolist(),
            'degree': self.degree,
            'exercised_fraction': float(self.exercise.mean()),
        }


def longstaff_schwartz(
    paths: PathSet,
    spec: OptionSpec,
    params: MarketParams,
    degree: int = 4,
) -> LsResult:
    """Regression based optimal stopping with pathwise deltas.

    The stopping rule regresses discounted realized cash flows on in-the-money
    paths. The delta is the mean of ``exp(-r tau) grad f(S_tau) S_tau / s0``.
    """
    t0 = perf_counter()
    M, N, d = paths.M, paths.N, paths.d
    S = paths.prices
    dt, r = spec.dt, params.r
    f = payoff_f(spec, S)
    k = ls_basis(spec, S[:1, 0], degree).shape[1]
    stop = np.full(M, N)
    exercise = np.zeros((M, N + 1), dtype=bool)
    exercise[:, N] = f[:, N] > 0
    exercise_coefficients: list[np.ndarray | None] = [None] * (N + 1)
    continuation_coefficients: list[np.ndarray | None] = [None] * (N + 1)
    for n in range(N - 1, 0, -1):
        realized = f[np.arange(M), stop] * np.exp(-r * (stop - n) * dt)
        basis = ls_basis(spec, S[:, n], degree)
        continuation_coefficients[n] = _regress(basis, realized)
        itm = np.flatnonzero(f[:, n] > 0)
        if len(itm) < k:
            continue
        beta = _regress(basis[itm], realized[itm])
        exercise_coefficients[n] = beta
        now = itm[f[itm, n] >= basis[itm] @ beta]
        stop[now] = n
        exercise[now, n] = True

    pv = f[np.arange(M), stop] * np.exp(-r * stop * dt)
    S_stop = S[np.arange(M), stop]
    pathwise = (
        np.exp(-r * stop * dt)[:, None]
        * payoff_grad(spec, S_stop)
        * S_stop
        / S[:, 0]
    )
    f0 = float(f[0, 0])
    if f0 > pv.mean():
        # immediate exercise beats the estimated continuation
        stop[:] = 0
        exercise[:, 0] = True
        price0, price0_std = f0, 0.0
        delta0 = payoff_grad(spec, S[0, 0])
        delta0_std = np.zeros(d)
    else:
        price0 = float(pv.mean())
        price0_std = float(pv.std(ddof=1) / sqrt(M)) if M > 1 else 0.0
        delta0 = pathwise.mean(axis=0)
        delta0_std = (
            pathwise.std(axis=0, ddof=1) / sqrt(M) if M > 1 else np.zeros(d)
        )
    logger.info(
        'longstaff-schwartz on %d paths: %.6g (std %.3g) in %.0f ms',
        M,
        price0,
        price0_std,
        (perf_counter() - t0) * 1e3,
    )
    return LsResult(
        price0=price0,
        price0_std=price0_std,
        delta0=delta0,
        delta0_std=delta0_std,
        stop_index=stop,
        exercise=exercise,
        degree=degree,
        exercise_coefficients=exercise_coefficients,
        continuation_coefficients=continuation_coefficients,
    )


def european_reference(
    params: MarketParams, spec: OptionSpec
) -> tuple[float, float]:
    """Closed form European price and reduced delta of a geometric option."""
    reduced = reduced_market(params)
    s0, sigma, r, q = _one_asset(reduced)
    closed_form = bs_european_call if spec.payoff.is_call else bs_european_put
    price, delta = closed_form(s0, spec.strike, r, q, sigma, spec.maturity)
    return float(price), float(delta)
