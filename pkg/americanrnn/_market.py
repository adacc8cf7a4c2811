"""Market and option definitions, correlated path simulation and payoffs."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from math import ceil, sqrt
from pathlib import Path
from warnings import warn

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.special import expit

# Reports name the generator so runs can be reproduced on other platforms.
RNG_ALGORITHM = 'philox4x64-block'
# Every block of paths draws from its own substream; the block size is part
# of the reproducibility contract and must not depend on the thread count.
PATH_BLOCK = 4096

PATHSET_MAGIC = b'PATHSET1'
PATHSET_HEADER = np.dtype(
    [('magic', 'S8'), ('M', '<u8'), ('N', '<u8'), ('d', '<u8')]
)


class NotPositiveDefinite(ValueError):
    pass


class HeterogeneousParams(ValueError):
    pass


class NegativePriceWarning(RuntimeWarning):
    pass


class PayoffKind(Enum):
    GEOMETRIC_AVERAGE_CALL = 'geometric_average_call'
    MAX_CALL = 'max_call'
    # Only used by the one dimensional put oracles.
    GEOMETRIC_AVERAGE_PUT = 'geometric_average_put'

    @property
    def is_call(self) -> bool:
        return self is not PayoffKind.GEOMETRIC_AVERAGE_PUT

    @property
    def is_geometric(self) -> bool:
        return self is not PayoffKind.MAX_CALL


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _vector(value, name: str, size: int | None = None) -> np.ndarray:
    v = np.array(value, dtype=np.float64, ndmin=1)
    if v.ndim != 1:
        raise ValueError(f'{name} must be a vector, got shape {v.shape}')
    if size is not None:
        if len(v) == 1 and size != 1:
            v = np.full(size, v[0])
        elif len(v) != size:
            raise ValueError(f'{name} must have length {size}, got {len(v)}')
    if not np.isfinite(v).all():
        raise ValueError(f'{name} must be finite')
    return v


def cholesky(rho) -> np.ndarray:
    """Return the lower triangular L with ``L @ L.T == rho``.

    :raises NotPositiveDefinite: if an entry lies outside [-1, 1] or a pivot
        of the factorization is not positive.
    """
    rho = np.array(rho, dtype=np.float64, ndmin=2)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(
            f'correlation matrix must be square, got shape {rho.shape}'
        )
    if not np.isfinite(rho).all():
        raise ValueError('correlation matrix must be finite')
    if (np.diag(rho) != 1.0).any():
        raise ValueError('correlation matrix must have a unit diagonal')
    if np.abs(rho - rho.T).max() > 1e-12:
        raise ValueError('correlation matrix must be symmetric')
    if np.abs(rho).max() > 1.0:
        raise NotPositiveDefinite(
            'correlation entries must lie in [-1, 1]'
        )
    try:
        return np.linalg.cholesky(0.5 * (rho + rho.T))
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(
            'correlation matrix is not positive definite'
        ) from None


@dataclass(frozen=True, eq=False)
class MarketParams:
    """Geometric Brownian motion market of ``d`` correlated assets.

    ``dividends`` defaults to zero for every asset. All vectors are stored as
    read-only float64 arrays and ``chol`` is the Cholesky factor of ``rho``.
    """

    s0: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    r: float = 0.0
    dividends: np.ndarray | None = None
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s0 = _vector(self.s0, 's0')
        d = len(s0)
        if (s0 <= 0).any():
            raise ValueError('s0 must be positive')
        sigma = _vector(self.sigma, 'sigma', d)
        if (sigma < 0).any():
            raise ValueError('sigma must be non-negative')
        dividends = _vector(
            0.0 if self.dividends is None else self.dividends,
            'dividends',
            d,
        )
        rho = np.array(self.rho, dtype=np.float64, ndmin=2)
        if rho.shape != (d, d):
            raise ValueError(f'rho must have shape {(d, d)}, got {rho.shape}')
        r = float(self.r)
        if not np.isfinite(r):
            raise ValueError('r must be finite')
        setattr_ = object.__setattr__
        setattr_(self, 's0', _frozen(s0))
        setattr_(self, 'sigma', _frozen(sigma))
        setattr_(self, 'dividends', _frozen(dividends))
        setattr_(self, 'rho', _frozen(rho))
        setattr_(self, 'r', r)
        setattr_(self, 'chol', _frozen(cholesky(rho)))

    @classmethod
    def homogeneous(
        cls,
        d: int,
        sigma: float,
        rho: float,
        s0: float,
        r: float = 0.0,
        dividend: float = 0.0,
    ) -> MarketParams:
        """Identical assets with a constant pairwise correlation."""
        corr = np.full((d, d), float(rho))
        np.fill_diagonal(corr, 1.0)
        return cls(
            s0=np.full(d, float(s0)),
            sigma=np.full(d, float(sigma)),
            rho=corr,
            r=r,
            dividends=np.full(d, float(dividend)),
        )

    @property
    def d(self) -> int:
        return len(self.s0)

    @property
    def drift(self) -> np.ndarray:
        return self.r - self.dividends  # type: ignore

    def to_dict(self) -> dict:
        return {
            'd': self.d,
            'r': self.r,
            'dividends': self.dividends.tolist(),  # type: ignore
            'sigma': self.sigma.tolist(),
            'rho': self.rho.tolist(),
            's0': self.s0.tolist(),
        }


@dataclass(frozen=True)
class OptionSpec:
    """American option contract and its time grid.

    ``kappa`` is the payoff smoothing parameter; it defaults to ``2 / dt``.
    """

    payoff: PayoffKind
    strike: float
    maturity: float
    steps: int
    kappa: float | None = None

    def __post_init__(self):
        setattr_ = object.__setattr__
        setattr_(self, 'payoff', PayoffKind(self.payoff))
        if not self.strike > 0:
            raise ValueError('strike must be positive')
        if not self.maturity > 0:
            raise ValueError('maturity must be positive')
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError('steps must be a positive integer')
        setattr_(self, 'steps', int(self.steps))
        if self.kappa is None:
            setattr_(self, 'kappa', 2.0 / self.dt)
        elif not self.kappa > 0:  # type: ignore
            raise ValueError('kappa must be positive')

    @property
    def dt(self) -> float:
        return self.maturity / self.steps

    def with_steps(self, steps: int) -> OptionSpec:
        """Return the same contract on another time grid.

        An explicitly chosen kappa is kept; the default follows the new dt.
        """
        kappa = self.kappa if self.kappa != 2.0 / self.dt else None
        return OptionSpec(
            self.payoff, self.strike, self.maturity, steps, kappa
        )

    def to_dict(self) -> dict:
        return {
            'payoff': self.payoff.value,
            'strike': self.strike,
            'maturity': self.maturity,
            'steps': self.steps,
            'kappa': self.kappa,
        }


@dataclass(frozen=True, eq=False)
class PathSet:
    """Simulated prices (M, N+1, d) and the increments (M, N, d) behind them.

    Both arrays are read-only so a PathSet can be shared between threads.
    """

    prices: np.ndarray
    increments: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        prices = self.prices
        increments = self.increments
        if prices.ndim != 3 or increments.ndim != 3:
            raise ValueError('prices and increments must be 3-D arrays')
        M, n1, d = prices.shape
        if increments.shape != (M, n1 - 1, d):
            raise ValueError(
                f'increments must have shape {(M, n1 - 1, d)}, '
                f'got {increments.shape}'
            )
        if not np.isfinite(prices).all():
            raise FloatingPointError('simulated prices are not finite')
        prices.setflags(write=False)
        increments.setflags(write=False)

    @property
    def M(self) -> int:
        return self.prices.shape[0]

    @property
    def N(self) -> int:
        return self.prices.shape[1] - 1

    @property
    def d(self) -> int:
        return self.prices.shape[2]

    def save(self, path: str | Path) -> None:
        """Write the flat little-endian binary form documented in README."""
        header = np.array(
            [(PATHSET_MAGIC, self.M, self.N, self.d)], dtype=PATHSET_HEADER
        )
        seed = -1 if self.seed is None else self.seed
        with open(path, 'wb') as f:
            f.write(header.tobytes())
            f.write(self.prices.astype('<f8').tobytes())
            f.write(self.increments.astype('<f8').tobytes())
            f.write(np.array(seed, dtype='<i8').tobytes())

    @classmethod
    def load(cls, path: str | Path) -> PathSet:
        data = Path(path).read_bytes()
        header = np.frombuffer(data, PATHSET_HEADER, 1)[0]
        if header['magic'] != PATHSET_MAGIC:
            raise ValueError(f'{path} is not a PATHSET1 file')
        M, N, d = int(header['M']), int(header['N']), int(header['d'])
        offset = PATHSET_HEADER.itemsize
        n_prices = M * (N + 1) * d
        n_increments = M * N * d
        expected = offset + 8 * (n_prices + n_increments + 1)
        if len(data) != expected:
            raise ValueError(
                f'{path} has {len(data)} bytes, expected {expected}'
            )
        prices = np.frombuffer(data, '<f8', n_prices, offset)
        offset += 8 * n_prices
        increments = np.frombuffer(data, '<f8', n_increments, offset)
        offset += 8 * n_increments
        seed = int(np.frombuffer(data, '<i8', 1, offset)[0])
        return cls(
            prices.reshape(M, N + 1, d).astype(np.float64),
            increments.reshape(M, N, d).astype(np.float64),
            None if seed < 0 else seed,
        )


def simulate_paths(
    params: MarketParams,
    spec: OptionSpec,
    M: int,
    seed: int,
    threads: int = 1,
) -> PathSet:
    """Simulate ``M`` paths with the explicit Euler recursion.

    S[n+1] = (1 + (r - delta) dt) S[n] + sigma S[n] dW[n] with
    dW = L phi sqrt(dt). Paths are not clamped at zero; a
    NegativePriceWarning reports how many prices crossed it.
    """
    if M < 1:
        raise ValueError('M must be at least 1')
    if seed < 0:
        raise ValueError('seed must be non-negative')
    N, d, dt = spec.steps, params.d, spec.dt
    growth = 1.0 + params.drift * dt
    sigma = params.sigma
    chol_t = params.chol.T
    sqrt_dt = sqrt(dt)
    prices = np.empty((M, N + 1, d))
    prices[:, 0] = params.s0
    increments = np.empty((M, N, d))

    def fill(block: int) -> None:
        start = block * PATH_BLOCK
        stop = min(start + PATH_BLOCK, M)
        rng = Generator(Philox(SeedSequence(seed, spawn_key=(block,))))
        dw = rng.standard_normal((stop - start, N, d)) @ chol_t * sqrt_dt
        increments[start:stop] = dw
        s = prices[start:stop]
        for n in range(N):
            s_n = s[:, n]
            s[:, n + 1] = growth * s_n + sigma * s_n * dw[:, n]

    blocks = range(ceil(M / PATH_BLOCK))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(fill, blocks))
    else:
        for block in blocks:
            fill(block)

    negative = int((prices < 0).sum())
    if negative:
        warn(
            f'{negative} simulated prices are negative; '
            'consider a smaller time step',
            NegativePriceWarning,
            2,
        )
    return PathSet(prices, increments, seed)


def geometric_mean(s: np.ndarray) -> np.ndarray:
    """Geometric mean over the last axis; 0 once any price is not positive.

    Euler steps can leave a price at or below zero, where the basket's
    geometric mean has reached its lower limit.
    """
    if s.shape[-1] == 1:
        return s[..., 0].copy()
    positive = (s > 0).all(axis=-1)
    logs = np.log(np.where(s > 0, s, 1.0)).mean(axis=-1)
    return np.where(positive, np.exp(logs), 0.0)


def payoff_g(spec: OptionSpec, s) -> np.ndarray:
    """The payoff before clamping at zero, evaluated over the last axis."""
    s = np.asarray(s, dtype=np.float64)
    kind = spec.payoff
    if kind is PayoffKind.MAX_CALL:
        return s.max(axis=-1) - spec.strike
    if kind is PayoffKind.GEOMETRIC_AVERAGE_CALL:
        return geometric_mean(s) - spec.strike
    return spec.strike - geometric_mean(s)


def payoff_g_grad(spec: OptionSpec, s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    kind = spec.payoff
    if kind is PayoffKind.MAX_CALL:
        # np.argmax picks the lowest index among exact ties.
        return (
            np.arange(s.shape[-1]) == s.argmax(axis=-1)[..., None]
        ).astype(np.float64)
    mean = geometric_mean(s)[..., None]
    with np.errstate(divide='ignore', invalid='ignore'):
        grad = np.where(mean > 0, mean / (s.shape[-1] * s), 0.0)
    if kind is PayoffKind.GEOMETRIC_AVERAGE_PUT:
        return -grad
    return grad


def payoff_f(spec: OptionSpec, s) -> np.ndarray:
    return np.maximum(payoff_g(spec, s), 0.0)


def payoff_grad(spec: OptionSpec, s) -> np.ndarray:
    """Gradient of the clamped payoff, zero out of the money."""
    s = np.asarray(s, dtype=np.float64)
    return (payoff_g(spec, s) > 0)[..., None] * payoff_g_grad(spec, s)


def smoothed_payoff(spec: OptionSpec, s) -> np.ndarray:
    """``log(1 + exp(kappa g)) / kappa`` in overflow-free form."""
    kappa = spec.kappa
    return np.logaddexp(0.0, kappa * payoff_g(spec, s)) / kappa  # type: ignore


def smoothed_payoff_grad(spec: OptionSpec, s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    weight = expit(spec.kappa * payoff_g(spec, s))  # type: ignore
    return weight[..., None] * payoff_g_grad(spec, s)


def _constant_correlation(params: MarketParams) -> float:
    d = params.d
    if d == 1:
        return 1.0
    off = params.rho[~np.eye(d, dtype=bool)]
    if np.ptp(off) > 1e-12:
        raise HeterogeneousParams('correlations differ between asset pairs')
    return float(off[0])


def equivalent_1d_params(params: MarketParams) -> tuple[float, float]:
    """Volatility and drift of ``s' = (prod s_i) ** (1/d)``.

    Requires identical volatilities, dividends and pairwise correlations.
    """
    dividends = np.asarray(params.dividends)
    if np.ptp(params.sigma) > 0 or np.ptp(dividends) > 0:
        raise HeterogeneousParams(
            'the geometric reduction needs identical sigma and dividends'
        )
    rho = _constant_correlation(params)
    d = params.d
    sigma = float(params.sigma[0])
    sigma_eff = sigma * sqrt((1 + (d - 1) * rho) / d)
    mu_eff = (
        params.r
        - float(dividends[0])
        + 0.5 * (sigma_eff**2 - sigma**2)
    )
    return sigma_eff, mu_eff


def reduced_market(params: MarketParams) -> MarketParams:
    """The one asset market followed by the geometric average."""
    sigma_eff, mu_eff = equivalent_1d_params(params)
    return MarketParams(
        s0=[float(geometric_mean(params.s0))],
        sigma=[sigma_eff],
        rho=[[1.0]],
        r=params.r,
        dividends=[params.r - mu_eff],
    )
