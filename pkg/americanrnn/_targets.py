"""Stopping indices, continuation targets and the training loss."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from ._autodiff import ShapeMismatch, Tensor, scale, sum_all
from ._market import (
    MarketParams,
    OptionSpec,
    PathSet,
    payoff_f,
    smoothed_payoff,
    smoothed_payoff_grad,
)
from ._report import write_csv


class DegeneratePath(ZeroDivisionError):
    pass


class StoppingMode(Enum):
    CROSS_SECTIONAL_ARGMAX = 'cross_sectional_argmax'
    PER_PATH_BOUNDARY = 'per_path_boundary'


@dataclass(frozen=True, eq=False)
class TargetSet:
    """Continuation targets for every path and timestep.

    ``n_tilde`` has shape (N+1,) in cross-sectional mode and (M, N+1) in
    per-path mode; its last column is always N.
    """

    c: np.ndarray
    dc: np.ndarray
    n_tilde: np.ndarray
    mode: StoppingMode

    def to_csv(self, path: str | Path) -> None:
        M, n1, d = self.dc.shape
        m, n = np.meshgrid(np.arange(M), np.arange(n1), indexing='ij')
        rows = np.column_stack(
            (m.ravel(), n.ravel(), self.c.ravel(), self.dc.reshape(-1, d))
        )
        header = ['m', 'n', 'c'] + [f'dc_{i + 1}' for i in range(d)]
        write_csv(path, header, rows)


def sigma_tilde(params: MarketParams) -> np.ndarray:
    """``diag(sigma) L``: row i is the diffusion loading of asset i."""
    return params.sigma[:, None] * params.chol


def stopping_indices(
    paths: PathSet,
    spec: OptionSpec,
    mode: StoppingMode = StoppingMode.CROSS_SECTIONAL_ARGMAX,
    exercise: np.ndarray | None = None,
) -> np.ndarray:
    """Stopping index for every timestep (and every path in per-path mode)."""
    N = paths.N
    if mode is StoppingMode.CROSS_SECTIONAL_ARGMAX:
        means = payoff_f(spec, paths.prices).mean(axis=0)
        result = np.full(N + 1, N)
        for n in range(N - 1):
            candidates = means[n + 1 : N]
            # the latest index among equal means
            last = len(candidates) - 1 - np.argmax(candidates[::-1])
            result[n] = n + 1 + last
        return result
    if exercise is None:
        raise ValueError('per-path stopping needs exercise labels')
    if exercise.shape != (paths.M, N + 1):
        raise ShapeMismatch(
            f'exercise labels are {exercise.shape}, '
            f'expected {(paths.M, N + 1)}'
        )
    result = np.full((paths.M, N + 1), N)
    next_exercise = np.full(paths.M, N)
    for n in range(N - 1, -1, -1):
        result[:, n] = next_exercise
        next_exercise = np.where(exercise[:, n], n, next_exercise)
    return result


def stopping_index(
    paths: PathSet,
    spec: OptionSpec,
    n: int,
    mode: StoppingMode = StoppingMode.CROSS_SECTIONAL_ARGMAX,
    exercise: np.ndarray | None = None,
):
    if not 0 <= n < paths.N:
        raise ValueError(f'n must lie in [0, {paths.N}), got {n}')
    return stopping_indices(paths, spec, mode, exercise)[..., n]


def continuation_targets(
    paths: PathSet,
    spec: OptionSpec,
    params: MarketParams,
    n: int,
    n_tilde,
) -> tuple[np.ndarray, np.ndarray]:
    """Pathwise continuation price (M x 1) and delta (M x d) at step ``n``.

    ``n_tilde`` is a single index or one index per path.
    """
    M, N = paths.M, paths.N
    n_tilde = np.broadcast_to(np.asarray(n_tilde, dtype=np.int64), (M,))
    if (n_tilde > N).any() or (n_tilde < n).any() or (
        n < N and (n_tilde == n).any()
    ):
        raise ValueError(f'stopping index must lie in ({n}, {N}]')
    s_n = paths.prices[:, n]
    if (s_n == 0).any():
        raise DegeneratePath(f'a path has a zero price at step {n}')
    s_stop = paths.prices[np.arange(M), n_tilde]
    discount = np.exp(-params.r * (n_tilde - n) * spec.dt)
    c = discount * smoothed_payoff(spec, s_stop)
    dc = discount[:, None] * smoothed_payoff_grad(spec, s_stop) * (
        s_stop / s_n
    )
    return c[:, None], dc


def build_targets(
    paths: PathSet,
    spec: OptionSpec,
    params: MarketParams,
    mode: StoppingMode = StoppingMode.CROSS_SECTIONAL_ARGMAX,
    exercise: np.ndarray | None = None,
    force_maturity: bool = False,
) -> TargetSet:
    """Targets for all timesteps.

    With ``force_maturity`` every stopping index is N, which turns the price
    targets into discounted European payoffs.
    """
    M, N, d = paths.M, paths.N, paths.d
    if force_maturity:
        n_tilde = np.full(N + 1, N)
    else:
        n_tilde = stopping_indices(paths, spec, mode, exercise)
    c = np.empty((M, N + 1))
    dc = np.empty((M, N + 1, d))
    for n in range(N + 1):
        c_n, dc_n = continuation_targets(
            paths, spec, params, n, n_tilde[..., n]
        )
        c[:, n] = c_n[:, 0]
        dc[:, n] = dc_n
    return TargetSet(c, dc, n_tilde, mode)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def loss_terms(
    y, dy, c, dc, sigma_tilde, dt: float
) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(loss, price term, delta term)`` as 1 x 1 tensors.

    loss = mean |c - y|^2 + dt mean |(dc - dy) sigma_tilde|^2
    """
    y, dy, c, dc = map(_as_tensor, (y, dy, c, dc))
    if y.shape != c.shape or y.cols != 1:
        raise ShapeMismatch(f'prices {y.shape} vs targets {c.shape}')
    if dy.shape != dc.shape or dy.rows != y.rows:
        raise ShapeMismatch(f'deltas {dy.shape} vs targets {dc.shape}')
    st = np.asarray(sigma_tilde, dtype=np.float64)
    if st.ndim < 2:
        st = np.diag(np.broadcast_to(st, (dy.cols,)))
    if st.shape != (dy.cols, dy.cols):
        raise ShapeMismatch(f'sigma_tilde is {st.shape}')
    M = y.rows
    res = c - y
    price_term = scale(sum_all(res * res), 1.0 / M)
    dres = (dc - dy) @ Tensor(st)
    delta_term = scale(sum_all(dres * dres), dt / M)
    return price_term + delta_term, price_term, delta_term


def loss(y, dy, c, dc, sigma_tilde, dt: float) -> Tensor:
    return loss_terms(y, dy, c, dc, sigma_tilde, dt)[0]
