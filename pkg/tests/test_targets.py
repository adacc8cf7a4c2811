from math import exp, sqrt

import numpy as np
from pytest import approx, mark, raises

from americanrnn import (
    DegeneratePath,
    MarketParams,
    OptionSpec,
    PathSet,
    PayoffKind,
    ShapeMismatch,
    StoppingMode,
    Tensor,
    binomial_american,
    build_targets,
    continuation_targets,
    european_reference,
    fd_exercise_labels,
    loss,
    simulate_paths,
    stopping_index,
)
from americanrnn._market import smoothed_payoff, smoothed_payoff_grad
from americanrnn._report import read_csv
from americanrnn._targets import loss_terms, sigma_tilde, stopping_indices

GEO = PayoffKind.GEOMETRIC_AVERAGE_CALL
PUT = PayoffKind.GEOMETRIC_AVERAGE_PUT


def flat_paths(r=0.05, s0=110.0, N=5, M=3, d=1):
    params = MarketParams.homogeneous(d, 0.0, 0.0, s0, r)
    spec = OptionSpec(GEO, 100, 1.0, N)
    return params, spec, simulate_paths(params, spec, M, seed=0)


def test_rising_means_stop_at_the_last_candidate():
    _, spec, paths = flat_paths()
    n_tilde = stopping_indices(paths, spec)
    assert n_tilde.tolist() == [4, 4, 4, 4, 5, 5]
    assert stopping_index(paths, spec, 0) == 4


def test_ties_go_to_the_latest_index():
    _, spec, paths = flat_paths(r=0.0)
    assert stopping_indices(paths, spec).tolist() == [4, 4, 4, 4, 5, 5]


def test_falling_means_stop_early():
    params = MarketParams.homogeneous(1, 0.0, 0.0, 110.0, 0.0, 0.05)
    spec = OptionSpec(GEO, 100, 1.0, 5)
    paths = simulate_paths(params, spec, 2, seed=0)
    assert stopping_indices(paths, spec).tolist() == [1, 2, 3, 4, 5, 5]


def test_stopping_index_range():
    _, spec, paths = flat_paths()
    with raises(ValueError):
        stopping_index(paths, spec, paths.N)


def test_per_path_boundary():
    _, spec, paths = flat_paths(N=4, M=2)
    exercise = np.zeros((2, 5), dtype=bool)
    exercise[0, 2] = True
    n_tilde = stopping_indices(
        paths, spec, StoppingMode.PER_PATH_BOUNDARY, exercise
    )
    assert n_tilde.tolist() == [[2, 2, 4, 4, 4], [4, 4, 4, 4, 4]]
    with raises(ValueError):
        stopping_indices(paths, spec, StoppingMode.PER_PATH_BOUNDARY)
    with raises(ShapeMismatch):
        stopping_indices(
            paths, spec, StoppingMode.PER_PATH_BOUNDARY, exercise[:, :3]
        )


def test_zero_rate_constant_payoff():
    params, spec, paths = flat_paths(r=0.0, s0=105.0)
    c, dc = continuation_targets(paths, spec, params, 0, paths.N)
    assert c[:, 0] == approx(smoothed_payoff(spec, [[105.0]])[0])
    assert c == approx(5, abs=1e-3)
    assert dc == approx(1, abs=1e-3)


def test_pathwise_ratio_without_volatility():
    r, N = 0.05, 5
    params, spec, paths = flat_paths(r=r, N=N)
    dt = spec.dt
    for n in range(N):
        for k in range(n + 1, N + 1):
            ratio = paths.prices[:, k] / paths.prices[:, n]
            assert ratio == approx(np.full((3, 1), (1 + r * dt) ** (k - n)))
            c, dc = continuation_targets(paths, spec, params, n, k)
            grad = smoothed_payoff_grad(spec, paths.prices[:, k])
            expected = exp(-r * dt * (k - n)) * grad * (1 + r * dt) ** (k - n)
            assert dc == approx(expected)


def test_discounting_shrinks_with_distance():
    params, spec, paths = flat_paths(r=0.05, s0=120.0, N=6)
    s_stop = paths.prices[:, 6]
    values = [
        continuation_targets(paths, spec, params, n, 6)[0][:, 0]
        / smoothed_payoff(spec, s_stop)
        for n in range(6)
    ]
    factors = [v[0] for v in values]
    assert factors == approx([exp(-0.05 * (6 - n) / 6) for n in range(6)])
    assert all(a < b for a, b in zip(factors, factors[1:]))


def test_targets_reject_bad_stopping_index():
    params, spec, paths = flat_paths()
    with raises(ValueError):
        continuation_targets(paths, spec, params, 2, 2)
    with raises(ValueError):
        continuation_targets(paths, spec, params, 2, 9)


def test_degenerate_path():
    prices = np.array([[[100.0], [0.0], [50.0]]])
    paths = PathSet(prices, np.zeros((1, 2, 1)))
    params = MarketParams([100.0], [0.2], [[1.0]])
    spec = OptionSpec(GEO, 100, 1.0, 2)
    with raises(DegeneratePath):
        continuation_targets(paths, spec, params, 1, 2)


def test_terminal_targets_are_smoothed_payoffs():
    params = MarketParams.homogeneous(2, 0.25, 0.75, 100.0)
    spec = OptionSpec(GEO, 100, 2.0, 10)
    paths = simulate_paths(params, spec, 50, seed=2)
    targets = build_targets(paths, spec, params)
    S_N = paths.prices[:, -1]
    assert np.array_equal(targets.c[:, -1], smoothed_payoff(spec, S_N))
    assert np.array_equal(
        targets.dc[:, -1], smoothed_payoff_grad(spec, S_N)
    )
    assert (targets.c >= 0).all()
    assert targets.n_tilde[-1] == 10
    assert targets.mode is StoppingMode.CROSS_SECTIONAL_ARGMAX


def test_targets_csv(tmp_path):
    params = MarketParams.homogeneous(2, 0.25, 0.75, 100.0)
    spec = OptionSpec(GEO, 100, 2.0, 3)
    targets = build_targets(
        simulate_paths(params, spec, 4, seed=2), spec, params
    )
    file = tmp_path / 'targets.csv'
    targets.to_csv(file)
    header, rows = read_csv(file)
    assert header == ['m', 'n', 'c', 'dc_1', 'dc_2']
    assert rows.shape == (16, 5)
    assert rows[5, :2].tolist() == [1, 1]
    assert rows[5, 2] == targets.c[1, 1]


def test_forced_maturity_matches_closed_form():
    params = MarketParams.homogeneous(2, 0.25, 0.75, 100.0)
    spec = OptionSpec(GEO, 100, 2.0, 50)
    M = 50000
    paths = simulate_paths(params, spec, M, seed=21)
    targets = build_targets(paths, spec, params, force_maturity=True)
    c0 = targets.c[:, 0]
    error = c0.std(ddof=1) / sqrt(M)
    price, _ = european_reference(params, spec)
    assert abs(c0.mean() - price) < 3 * error


@mark.slow
def test_per_path_stopping_value_of_a_put():
    params = MarketParams.homogeneous(1, 0.2, 0.0, 40.0, 0.06)
    spec = OptionSpec(PUT, 40, 1.0, 50)
    paths = simulate_paths(params, spec, 100000, seed=8)
    exercise = fd_exercise_labels(paths, spec, params)
    n_tilde = stopping_indices(
        paths, spec, StoppingMode.PER_PATH_BOUNDARY, exercise
    )[:, 0]
    payoff = np.maximum(40 - paths.prices[np.arange(paths.M), n_tilde, 0], 0)
    value = (np.exp(-0.06 * n_tilde * spec.dt) * payoff).mean()
    reference = binomial_american(params, spec, 10000)
    assert value == approx(reference, rel=0.01)


def test_loss_example():
    total = loss([[0.0]], [[0.0]], [[2.0]], [[1.0]], [0.2], 0.01)
    assert total.data[0, 0] == approx(4.0004)


def test_loss_terms_split():
    total, price_term, delta_term = loss_terms(
        [[0.0]], [[0.0]], [[2.0]], [[1.0]], [0.2], 0.01
    )
    assert price_term.data[0, 0] == approx(4)
    assert delta_term.data[0, 0] == approx(0.0004)


def test_loss_is_a_nonnegative_quadratic():
    rng = np.random.default_rng(5)
    params = MarketParams.homogeneous(3, 0.2, 0.3, 100.0)
    st = sigma_tilde(params)
    for _ in range(1000):
        M = int(rng.integers(1, 6))
        y, c = rng.normal(size=(2, M, 1))
        dy, dc = rng.normal(size=(2, M, 3))
        value = loss(y, dy, c, dc, st, 0.02).data[0, 0]
        assert value >= 0
        lam = rng.uniform(0.1, 3)
        scaled = loss(lam * y, lam * dy, lam * c, lam * dc, st, 0.02)
        assert scaled.data[0, 0] == approx(lam**2 * value)
    assert loss(y, dy, y, dy, st, 0.02).data[0, 0] == 0


def test_loss_shapes():
    with raises(ShapeMismatch):
        loss(
            np.ones((2, 1)),
            np.ones((2, 2)),
            np.ones((3, 1)),
            np.ones((2, 2)),
            [0.2, 0.2],
            0.1,
        )
    with raises(ShapeMismatch):
        loss(
            Tensor(np.ones((2, 1))),
            np.ones((2, 2)),
            np.ones((2, 1)),
            np.ones((2, 3)),
            [0.2, 0.2],
            0.1,
        )


def test_sigma_tilde_rows():
    params = MarketParams(
        s0=[100, 100], sigma=[0.2, 0.4], rho=[[1, 0.75], [0.75, 1]]
    )
    st = sigma_tilde(params)
    assert st[0].tolist() == approx([0.2, 0])
    assert st[1].tolist() == approx([0.3, 0.4 * 0.6614378])
