from math import exp

import numpy as np
from pytest import approx, mark, raises, warns

from americanrnn import (
    FdGrid,
    GridTooCoarse,
    MarketParams,
    OptionSpec,
    PayoffKind,
    ProviderOutOfDomain,
    SingularRegression,
    binomial_american,
    bs_european_call,
    bs_european_put,
    european_reference,
    fd_american_1d,
    fd_geometric_reference,
    longstaff_schwartz,
    simulate_paths,
)
from americanrnn._baselines import (
    _exponents,
    _regress,
    ls_basis,
    ls_basis_grad,
)
from americanrnn._report import read_csv

GEO = PayoffKind.GEOMETRIC_AVERAGE_CALL
PUT = PayoffKind.GEOMETRIC_AVERAGE_PUT


def one_asset(s0=40.0, sigma=0.2, r=0.06, dividend=0.0):
    return MarketParams.homogeneous(1, sigma, 0.0, s0, r, dividend)


def geometric_market(s0=100.0, d=2):
    return MarketParams.homogeneous(d, 0.25, 0.75, s0)


def test_black_scholes_call():
    price, delta = bs_european_call(100, 100, 0.05, 0, 0.2, 1)
    assert price == approx(10.4506, abs=1e-4)
    assert delta == approx(0.6368, abs=1e-4)


def test_put_call_parity():
    s = np.array([80.0, 100.0, 120.0])
    call, call_delta = bs_european_call(s, 100, 0.03, 0.01, 0.3, 2)
    put, put_delta = bs_european_put(s, 100, 0.03, 0.01, 0.3, 2)
    assert call - put == approx(s * exp(-0.02) - 100 * exp(-0.06))
    assert call_delta - put_delta == approx(np.full(3, exp(-0.02)))


def test_black_scholes_limits():
    price, delta = bs_european_call(1000, 100, 0.05, 0, 0.2, 1)
    assert price == approx(1000 - 100 * exp(-0.05))
    assert delta == approx(1)
    price, delta = bs_european_call(90, 100, 0.05, 0, 0.0, 1)
    assert price == 0
    assert delta == 0
    price, _ = bs_european_call(120, 100, 0.05, 0, 0.2, 0)
    assert price == 20


def test_binomial_put():
    spec = OptionSpec(PUT, 40, 1.0, 50)
    american = binomial_american(one_asset(), spec, 2000)
    european = binomial_american(one_asset(), spec, 2000, american=False)
    assert american == approx(2.314, abs=2e-3)
    closed_form, _ = bs_european_put(40, 40, 0.06, 0, 0.2, 1)
    assert european == approx(closed_form, abs=2e-3)
    assert american > european


def test_binomial_without_volatility():
    spec = OptionSpec(PUT, 40, 1.0, 10)
    market = one_asset(s0=36.0, sigma=0.0, r=0.06)
    # the put is worth most right away when the asset only grows
    assert binomial_american(market, spec, 100) == approx(4)
    assert binomial_american(market, spec, 100, american=False) == approx(
        max(40 * exp(-0.06) - 36, 0), abs=1e-9
    )


def test_binomial_rejects_baskets_and_bad_steps():
    spec = OptionSpec(GEO, 100, 1.0, 10)
    with raises(ValueError):
        binomial_american(geometric_market(), spec, 100)
    with raises(ValueError):
        binomial_american(one_asset(), spec, 0)


def test_fd_grid_validation():
    with raises(ValueError):
        FdGrid(nodes=2)
    with raises(ValueError):
        FdGrid(timesteps=0)
    with raises(ValueError):
        FdGrid(theta=1.5)
    spec = OptionSpec(PUT, 40, 1.0, 10)
    with raises(ValueError):
        fd_american_1d(one_asset(), spec, FdGrid(s_min=50.0))


def test_fd_put_matches_binomial():
    spec = OptionSpec(PUT, 40, 1.0, 50)
    solution = fd_american_1d(one_asset(), spec)
    fd_price = float(solution.price(40.0))
    reference = binomial_american(one_asset(), spec, 10000)
    assert fd_price == approx(reference, abs=1e-2)
    assert solution.constraint_residual < 1e-6
    values = solution.values[0]
    payoff = np.maximum(40 - solution.s, 0)
    assert (values >= payoff - 1e-6).all()


@mark.parametrize('scale', [0.01, 1.0, 100.0])
def test_fd_penalty_scales_with_the_strike(scale):
    spec = OptionSpec(PUT, 40 * scale, 1.0, 10)
    grid = FdGrid(nodes=513, timesteps=50)
    solution = fd_american_1d(one_asset(s0=40 * scale), spec, grid)
    assert solution.constraint_residual < 1e-8 * spec.strike
    unit = fd_american_1d(
        one_asset(s0=40.0), OptionSpec(PUT, 40, 1.0, 10), grid
    )
    assert float(solution.price(40 * scale)) == approx(
        scale * float(unit.price(40.0)), rel=1e-6
    )


def test_fd_american_dominates_european():
    spec = OptionSpec(PUT, 40, 1.0, 10)
    grid = FdGrid(nodes=2049, timesteps=200)
    american = fd_american_1d(one_asset(), spec, grid)
    european = fd_american_1d(one_asset(), spec, grid, american=False)
    assert (american.values[0] >= european.values[0] - 1e-9).all()
    s = np.array([30.0, 40.0, 50.0])
    closed_form, _ = bs_european_put(s, 40, 0.06, 0, 0.2, 1)
    assert european.price(s) == approx(closed_form, abs=5e-3)


def test_fd_call_surface_is_monotone():
    spec = OptionSpec(GEO, 100, 1.0, 10)
    market = MarketParams.homogeneous(1, 0.3, 0.0, 100.0, 0.02, 0.05)
    solution = fd_american_1d(
        market, spec, FdGrid(nodes=2049, timesteps=200), store_every=5
    )
    assert solution.times.tolist() == approx([0, 0.5, 1.0])
    assert (np.diff(solution.values[0]) >= -1e-6).all()
    inside = solution.deltas[0][1:-1]
    assert ((inside >= -1e-3) & (inside <= 1 + 1e-3)).all()
    with raises(ValueError):
        solution.price(100.0, 0.3)


def test_fd_queries_outside_the_grid_are_clamped():
    spec = OptionSpec(PUT, 40, 1.0, 10)
    solution = fd_american_1d(
        one_asset(), spec, FdGrid(nodes=257, timesteps=20, s_max=100.0)
    )
    with warns(ProviderOutOfDomain):
        value = solution.price([150.0])
    assert value[0] == solution.values[0, -1]


def test_fd_self_check():
    spec = OptionSpec(PUT, 40, 1.0, 10)
    with raises(GridTooCoarse):
        fd_american_1d(
            one_asset(), spec, FdGrid(nodes=9, timesteps=10), self_check=True
        )


def test_fd_solution_csv(tmp_path):
    spec = OptionSpec(PUT, 40, 1.0, 2)
    solution = fd_american_1d(
        one_asset(), spec, FdGrid(nodes=33, timesteps=4), store_every=1
    )
    file = tmp_path / 'fd_solution.csv'
    solution.to_csv(file)
    header, rows = read_csv(file)
    assert header == ['t', 's', 'value', 'delta']
    assert rows.shape == (3 * 33, 4)
    assert rows[33:66, 0] == approx(np.full(33, 0.5))


@mark.slow
@mark.parametrize(
    's0, expected', [(90.0, 6.7000), (100.0, 11.2502), (110.0, 16.7708)]
)
def test_fd_geometric_two_asset_references(s0, expected):
    spec = OptionSpec(GEO, 100, 2.0, 50)
    price, delta, _ = fd_geometric_reference(geometric_market(s0), spec)
    assert price == approx(expected, rel=5e-3)
    assert delta.shape == (2,)
    assert delta[0] == delta[1]


@mark.slow
@mark.parametrize(
    's0, expected', [(90.0, 6.0685), (100.0, 10.3173), (110.0, 16.1580)]
)
def test_fd_geometric_five_asset_references(s0, expected):
    spec = OptionSpec(GEO, 100, 2.0, 50)
    price, _, _ = fd_geometric_reference(geometric_market(s0, d=5), spec)
    assert price == approx(expected, rel=5e-3)


def test_geometric_delta_maps_back_to_the_basket():
    spec = OptionSpec(GEO, 100, 2.0, 10)
    grid = FdGrid(nodes=2049, timesteps=200)
    market = MarketParams(
        s0=[90.0, 110.0], sigma=0.25, rho=[[1, 0.75], [0.75, 1]]
    )
    price, delta, solution = fd_geometric_reference(market, spec, grid)
    s_reduced = np.sqrt(90 * 110)
    reduced_delta = float(solution.delta(s_reduced))
    assert delta == approx(
        [reduced_delta * s_reduced / 180, reduced_delta * s_reduced / 220]
    )
    assert price == approx(float(solution.price(s_reduced)))


def test_european_reference():
    spec = OptionSpec(GEO, 100, 1.0, 10)
    price, delta = european_reference(one_asset(100.0, 0.2, 0.05), spec)
    assert price == approx(10.4506, abs=1e-4)
    assert delta == approx(0.6368, abs=1e-4)


def test_basis_exponents():
    E = _exponents(2, 2)
    assert E.tolist() == [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1], [0, 2]]
    assert len(_exponents(3, 4)) == 35


def test_basis_columns():
    spec = OptionSpec(PayoffKind.MAX_CALL, 100, 1.0, 10)
    s = np.array([[50.0, 200.0]])
    X = ls_basis(spec, s, 2)
    assert X[0].tolist() == approx([1, 0.5, 2, 0.25, 1, 4, 1])
    one = OptionSpec(PUT, 100, 1.0, 10)
    assert ls_basis(one, np.array([[50.0]]), 4).shape == (1, 5)


def test_basis_gradient_matches_differences():
    spec = OptionSpec(GEO, 100, 1.0, 10)
    rng = np.random.default_rng(0)
    s = rng.uniform(80, 120, (5, 3))
    grad = ls_basis_grad(spec, s, 3)
    h = 1e-4
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        numeric = (ls_basis(spec, s + e, 3) - ls_basis(spec, s - e, 3)) / (
            2 * h
        )
        assert grad[:, :, i] == approx(numeric, rel=1e-6, abs=1e-9)


def test_singular_regression_falls_back_to_ridge():
    X = np.ones((4, 2))
    with warns(SingularRegression):
        beta = _regress(X, np.full(4, 3.0))
    assert X @ beta == approx(np.full(4, 3.0), rel=1e-6)


def test_longstaff_schwartz_without_volatility():
    spec = OptionSpec(PUT, 40, 1.0, 10)
    market = one_asset(s0=36.0, sigma=0.0, r=0.06)
    paths = simulate_paths(market, spec, 20, seed=0)
    ls = longstaff_schwartz(paths, spec, market)
    assert ls.price0 == 4
    assert ls.price0_std == 0
    assert ls.delta0.tolist() == [-1]
    assert (ls.stop_index == 0).all()


def test_longstaff_schwartz_put_is_low_biased():
    spec = OptionSpec(PUT, 40, 1.0, 50)
    paths = simulate_paths(one_asset(), spec, 20000, seed=1)
    ls = longstaff_schwartz(paths, spec, one_asset())
    reference = binomial_american(one_asset(), spec, 2000)
    assert ls.price0 == approx(reference, rel=0.02)
    assert ls.delta0[0] < 0
    assert ls.exercise[:, 1:-1].any()
    assert ls.continuation_coefficients[0] is None
    assert ls.to_dict()['degree'] == 4


@mark.slow
def test_longstaff_schwartz_far_out_of_the_money_max_call():
    market = MarketParams.homogeneous(2, 0.2, 0.3, 80.0, 0.05)
    spec = OptionSpec(PayoffKind.MAX_CALL, 100, 1.0, 50)
    paths = simulate_paths(market, spec, 100000, seed=3)
    ls = longstaff_schwartz(paths, spec, market)
    assert abs(ls.price0 - 1.2837) < 3 * max(ls.price0_std, 0.01369)
    continuation = ls.continuation(spec, 25, paths.prices[:10, 25])
    assert continuation.shape == (10,)
    assert ls.continuation_grad(spec, 25, paths.prices[:10, 25]).shape == (
        10,
        2,
    )
