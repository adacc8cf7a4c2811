import warnings
from math import log, sqrt

import numpy as np
from pytest import approx, mark, raises, warns

from americanrnn import (
    HeterogeneousParams,
    MarketParams,
    NegativePriceWarning,
    NotPositiveDefinite,
    OptionSpec,
    PathSet,
    PayoffKind,
    cholesky,
    equivalent_1d_params,
    payoff_f,
    payoff_g,
    reduced_market,
    simulate_paths,
    smoothed_payoff,
)
from americanrnn._market import (
    PATH_BLOCK,
    payoff_g_grad,
    payoff_grad,
    smoothed_payoff_grad,
)

GEO = PayoffKind.GEOMETRIC_AVERAGE_CALL


def market(d=2, sigma=0.25, rho=0.75, s0=100.0, r=0.0, dividend=0.0):
    return MarketParams.homogeneous(d, sigma, rho, s0, r, dividend)


def test_cholesky_of_two_asset_correlation():
    L = cholesky([[1, 0.75], [0.75, 1]])
    assert L[0, 0] == 1
    assert L[0, 1] == 0
    assert L[1, 0] == approx(0.75)
    assert L[1, 1] == approx(0.6614378, rel=1e-6)
    assert L @ L.T == approx(np.array([[1, 0.75], [0.75, 1]]))


def test_cholesky_rejects_entry_above_one():
    with raises(NotPositiveDefinite):
        cholesky([[1, 1.5], [1.5, 1]])


def test_cholesky_rejects_indefinite_matrix():
    rho = [[1, 0.9, -0.9], [0.9, 1, 0.9], [-0.9, 0.9, 1]]
    with raises(NotPositiveDefinite):
        cholesky(rho)


def test_cholesky_rejects_asymmetric_and_non_unit_diagonal():
    with raises(ValueError, match='symmetric'):
        cholesky([[1, 0.2], [0.3, 1]])
    with raises(ValueError, match='diagonal'):
        cholesky([[2, 0], [0, 1]])


def test_market_params_are_read_only():
    params = market()
    assert params.d == 2
    with raises(ValueError):
        params.s0[0] = 1.0
    assert params.chol[1, 0] == approx(0.75)


def test_market_params_validation():
    with raises(ValueError, match='s0'):
        MarketParams(s0=[100, -1], sigma=0.2, rho=np.eye(2))
    with raises(ValueError, match='rho'):
        MarketParams(s0=[100, 100], sigma=0.2, rho=np.eye(3))
    with raises(ValueError, match='sigma'):
        MarketParams(s0=[100], sigma=[-0.2], rho=[[1]])


def test_homogeneous_market_dict():
    d = market(d=3, r=0.05, dividend=0.1).to_dict()
    assert d['d'] == 3
    assert d['dividends'] == [0.1] * 3
    assert d['rho'][0] == [1.0, 0.75, 0.75]


def test_kappa_defaults_to_two_over_dt():
    spec = OptionSpec(GEO, 100, 1.0, 50)
    assert spec.dt == 0.02
    assert spec.kappa == approx(100)
    assert spec.with_steps(100).kappa == approx(200)
    explicit = OptionSpec(GEO, 100, 1.0, 50, kappa=7.0)
    assert explicit.with_steps(10).kappa == 7.0


def test_option_spec_validation():
    with raises(ValueError, match='strike'):
        OptionSpec(GEO, 0, 1.0, 50)
    with raises(ValueError, match='steps'):
        OptionSpec(GEO, 100, 1.0, 0)
    with raises(ValueError):
        OptionSpec('asian_call', 100, 1.0, 50)


def test_effective_volatility_of_two_assets():
    sigma_eff, mu_eff = equivalent_1d_params(market())
    assert sigma_eff == approx(0.233854, rel=1e-5)
    assert mu_eff == approx(0.5 * (sigma_eff**2 - 0.25**2))


def test_effective_parameters_of_hundred_assets():
    sigma_eff, mu_eff = equivalent_1d_params(market(d=100))
    assert sigma_eff == approx(0.216868, rel=1e-5)
    assert mu_eff == approx(-0.0077344, rel=1e-3)


def test_reduced_market():
    params = MarketParams(
        s0=[100, 121], sigma=0.25, rho=[[1, 0.75], [0.75, 1]], r=0.03
    )
    reduced = reduced_market(params)
    assert reduced.d == 1
    assert reduced.s0[0] == approx(110)
    _, mu_eff = equivalent_1d_params(params)
    assert reduced.r - reduced.dividends[0] == approx(mu_eff)


def test_heterogeneous_market_has_no_reduction():
    params = MarketParams(
        s0=[100, 100], sigma=[0.2, 0.3], rho=[[1, 0.5], [0.5, 1]]
    )
    with raises(HeterogeneousParams):
        equivalent_1d_params(params)
    rho = [[1, 0.2, 0.5], [0.2, 1, 0.5], [0.5, 0.5, 1]]
    with raises(HeterogeneousParams):
        reduced_market(MarketParams(s0=[100] * 3, sigma=0.2, rho=rho))


def test_payoffs():
    s = np.array([100.0, 121.0])
    assert payoff_g(OptionSpec(GEO, 100, 1, 1), s) == approx(10)
    max_call = OptionSpec(PayoffKind.MAX_CALL, 100, 1, 1)
    assert payoff_g(max_call, s) == approx(21)
    put = OptionSpec(PayoffKind.GEOMETRIC_AVERAGE_PUT, 100, 1, 1)
    assert payoff_f(put, [[90.0], [110.0]]).tolist() == [10.0, 0.0]


def test_payoff_gradients():
    spec = OptionSpec(GEO, 100, 1, 1)
    s = np.array([100.0, 121.0])
    assert payoff_g_grad(spec, s) == approx([0.55, 110 / 242])
    assert payoff_grad(spec, [50.0, 60.0]).tolist() == [0.0, 0.0]
    max_call = OptionSpec(PayoffKind.MAX_CALL, 100, 1, 1)
    assert payoff_g_grad(max_call, s).tolist() == [0.0, 1.0]


def test_one_asset_geometric_mean_is_exact():
    spec = OptionSpec(GEO, 100, 1, 1)
    assert payoff_g(spec, [[123.456]])[0] == 123.456 - 100


def test_geometric_payoffs_at_non_positive_prices():
    call = OptionSpec(GEO, 100, 1, 1)
    put = OptionSpec(PayoffKind.GEOMETRIC_AVERAGE_PUT, 100, 1, 1)
    s = np.array([[-1.0, 100.0], [0.0, 50.0], [81.0, 121.0]])
    with warnings.catch_warnings():
        warnings.simplefilter('error')
        assert payoff_g(call, s) == approx([-100, -100, -1])
        assert payoff_f(put, s) == approx([100, 100, 1])
        grad = payoff_g_grad(call, s)
    assert np.isfinite(grad).all()
    assert grad[:2].tolist() == [[0.0, 0.0], [0.0, 0.0]]
    assert grad[2] == approx([99 / 162, 99 / 242])


def test_smoothed_payoff_bounds():
    rng = np.random.default_rng(7)
    spec = OptionSpec(GEO, 100, 1.0, 50)
    s = rng.uniform(50, 150, (1000, 3))
    f = payoff_f(spec, s)
    f_kappa = smoothed_payoff(spec, s)
    gap = f_kappa - f
    assert (gap >= 0).all()
    assert (gap <= log(2) / spec.kappa + 1e-12).all()
    at_strike = smoothed_payoff(spec, np.full(3, 100.0))
    assert at_strike == approx(log(2) / spec.kappa)


def test_smoothed_payoff_gradient_matches_differences():
    rng = np.random.default_rng(3)
    spec = OptionSpec(PayoffKind.GEOMETRIC_AVERAGE_CALL, 100, 1.0, 10)
    s = rng.uniform(90, 110, (20, 2))
    grad = smoothed_payoff_grad(spec, s)
    h = 1e-5
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (smoothed_payoff(spec, s + e) - smoothed_payoff(spec, s - e)) / (
            2 * h
        )
        assert grad[:, i] == approx(fd, rel=1e-5, abs=1e-9)


def test_simulation_is_reproducible_across_threads():
    params = market()
    spec = OptionSpec(GEO, 100, 1.0, 3)
    M = PATH_BLOCK + 100
    a = simulate_paths(params, spec, M, seed=11)
    b = simulate_paths(params, spec, M, seed=11, threads=4)
    c = simulate_paths(params, spec, M, seed=12)
    assert np.array_equal(a.prices, b.prices)
    assert not np.array_equal(a.prices, c.prices)
    assert a.seed == 11


def test_simulated_paths_follow_euler_recursion():
    params = market(r=0.05, dividend=0.01)
    spec = OptionSpec(GEO, 100, 1.0, 4)
    paths = simulate_paths(params, spec, 10, seed=0)
    s, dw = paths.prices, paths.increments
    expected = s[:, :-1] * (1 + 0.04 * spec.dt + 0.25 * dw)
    assert s[:, 1:] == approx(expected)
    assert (s[:, 0] == 100).all()


def test_increments_have_the_market_covariance():
    params = market(rho=0.75)
    spec = OptionSpec(GEO, 100, 1.0, 4)
    paths = simulate_paths(params, spec, 20000, seed=1)
    dw = paths.increments.reshape(-1, 2) / sqrt(spec.dt)
    cov = np.cov(dw.T)
    assert cov == approx(np.array([[1, 0.75], [0.75, 1]]), abs=0.03)


def test_discounted_prices_are_martingales():
    r = 0.05
    params = market(r=r, sigma=0.2)
    spec = OptionSpec(GEO, 100, 1.0, 10)
    M = 20000
    paths = simulate_paths(params, spec, M, seed=5)
    # the Euler scheme grows by (1 + r dt) per step
    terminal = paths.prices[:, -1] / (1 + r * spec.dt) ** spec.steps
    error = terminal.std(axis=0, ddof=1) / sqrt(M)
    assert (np.abs(terminal.mean(axis=0) - 100) < 4 * error).all()


def test_negative_prices_warn():
    params = market(d=1, sigma=3.0, rho=0.0)
    spec = OptionSpec(GEO, 100, 1.0, 1)
    with warns(NegativePriceWarning):
        simulate_paths(params, spec, 1000, seed=0)


def test_simulate_rejects_bad_arguments():
    spec = OptionSpec(GEO, 100, 1.0, 1)
    with raises(ValueError):
        simulate_paths(market(), spec, 0, seed=0)
    with raises(ValueError):
        simulate_paths(market(), spec, 10, seed=-1)


def test_pathset_file(tmp_path):
    paths = simulate_paths(market(d=3), OptionSpec(GEO, 100, 1, 5), 7, 9)
    file = tmp_path / 'p.pathset'
    paths.save(file)
    assert file.stat().st_size == 32 + 8 * (7 * 6 * 3 + 7 * 5 * 3 + 1)
    loaded = PathSet.load(file)
    assert np.array_equal(loaded.prices, paths.prices)
    assert np.array_equal(loaded.increments, paths.increments)
    assert loaded.seed == 9
    file.write_bytes(b'X' * 40)
    with raises(ValueError):
        PathSet.load(file)


def test_pathset_validates_shapes():
    with raises(ValueError):
        PathSet(np.ones((2, 3, 1)), np.ones((2, 3, 1)))
    with raises(FloatingPointError):
        PathSet(np.full((1, 2, 1), np.nan), np.zeros((1, 1, 1)))


@mark.parametrize('d', [1, 5, 30])
def test_paths_shapes(d):
    paths = simulate_paths(
        market(d=d, rho=0.3), OptionSpec(GEO, 100, 1, 4), 3, 0
    )
    assert (paths.M, paths.N, paths.d) == (3, 4, d)
