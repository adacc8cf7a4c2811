import cProfile
import sys

from americanrnn import (
    FdGrid,
    Head,
    MarketParams,
    OptionSpec,
    evaluate,
    fd_exercise_labels,
    init_weights,
    simulate_paths,
)

params = MarketParams.homogeneous(10, sigma=0.25, rho=0.75, s0=100.0)
spec = OptionSpec('geometric_average_call', 100, 2.0, 100)
paths = simulate_paths(params, spec, 20000, seed=1)
price = init_weights(10, 7, Head.SOFTPLUS, 0)
delta = init_weights(10, 7, Head.SIGMOID, 1)

profiler = cProfile.Profile()

profiler.enable()
truth = fd_exercise_labels(paths, spec, params, FdGrid(4097, 400))
report, _ = evaluate(paths, spec, params, price, delta, truth=truth)
profiler.disable()

with open('eval_profile_results.txt', 'w', encoding='utf8') as f:
    sys.stdout = f
    profiler.print_stats(sort='tottime')
