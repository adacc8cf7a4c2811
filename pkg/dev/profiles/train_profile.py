import cProfile
import sys

from americanrnn import (
    MarketParams,
    OptionSpec,
    TrainConfig,
    simulate_paths,
    train,
)

params = MarketParams.homogeneous(5, sigma=0.25, rho=0.75, s0=100.0)
spec = OptionSpec('geometric_average_call', 100, 2.0, 50)
paths = simulate_paths(params, spec, 2000, seed=0)

profiler = cProfile.Profile()

profiler.enable()
result = train(paths, spec, params, TrainConfig(epochs=3, L=3))
profiler.disable()

with open('train_profile_results.txt', 'w', encoding='utf8') as f:
    sys.stdout = f
    profiler.print_stats(sort='tottime')
