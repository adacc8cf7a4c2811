"""Command line front end: simulate, train, evaluate, hedge and compare."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._baselines import (
    binomial_american,
    european_reference,
    fd_geometric_reference,
    longstaff_schwartz,
)
from ._config import ConfigError, RunConfig, load_config
from ._evaluation import (
    EmptyPositiveClass,
    SpecMismatch,
    evaluate,
    f1_score,
    fd_exercise_labels,
    write_boundary_csv,
)
from ._hedging import HedgeConfig, Provider, hedge
from ._market import (
    RNG_ALGORITHM,
    PathSet,
    reduced_market,
    simulate_paths,
)
from ._report import envelope, text_table, write_csv, write_json
from ._rnn import NetworkState
from ._training import train

logger = logging.getLogger(__name__)

TIMING_KEYS = ('wall_ms', 'peak_bytes')
PRICE_NET = 'price_net.rnn'
DELTA_NET = 'delta_net.rnn'
TRAIN_PATHS = 'train_paths.pathset'
EVAL_PATHS = 'eval_paths.pathset'
BENCH_HEADER = (
    'N',
    'train_ms',
    'eval_ms',
    'peak_bytes',
    'path_bytes',
    'non_path_bytes',
)


def _outputs(cfg: RunConfig) -> Path:
    cfg.outputs.mkdir(parents=True, exist_ok=True)
    return cfg.outputs


def _report(
    cfg: RunConfig,
    name: str,
    result: dict,
    rows: list,
    timings: dict | None = None,
) -> dict:
    """Write ``<name>.json`` and print ``rows`` as a table."""
    timings = dict(timings or {})
    for key in TIMING_KEYS:
        if key in result:
            timings[key] = result.pop(key)
    report = envelope(
        result,
        cfg.normalized(),
        cfg.seed,
        __version__,
        RNG_ALGORITHM,
        timings,
    )
    write_json(_outputs(cfg) / f'{name}.json', report)
    print(text_table(rows, name), end='')
    return report


def _training_paths(cfg: RunConfig, threads: int) -> PathSet:
    """Reuse the simulated training set when it matches the config."""
    file = cfg.outputs / TRAIN_PATHS
    if file.exists():
        paths = PathSet.load(file)
        if (
            paths.seed == cfg.seed
            and paths.M == cfg.train_paths
            and paths.N == cfg.option.steps
            and paths.d == cfg.market.d
        ):
            return paths
        logger.info('%s does not match the config; simulating again', file)
    return simulate_paths(
        cfg.market, cfg.option, cfg.train_paths, cfg.seed, threads
    )


def _networks(cfg: RunConfig) -> tuple[NetworkState, NetworkState]:
    return (
        NetworkState.load(cfg.outputs / PRICE_NET),
        NetworkState.load(cfg.outputs / DELTA_NET),
    )


def _read_reference(path: str) -> tuple[float, np.ndarray]:
    """``(price0, delta0)`` from a report or a plain JSON object."""
    data = json.loads(Path(path).read_text(encoding='utf8'))
    data = data.get('result', data)
    try:
        return float(data['price0']), np.asarray(data['delta0'], float)
    except (KeyError, TypeError):
        raise ConfigError(
            'eval.reference', f'{path} has no price0 and delta0'
        ) from None


def _require_geometric_or_1d(cfg: RunConfig) -> None:
    if cfg.market.d > 1 and not cfg.option.payoff.is_geometric:
        raise SpecMismatch(
            f'{cfg.option.payoff.value} on {cfg.market.d} assets has no one '
            'factor reduction; use the ls baseline'
        )


# Commands


def cmd_simulate(cfg: RunConfig) -> int:
    threads = cfg.train.threads
    out = _outputs(cfg)
    train_paths = simulate_paths(
        cfg.market, cfg.option, cfg.train_paths, cfg.seed, threads
    )
    train_paths.save(out / TRAIN_PATHS)
    eval_paths = simulate_paths(
        cfg.market, cfg.option, cfg.eval.M_eval, cfg.eval_seed, threads
    )
    eval_paths.save(out / EVAL_PATHS)
    # discounted, dividend-adjusted terminal price is a martingale
    carry = np.exp(
        -(cfg.market.r - np.asarray(cfg.market.dividends))
        * cfg.option.maturity
    )
    drift_check = (train_paths.prices[:, -1] * carry).mean(axis=0)
    result = {
        'train': {'file': TRAIN_PATHS, 'M': train_paths.M},
        'eval': {'file': EVAL_PATHS, 'M': eval_paths.M},
        'N': train_paths.N,
        'd': train_paths.d,
        'discounted_mean_terminal': drift_check,
    }
    _report(
        cfg,
        'simulate',
        result,
        [
            ['set', 'M', 'N', 'd'],
            ['train', train_paths.M, train_paths.N, train_paths.d],
            ['eval', eval_paths.M, eval_paths.N, eval_paths.d],
            ['E[S_T] discounted', drift_check],
        ],
    )
    return 0


def cmd_train(cfg: RunConfig) -> int:
    paths = _training_paths(cfg, cfg.train.threads)
    fit = train(paths, cfg.option, cfg.market, cfg.train)
    out = _outputs(cfg)
    fit.price.save(out / PRICE_NET)
    fit.delta.save(out / DELTA_NET)
    fit.history_to_csv(out / 'loss_history.csv')
    final = fit.history[-1, 1:4] if len(fit.history) else np.full(3, np.nan)
    result = {
        'epochs': cfg.train.epochs,
        'paths': paths.M,
        'final_loss': final[0],
        'final_price_term': final[1],
        'final_delta_term': final[2],
        'epochs_completed': len(fit.history),
        'budget_exhausted': fit.budget_exhausted,
        'parameters': fit.price.parameter_count()
        + fit.delta.parameter_count(),
        'checkpoints': [PRICE_NET, DELTA_NET],
        'history': 'loss_history.csv',
    }
    _report(
        cfg,
        'train',
        result,
        [
            ['epochs', 'loss', 'price term', 'Δ term', 'wall ms'],
            [len(fit.history), *final, fit.wall_ms],
        ],
        {'wall_ms': fit.wall_ms, 'peak_bytes': fit.peak_bytes},
    )
    return 0


def _truth_labels(cfg: RunConfig, paths: PathSet, have_reference: bool):
    kind = cfg.eval.truth
    if kind == 'auto':
        if not have_reference:
            return None
        kind = 'fd' if cfg.option.payoff.is_geometric else 'ls'
    if kind == 'fd':
        return fd_exercise_labels(paths, cfg.option, cfg.market, cfg.fd)
    if kind == 'ls':
        return longstaff_schwartz(
            paths, cfg.option, cfg.market, cfg.ls.degree
        ).exercise
    return None


def cmd_evaluate(cfg: RunConfig) -> int:
    price_net, delta_net = _networks(cfg)
    paths = simulate_paths(
        cfg.market,
        cfg.option,
        cfg.eval.M_eval,
        cfg.eval_seed,
        cfg.train.threads,
    )
    reference = (
        None
        if cfg.eval.reference is None
        else _read_reference(cfg.eval.reference)
    )
    report, _ = evaluate(
        paths,
        cfg.option,
        cfg.market,
        price_net,
        delta_net,
        mode=cfg.train.stopping_mode,
        force_maturity=cfg.train.force_maturity,
        reference=reference,
        threads=cfg.train.threads,
    )
    result = report.to_dict()
    truth = _truth_labels(cfg, paths, reference is not None)
    if truth is not None:
        try:
            result['f1'] = f1_score(report.exercise_labels, truth)
        except EmptyPositiveClass as e:
            logger.warning('f1 is undefined: %s', e)
    out = _outputs(cfg)
    write_boundary_csv(
        out / 'boundary.csv',
        paths,
        report.exercise_labels,
        truth,
        cfg.eval.boundary_paths,
    )
    result['boundary'] = 'boundary.csv'
    rows = [
        ['price0', 'std', 'Δ0', 'f1', 'price err %', 'Δ err %'],
        [
            result['price0'],
            result['price0_std'],
            result['delta0'],
            result['f1'],
            result['pct_err_price'],
            result['pct_err_delta'],
        ],
    ]
    _report(cfg, 'evaluate', result, rows)
    return 0


def cmd_hedge(cfg: RunConfig) -> int:
    section = cfg.hedge
    nets = (
        _networks(cfg)
        if section.provider is Provider.RNN_NETS
        else (None, None)
    )
    intervals = section.sweep or (section.intervals,)
    out = _outputs(cfg)
    summaries = []
    rows = [['intervals', 'provider', 'mean', 'std']]
    for K in intervals:
        spec = cfg.option.with_steps(K)
        paths = simulate_paths(
            cfg.market,
            spec,
            section.paths,
            cfg.hedge_seed,
            cfg.train.threads,
        )
        calibration = None
        if section.provider is Provider.RNN_NETS:
            calibration = simulate_paths(
                cfg.market,
                spec,
                section.paths,
                cfg.calibration_seed,
                cfg.train.threads,
            )
        result = hedge(
            HedgeConfig(
                K, section.provider, paths, section.bins, calibration
            ),
            cfg.option,
            cfg.market,
            price_net=nets[0],
            delta_net=nets[1],
            grid=cfg.fd,
            degree=cfg.ls.degree,
        )
        directory = out / f'hedge_{K}' if len(intervals) > 1 else out
        directory.mkdir(exist_ok=True)
        result.write(directory, section.bins)
        summaries.append(result.to_dict())
        rows.append([K, section.provider.value, result.mean, result.std])
    stds = [s['std'] for s in summaries]
    _report(
        cfg,
        'hedge',
        {
            'runs': summaries,
            'std_decreasing': all(a > b for a, b in zip(stds, stds[1:])),
        },
        rows,
    )
    return 0


def cmd_baseline_fd(cfg: RunConfig) -> int:
    _require_geometric_or_1d(cfg)
    price, delta, solution = fd_geometric_reference(
        cfg.market, cfg.option, cfg.fd
    )
    european, _ = european_reference(cfg.market, cfg.option)
    solution.to_csv(_outputs(cfg) / 'fd_solution.csv')
    result = {
        'method': 'fd',
        'price0': price,
        'delta0': delta,
        'european_price0': european,
        'constraint_residual': solution.constraint_residual,
        'solution': 'fd_solution.csv',
    }
    _report(
        cfg,
        'baseline_fd',
        result,
        [['price0', 'Δ0', 'European'], [price, delta, european]],
    )
    return 0


def cmd_baseline_ls(cfg: RunConfig) -> int:
    paths = simulate_paths(
        cfg.market,
        cfg.option,
        cfg.ls.paths,
        cfg.ls_seed,
        cfg.train.threads,
    )
    ls = longstaff_schwartz(paths, cfg.option, cfg.market, cfg.ls.degree)
    result = {'method': 'ls', **ls.to_dict()}
    _report(
        cfg,
        'baseline_ls',
        result,
        [
            ['price0', 'std', 'Δ0'],
            [ls.price0, ls.price0_std, ls.delta0],
        ],
    )
    return 0


def cmd_baseline_binomial(cfg: RunConfig) -> int:
    _require_geometric_or_1d(cfg)
    reduced = reduced_market(cfg.market)
    steps = cfg.binomial.steps
    american = binomial_american(reduced, cfg.option, steps)
    european = binomial_american(reduced, cfg.option, steps, american=False)
    result = {
        'method': 'binomial',
        'steps': steps,
        'price0': american,
        'european_price0': european,
    }
    _report(
        cfg,
        'baseline_binomial',
        result,
        [['steps', 'American', 'European'], [steps, american, european]],
    )
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    """Time training and evaluation over a sweep of time steps.

    The memory spread is taken over the training peak less the buffers that
    scale with the path count times N.
    """
    section = cfg.bench
    train_cfg = replace(
        cfg.train, epochs=section.epochs, bptt_steps=section.bptt_steps
    )
    rows = []
    for N in section.steps:
        spec = cfg.option.with_steps(N)
        paths = simulate_paths(
            cfg.market, spec, section.paths, cfg.seed, cfg.train.threads
        )
        fit = train(paths, spec, cfg.market, train_cfg)
        eval_paths = simulate_paths(
            cfg.market, spec, section.paths, cfg.eval_seed, cfg.train.threads
        )
        report, _ = evaluate(
            eval_paths,
            spec,
            cfg.market,
            fit.price,
            fit.delta,
            mode=train_cfg.stopping_mode,
            threads=train_cfg.threads,
        )
        peak = max(fit.peak_bytes, report.peak_bytes)
        rows.append(
            (
                N,
                fit.wall_ms,
                report.wall_ms,
                peak,
                fit.path_bytes,
                fit.non_path_bytes,
            )
        )
        logger.info('bench N=%d: train %.0f ms', N, fit.wall_ms)
    table = np.array(rows, dtype=np.float64)
    write_csv(_outputs(cfg) / 'bench.csv', BENCH_HEADER, table)
    slope = (
        float(np.polyfit(np.log(table[:, 0]), np.log(table[:, 1]), 1)[0])
        if len(rows) > 1
        else None
    )
    peaks = table[:, 5]
    spread = (peaks.max() - peaks.min()) / peaks.max() if peaks.max() else 0.0
    result = {
        'rows': 'bench.csv',
        'steps': list(section.steps),
        'train_time_loglog_slope': slope,
        'non_path_peak_spread': float(spread),
        'bptt_steps': section.bptt_steps,
    }
    _report(cfg, 'bench', result, [list(BENCH_HEADER), *rows])
    return 0


def cmd_config(cfg: RunConfig) -> int:
    print(json.dumps(cfg.normalized(), indent=2))
    return 0


_BASELINES = {
    'fd': cmd_baseline_fd,
    'ls': cmd_baseline_ls,
    'binomial': cmd_baseline_binomial,
}

_COMMANDS = {
    'simulate': cmd_simulate,
    'train': cmd_train,
    'evaluate': cmd_evaluate,
    'hedge': cmd_hedge,
    'bench': cmd_bench,
    'config': cmd_config,
}


def run_command(command: str, cfg: RunConfig) -> int:
    """Run ``command`` ('baseline fd' style names for baselines)."""
    name, _, method = command.partition(' ')
    if name == 'baseline':
        return _BASELINES[method](cfg)
    return _COMMANDS[name](cfg)


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ConfigError('', message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument('--config', type=Path, help='TOML run configuration')
    common.add_argument('--seed', type=int, help='override train.seed')
    common.add_argument('--threads', type=int, help='worker threads')
    common.add_argument('--out', type=Path, help='output directory')
    common.add_argument(
        '--max-wall-ms',
        type=float,
        help='stop training at the first minibatch past this budget',
    )
    common.add_argument(
        '--set',
        dest='overrides',
        action='append',
        default=[],
        metavar='SECTION.KEY=VALUE',
        help='override one config field; repeatable',
    )
    common.add_argument(
        '-v',
        '--verbose',
        action='count',
        default=0,
        help='-v for progress, -vv for debug output',
    )
    parser = _Parser(
        prog='americanrnn',
        description='Price and hedge American options with GRU networks.',
    )
    parser.add_argument('--version', action='version', version=__version__)
    commands = parser.add_subparsers(dest='command', required=True)
    for name in _COMMANDS:
        commands.add_parser(name, parents=[common])
    baseline = commands.add_parser('baseline', parents=[common])
    baseline.add_argument('method', choices=sorted(_BASELINES))
    return parser


def _error(e: BaseException) -> None:
    sys.stderr.write(
        json.dumps(
            {
                'error': type(e).__name__,
                'message': str(e),
                'path': getattr(e, 'path', None),
            }
        )
        + '\n'
    )


def main(argv: Sequence[str] | None = None) -> int:
    """Run one command; 0 on success, 1 for invalid config or usage, 2 on
    failure."""
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        _error(e)
        return 1
    logging.basicConfig(
        level=(logging.WARNING, logging.INFO, logging.DEBUG)[
            min(args.verbose, 2)
        ],
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    logging.captureWarnings(True)
    try:
        cfg = load_config(
            args.config,
            args.overrides,
            seed=args.seed,
            threads=args.threads,
            out=args.out,
            max_wall_ms=args.max_wall_ms,
        )
        command = args.command
        if command == 'baseline':
            command += ' ' + args.method
        return run_command(command, cfg)
    except ConfigError as e:
        _error(e)
        return 1
    except Exception as e:
        logger.debug('command failed', exc_info=True)
        _error(e)
        return 2
