"""Read, validate and override the TOML run configuration."""

from __future__ import annotations

import sys
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field, fields, replace
from functools import partial
from pathlib import Path
from typing import Any

import regex

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from ._baselines import FdGrid
from ._hedging import Provider
from ._market import MarketParams, OptionSpec, PayoffKind, cholesky
from ._targets import StoppingMode
from ._training import TrainConfig

rc = partial(regex.compile, cache_pattern=False)

SCHEMA = 1

# section.key=value, the value is a TOML value or a bare string
OVERRIDE = rc(
    r'(?<section>[a-z_]++)\.(?<key>\w++)\s*+=\s*+(?<value>.*+)', regex.S
)
INT_LIST = rc(r'\s*+\d++(?:\s*+,\s*+\d++)*+\s*+')
LIST_SEP = rc(r'\s*+,\s*+')
LEADING_NAME = rc(r'\w++')


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted name of the field."""

    def __init__(self, path: str, message: str) -> None:
        super().__init__(f'{path}: {message}' if path else message)
        self.path = path


@dataclass(frozen=True)
class EvalSection:
    """``truth`` is one of auto, fd, ls or none; auto picks fd for geometric
    payoffs and ls otherwise, but only when a reference is given."""

    M_eval: int = 50000
    seed: int | None = None
    boundary_paths: int = 100
    reference: str | None = None
    truth: str = 'auto'


@dataclass(frozen=True)
class HedgeSection:
    intervals: int = 250
    provider: Provider = Provider.RNN_NETS
    paths: int = 20000
    seed: int | None = None
    bins: int = 50
    sweep: tuple[int, ...] = ()
    calibration_seed: int | None = None


@dataclass(frozen=True)
class LsSection:
    paths: int = 100000
    seed: int | None = None
    degree: int = 4


@dataclass(frozen=True)
class BinomialSection:
    steps: int = 10000


@dataclass(frozen=True)
class BenchSection:
    steps: tuple[int, ...] = (25, 50, 100, 200)
    paths: int = 2000
    epochs: int = 5
    # bounded tapes keep the peak independent of N
    bptt_steps: int = 1


@dataclass(frozen=True)
class RunConfig:
    market: MarketParams
    option: OptionSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    train_paths: int = 50000
    eval: EvalSection = field(default_factory=EvalSection)
    hedge: HedgeSection = field(default_factory=HedgeSection)
    fd: FdGrid = field(default_factory=FdGrid)
    ls: LsSection = field(default_factory=LsSection)
    binomial: BinomialSection = field(default_factory=BinomialSection)
    bench: BenchSection = field(default_factory=BenchSection)
    outputs: Path = Path('runs')

    @property
    def seed(self) -> int:
        return self.train.seed

    @property
    def eval_seed(self) -> int:
        return self.seed + 1 if self.eval.seed is None else self.eval.seed

    @property
    def hedge_seed(self) -> int:
        return self.seed + 2 if self.hedge.seed is None else self.hedge.seed

    @property
    def ls_seed(self) -> int:
        return self.seed + 3 if self.ls.seed is None else self.ls.seed

    @property
    def calibration_seed(self) -> int:
        seed = self.hedge.calibration_seed
        return self.seed + 4 if seed is None else seed

    def normalized(self) -> dict:
        """Plain dict of every field with defaults and derived seeds filled."""
        train = asdict(self.train)
        train['stopping_mode'] = self.train.stopping_mode.value
        train['paths'] = self.train_paths
        hedge = asdict(self.hedge)
        hedge['provider'] = self.hedge.provider.value
        hedge['seed'] = self.hedge_seed
        hedge['calibration_seed'] = self.calibration_seed
        hedge['sweep'] = list(self.hedge.sweep)
        evaluation = asdict(self.eval)
        evaluation['seed'] = self.eval_seed
        ls = asdict(self.ls)
        ls['seed'] = self.ls_seed
        bench = asdict(self.bench)
        bench['steps'] = list(self.bench.steps)
        return {
            'schema': SCHEMA,
            'market': self.market.to_dict(),
            'option': self.option.to_dict(),
            'train': train,
            'eval': evaluation,
            'hedge': hedge,
            'fd': asdict(self.fd),
            'ls': ls,
            'binomial': asdict(self.binomial),
            'bench': bench,
            'outputs': {'directory': str(self.outputs)},
        }


class _Section:
    """Typed access to one table that rejects unknown or mistyped keys."""

    __slots__ = 'name', 'table', 'used'

    def __init__(self, doc: dict, name: str) -> None:
        table = doc.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(name, 'expected a table')
        self.name = name
        self.table = table
        self.used: set[str] = set()

    def path(self, key: str) -> str:
        return f'{self.name}.{key}'

    def get(self, key: str, kind: type | tuple[type, ...], default=None):
        self.used.add(key)
        if key not in self.table:
            return default
        value = self.table[key]
        if kind is float and isinstance(value, int | float):
            if isinstance(value, bool):
                raise ConfigError(self.path(key), 'expected a number')
            return float(value)
        if isinstance(value, bool) and kind is not bool:
            raise ConfigError(self.path(key), f'expected {_name(kind)}')
        if not isinstance(value, kind):
            raise ConfigError(self.path(key), f'expected {_name(kind)}')
        return value

    def integer(self, key: str, default, minimum: int = 0):
        value = self.get(key, int, default)
        if value is not None and value < minimum:
            raise ConfigError(self.path(key), f'must be at least {minimum}')
        return value

    def int_list(self, key: str, default: tuple[int, ...]) -> tuple[int, ...]:
        value = self.get(key, (list, str), default)
        if isinstance(value, str):
            if not value.strip():
                return ()
            if INT_LIST.fullmatch(value) is None:
                raise ConfigError(
                    self.path(key), f'expected "25,50,100", got {value!r}'
                )
            value = [int(v) for v in LIST_SEP.split(value.strip())]
        if not all(isinstance(v, int) and v > 0 for v in value):
            raise ConfigError(self.path(key), 'expected positive integers')
        return tuple(value)

    def finish(self) -> None:
        unknown = sorted(set(self.table) - self.used)
        if unknown:
            raise ConfigError(self.path(unknown[0]), 'unknown field')


def _name(kind) -> str:
    if isinstance(kind, tuple):
        return ' or '.join(k.__name__ for k in kind)
    return kind.__name__


def _build(section: _Section, cls, **kwargs):
    """Construct ``cls`` and name the offending field if it refuses."""
    try:
        return cls(**kwargs)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        m = LEADING_NAME.match(str(e))
        key = m[0] if m is not None and m[0] in kwargs else None
        raise ConfigError(
            section.path(key) if key else section.name, str(e)
        ) from None


def _vector(section: _Section, key: str, default) -> list[float] | float:
    value = section.get(key, (int, float, list), default)
    if isinstance(value, list):
        if not value or not all(
            isinstance(v, int | float) and not isinstance(v, bool)
            for v in value
        ):
            raise ConfigError(section.path(key), 'expected numbers')
        return [float(v) for v in value]
    return float(value)


def _market(doc: dict) -> MarketParams:
    sec = _Section(doc, 'market')
    s0 = _vector(sec, 's0', 100.0)
    sigma = _vector(sec, 'sigma', 0.2)
    dividends = _vector(sec, 'dividends', 0.0)
    r = sec.get('r', float, 0.0)
    rho = sec.get('rho', (int, float, list), 0.0)
    sizes = {
        key: len(v)
        for key, v in (('s0', s0), ('sigma', sigma), ('dividends', dividends))
        if isinstance(v, list)
    }
    if isinstance(rho, list):
        sizes['rho'] = len(rho)
    d = sec.integer('d', None, 1)
    sec.finish()
    if d is None:
        d = max(sizes.values(), default=1)
    for key, size in sizes.items():
        if size != d:
            raise ConfigError(
                sec.path(key), f'has {size} entries but d is {d}'
            )

    def broadcast(value):
        return value if isinstance(value, list) else [value] * d

    if isinstance(rho, list):
        matrix = rho
        if not all(isinstance(row, list) and len(row) == d for row in matrix):
            raise ConfigError(sec.path('rho'), f'expected a {d}x{d} matrix')
    else:
        if isinstance(rho, bool):
            raise ConfigError(sec.path('rho'), 'expected a number')
        matrix = [
            [1.0 if i == j else float(rho) for j in range(d)]
            for i in range(d)
        ]
    try:
        cholesky(matrix)
    except ValueError as e:
        raise ConfigError(sec.path('rho'), str(e)) from None
    return _build(
        sec,
        MarketParams,
        s0=broadcast(s0),
        sigma=broadcast(sigma),
        rho=matrix,
        r=r,
        dividends=broadcast(dividends),
    )


def _option(doc: dict) -> OptionSpec:
    sec = _Section(doc, 'option')
    payoff = sec.get('payoff', str, PayoffKind.GEOMETRIC_AVERAGE_CALL.value)
    try:
        payoff = PayoffKind(payoff)
    except ValueError:
        choices = ', '.join(k.value for k in PayoffKind)
        raise ConfigError(
            sec.path('payoff'), f'{payoff!r} is not one of {choices}'
        ) from None
    kwargs = {
        'payoff': payoff,
        'strike': sec.get('strike', float, 100.0),
        'maturity': sec.get('maturity', float, 1.0),
        'steps': sec.integer('steps', 50, 1),
        'kappa': sec.get('kappa', float),
    }
    sec.finish()
    return _build(sec, OptionSpec, **kwargs)


def _train(doc: dict) -> tuple[TrainConfig, int]:
    sec = _Section(doc, 'train')
    paths = sec.integer('paths', 50000, 2)
    kwargs: dict[str, Any] = {}
    for f in fields(TrainConfig):
        if f.name == 'stopping_mode':
            mode = sec.get(f.name, str, f.default.value)  # type: ignore
            try:
                kwargs[f.name] = StoppingMode(mode)
            except ValueError:
                raise ConfigError(
                    sec.path(f.name), f'unknown stopping mode {mode!r}'
                ) from None
        elif f.name in ('grad_clip', 'max_wall_ms'):
            # optional numbers, "none" disables
            value = sec.get(f.name, (int, float, str), f.default)
            if value == 'none':
                value = None
            elif isinstance(value, str):
                raise ConfigError(sec.path(f.name), 'expected a number')
            kwargs[f.name] = None if value is None else float(value)
        elif f.type in ('float', float):
            kwargs[f.name] = sec.get(f.name, float, f.default)
        elif f.type in ('bool', bool):
            kwargs[f.name] = sec.get(f.name, bool, f.default)
        else:
            kwargs[f.name] = sec.get(f.name, int, f.default)
    sec.finish()
    return _build(sec, TrainConfig, **kwargs), paths


def _eval(doc: dict) -> EvalSection:
    sec = _Section(doc, 'eval')
    truth = sec.get('truth', str, 'auto')
    if truth not in ('auto', 'fd', 'ls', 'none'):
        raise ConfigError(sec.path('truth'), f'unknown truth {truth!r}')
    section = EvalSection(
        M_eval=sec.integer('M_eval', 50000, 2),
        seed=sec.integer('seed', None),
        boundary_paths=sec.integer('boundary_paths', 100),
        reference=sec.get('reference', str) or None,
        truth=truth,
    )
    sec.finish()
    return section


def _hedge(doc: dict) -> HedgeSection:
    sec = _Section(doc, 'hedge')
    provider = sec.get('provider', str, Provider.RNN_NETS.value)
    try:
        provider = Provider(provider)
    except ValueError:
        choices = ', '.join(p.value for p in Provider)
        raise ConfigError(
            sec.path('provider'), f'{provider!r} is not one of {choices}'
        ) from None
    section = HedgeSection(
        intervals=sec.integer('intervals', 250, 1),
        provider=provider,
        paths=sec.integer('paths', 20000, 1),
        seed=sec.integer('seed', None),
        bins=sec.integer('bins', 50, 1),
        sweep=sec.int_list('sweep', ()),
        calibration_seed=sec.integer('calibration_seed', None),
    )
    sec.finish()
    return section


def _fd(doc: dict) -> FdGrid:
    sec = _Section(doc, 'fd')
    kwargs = {
        'nodes': sec.integer('nodes', 16385, 3),
        'timesteps': sec.integer('timesteps', 1000, 1),
        'theta': sec.get('theta', float, 0.5),
        'penalty': sec.get('penalty', float, 1e7),
        's_min': sec.get('s_min', float, 0.0),
        's_max': sec.get('s_max', float),
        'rannacher': sec.get('rannacher', bool, True),
    }
    sec.finish()
    return _build(sec, FdGrid, **kwargs)


def _ls(doc: dict) -> LsSection:
    sec = _Section(doc, 'ls')
    section = LsSection(
        paths=sec.integer('paths', 100000, 2),
        seed=sec.integer('seed', None),
        degree=sec.integer('degree', 4, 1),
    )
    sec.finish()
    return section


def _binomial(doc: dict) -> BinomialSection:
    sec = _Section(doc, 'binomial')
    section = BinomialSection(steps=sec.integer('steps', 10000, 1))
    sec.finish()
    return section


def _bench(doc: dict) -> BenchSection:
    sec = _Section(doc, 'bench')
    section = BenchSection(
        steps=sec.int_list('steps', (25, 50, 100, 200)),
        paths=sec.integer('paths', 2000, 2),
        epochs=sec.integer('epochs', 5, 1),
        bptt_steps=sec.integer('bptt_steps', 1),
    )
    sec.finish()
    if not section.steps:
        raise ConfigError(sec.path('steps'), 'needs at least one value')
    return section


def _outputs(doc: dict) -> Path:
    sec = _Section(doc, 'outputs')
    directory = sec.get('directory', str, 'runs')
    sec.finish()
    return Path(directory)


_SECTIONS = (
    'market',
    'option',
    'train',
    'eval',
    'hedge',
    'fd',
    'ls',
    'binomial',
    'bench',
    'outputs',
)


def config_from_dict(doc: dict) -> RunConfig:
    schema = doc.get('schema', SCHEMA)
    if schema != SCHEMA:
        raise ConfigError('schema', f'unsupported schema {schema!r}')
    for key in doc:
        if key != 'schema' and key not in _SECTIONS:
            raise ConfigError(key, 'unknown section')
    train, train_paths = _train(doc)
    return RunConfig(
        market=_market(doc),
        option=_option(doc),
        train=train,
        train_paths=train_paths,
        eval=_eval(doc),
        hedge=_hedge(doc),
        fd=_fd(doc),
        ls=_ls(doc),
        binomial=_binomial(doc),
        bench=_bench(doc),
        outputs=_outputs(doc),
    )


def _loads(text: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError('', f'invalid TOML: {e}') from None


def parse_config(text: str) -> RunConfig:
    """Validate a ``schema = 1`` TOML document and fill in the defaults."""
    return config_from_dict(_loads(text))


def _override_value(text: str):
    try:
        return tomllib.loads(f'value = {text}')['value']
    except tomllib.TOMLDecodeError:
        return text.strip()


def apply_overrides(doc: dict, overrides: Iterable[str]) -> dict:
    """Return a copy of ``doc`` with ``section.key=value`` items applied."""
    doc = {k: dict(v) if isinstance(v, dict) else v for k, v in doc.items()}
    for item in overrides:
        m = OVERRIDE.fullmatch(item)
        if m is None:
            raise ConfigError(
                '', f'override {item!r} is not section.key=value'
            )
        table = doc.setdefault(m['section'], {})
        if not isinstance(table, dict):
            raise ConfigError(m['section'], 'expected a table')
        table[m['key']] = _override_value(m['value'])
    return doc


def load_config(
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
    *,
    seed: int | None = None,
    threads: int | None = None,
    out: str | Path | None = None,
    max_wall_ms: float | None = None,
) -> RunConfig:
    """Read the document at ``path`` (defaults only when None) and apply the
    command line overrides in order: ``--set`` items, then the flags."""
    if path is None:
        doc = {}
    else:
        try:
            text = Path(path).read_text(encoding='utf8')
        except OSError as e:
            raise ConfigError('', f'cannot read {path}: {e}') from None
        doc = _loads(text)
    config = config_from_dict(apply_overrides(doc, overrides))
    train = config.train
    if seed is not None:
        train = replace(train, seed=seed)
    if threads is not None:
        if threads < 1:
            raise ConfigError('threads', 'must be at least 1')
        train = replace(train, threads=threads)
    if max_wall_ms is not None:
        if not max_wall_ms > 0:
            raise ConfigError('max_wall_ms', 'must be positive')
        train = replace(train, max_wall_ms=float(max_wall_ms))
    config = replace(config, train=train)
    if out is not None:
        config = replace(config, outputs=Path(out))
    if config.eval.reference is not None:
        reference = Path(config.eval.reference)
        if path is not None and not reference.is_absolute():
            reference = Path(path).parent / reference
        if not reference.exists():
            raise ConfigError('eval.reference', f'{reference} does not exist')
        config = replace(
            config, eval=replace(config.eval, reference=str(reference))
        )
    return config
