"""Plain-text tables and the JSON/CSV artifacts written by every command."""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from wcwidth import wcswidth

# 17 significant digits round-trip any float64.
CSV_FORMAT = '%.17g'


def format_value(value) -> str:
    if isinstance(value, bool | np.bool_):
        return str(bool(value))
    if isinstance(value, float | np.floating):
        return f'{float(value):.6g}'
    if isinstance(value, np.ndarray | list | tuple):
        return '(' + ', '.join(format_value(v) for v in value) + ')'
    return str(value)


def text_table(
    rows: Iterable[Sequence], caption: str | None = None
) -> str:
    """Left-aligned tab separated columns, padded by display width.

    Labels such as ``σ′`` or ``Δ`` are not one column per code point in every
    terminal, so padding uses wcswidth instead of len.
    """
    data = [[format_value(cell) for cell in row] for row in rows]
    if not data:
        return ''
    widths = [0] * max(len(row) for row in data)
    for row in data:
        for i, cell in enumerate(row[:-1]):
            widths[i] = max(widths[i], wcswidth(cell))
    lines = []
    for row in data:
        cells = [
            cell + ' ' * (widths[i] - wcswidth(cell))
            for i, cell in enumerate(row[:-1])
        ]
        cells.append(row[-1])
        lines.append('\t'.join(cells).rstrip())
    return (
        (f'\n{caption}\n' if caption is not None else '')
        + '\n'
        + '\n'.join(lines)
        + '\n'
    )


def write_csv(
    path: str | Path, header: Sequence[str], rows: np.ndarray
) -> None:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    np.savetxt(
        path,
        rows.reshape(-1, len(header)),
        fmt=CSV_FORMAT,
        delimiter=',',
        header=','.join(header),
        comments='',
    )


def read_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding='utf8') as f:
        header = f.readline().strip().split(',')
    rows = np.loadtxt(path, delimiter=',', skiprows=1, ndmin=2)
    return header, rows


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f'{type(obj).__name__} is not JSON serializable')


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, default=_jsonable)


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(dumps(obj) + '\n', encoding='utf8')


def envelope(
    result: dict,
    config: dict,
    seed: int | None,
    version: str,
    rng: str,
    timings: dict | None = None,
) -> dict:
    """Wrap a command result with what is needed to reproduce it.

    The timestamp and any wall clock or memory measurements are kept under
    ``meta`` only, so two runs of the same config differ nowhere else.
    """
    return {
        'config': config,
        'seed': seed,
        'version': version,
        'rng': rng,
        'result': result,
        'meta': {
            'timestamp': datetime.now(timezone.utc).isoformat(
                timespec='seconds'
            ),
            **(timings or {}),
        },
    }
