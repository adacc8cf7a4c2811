import json
from pathlib import Path

import numpy as np
from pytest import raises

from americanrnn._report import (
    dumps,
    envelope,
    format_value,
    read_csv,
    text_table,
    write_csv,
    write_json,
)


def test_format_value():
    assert format_value(np.float64(1 / 3)) == '0.333333'
    assert format_value(np.True_) == 'True'
    assert format_value([0.5, 2]) == '(0.5, 2)'
    assert format_value(None) == 'None'


def test_text_table_pads_by_display_width():
    table = text_table([['σ′', 'Δ0'], ['0.233854', 0.5]], 'params')
    assert table == '\nparams\n\nσ′      \tΔ0\n0.233854\t0.5\n'


def test_wide_characters_take_two_columns():
    table = text_table([['資料', 'x'], ['ab', 'y']])
    assert table.splitlines()[1:] == ['資料\tx', 'ab  \ty']


def test_empty_table():
    assert text_table([]) == ''


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    rows = rng.normal(size=(5, 3)) * 10.0 ** rng.integers(-300, 300, (5, 3))
    file = tmp_path / 'x.csv'
    write_csv(file, ['a', 'b', 'c'], rows)
    header, back = read_csv(file)
    assert header == ['a', 'b', 'c']
    assert np.array_equal(back, rows)
    write_csv(file, ['a', 'b'], [1.0, 2.0])
    assert read_csv(file)[1].tolist() == [[1.0, 2.0]]


def test_json_handles_numpy(tmp_path):
    obj = {'a': np.arange(3), 'b': np.float64(0.5), 'c': Path('runs')}
    assert json.loads(dumps(obj)) == {'a': [0, 1, 2], 'b': 0.5, 'c': 'runs'}
    file = tmp_path / 'x.json'
    write_json(file, obj)
    assert file.read_text(encoding='utf8').endswith('}\n')
    with raises(TypeError):
        dumps({'x': object()})


def test_envelope_keeps_timings_in_meta():
    report = envelope(
        {'price0': 1.0}, {'schema': 1}, 7, '0.1', 'philox', {'wall_ms': 3.0}
    )
    assert report['result'] == {'price0': 1.0}
    assert report['seed'] == 7
    assert report['rng'] == 'philox'
    assert report['meta']['wall_ms'] == 3.0
    assert 'timestamp' in report['meta']
    assert set(envelope({}, {}, None, '0.1', 'philox')['meta']) == {
        'timestamp'
    }
