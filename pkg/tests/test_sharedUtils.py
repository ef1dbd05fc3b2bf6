import json

import pytest

from Utility import sharedUtils
from Utility.documents import check_document, make_document, read_document, require, write_document
from Utility.errors import InputError, SchemaError


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'config.ini'
    path.write_text('[PLANNER]\ntopk = 3\nmerge_delta = 0.1\n\n[FRONTIER]\nlambdas = 0.5 1 2\n\n'
                    '[SIMULATOR]\nfields = start_s finish_s\ntable_name = timeline\n')
    return str(path)


def test_config_values(config_file):
    assert sharedUtils.get_single_value_from_config(config_file, 'PLANNER', 'topk', int) == 3
    assert sharedUtils.get_single_value_from_config(config_file, 'PLANNER', 'merge_delta', float) == 0.1
    assert sharedUtils.get_single_value_from_config(config_file, 'PLANNER', 'max_stages', int, default=0) == 0
    with pytest.raises(InputError):
        sharedUtils.get_single_value_from_config(config_file, 'SCHEDULER', 'chunks')
    assert sharedUtils.get_list_from_config(config_file, 'FRONTIER', 'lambdas') == [0.5, 1.0, 2.0]
    assert sharedUtils.get_list_from_config(config_file, 'FRONTIER', 'other', default=[1.0]) == [1.0]
    assert sharedUtils.get_chart_config_from_file(config_file, 'SIMULATOR') == (['start_s', 'finish_s'], 'timeline')
    assert sharedUtils.get_file_end_from_config(config_file) == '.json'


ROWS = [['F:s0:0', 'A', 0.0, 1.0, 2.0, 0],
        ['A:s0>s1:0', 'wifi', 1.0, 1.5, 0.5, 0],
        ['F:s1:0', 'B', 1.5, 3.5, 4.0, 0],
        ['F:s0:0', 'A', 4.0, 5.0, 2.0, 1]]


def test_timeline_db(tmp_path):
    db = str(tmp_path / 'timeline.db')
    sharedUtils.write_timeline_to_db(db, ROWS, 'sim_timeline', reset=True)
    assert len(sharedUtils.get_data_from_db(db, ['task'], 'sim_timeline')) == 4
    # appending keeps earlier rows, reset drops them
    sharedUtils.write_timeline_to_db(db, ROWS[:1], 'sim_timeline')
    assert len(sharedUtils.get_data_from_db(db, ['task'], 'sim_timeline')) == 5
    sharedUtils.write_timeline_to_db(db, ROWS, 'sim_timeline', reset=True)

    window = sharedUtils.get_data_from_db(db, ['start_s', 'task'], 'sim_timeline', start=1.0, end=2.0)
    assert window == [(1.0, 'A:s0>s1:0'), (1.5, 'F:s1:0')]
    later = sharedUtils.get_data_from_db(db, ['start_s'], 'sim_timeline', start=2.0)
    assert later == [(4.0,)]
    first = sharedUtils.get_data_from_db(db, ['start_s'], 'sim_timeline', where_data='iteration = 0')
    assert [r[0] for r in first] == [0.0, 1.0, 1.5]


def test_rows_tsv(tmp_path):
    path = str(tmp_path / 'timeline.tsv')
    sharedUtils.write_rows_tsv(path, ROWS)
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines[0].split('\t') == sharedUtils.TIMELINE_COLUMNS
    assert len(lines) == 5


def test_paths(tmp_path):
    (tmp_path / 'b.db').write_text('')
    (tmp_path / 'a.db').write_text('')
    (tmp_path / 'notes.txt').write_text('')
    paths = sharedUtils.get_db_paths_from_dirs([str(tmp_path)], '.db')
    assert [sharedUtils.get_file_name_from_path(p) for p in paths] == ['a.db', 'b.db']
    with pytest.raises(InputError):
        sharedUtils.get_db_paths_from_dirs([str(tmp_path / 'missing')], '.db')
    with pytest.raises(InputError):
        sharedUtils.check_files_exist([str(tmp_path / 'a.db'), str(tmp_path / 'missing.db')])
    sharedUtils.check_files_exist([None, str(tmp_path / 'a.db')])


def test_documents(tmp_path):
    path = str(tmp_path / 'nested' / 'qoe.json')
    doc = make_document('qoe', {'t_qoe': 1.0})
    write_document(path, doc)
    assert read_document(path, 'qoe') == doc
    with pytest.raises(SchemaError):
        read_document(path, 'plan')
    with pytest.raises(InputError):
        read_document(str(tmp_path / 'missing.json'), 'qoe')
    with pytest.raises(SchemaError):
        make_document('spreadsheet', {})

    broken = tmp_path / 'broken.json'
    broken.write_text('{"schema": ')
    with pytest.raises(SchemaError):
        read_document(str(broken), 'qoe')
    with pytest.raises(SchemaError):
        check_document(json.loads('{"schema": "qoe", "version": 99}'), 'qoe')
    with pytest.raises(SchemaError):
        check_document([], 'qoe')
    with pytest.raises(SchemaError) as e:
        require({}, 'devices', 'env')
    assert 'devices' in str(e.value)
