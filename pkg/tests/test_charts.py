import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt
import pandas as pd
import pytest

from Charts import frontierChartFromCSV, timelineChartFromSQL
from Utility import sharedUtils

ROWS = [['F:s0:0', 'A', 0.0, 1.0, 2.0, 0],
        ['A:s0>s1:0', 'wifi', 1.0, 1.5, 0.5, 0],
        ['F:s1:0', 'B', 1.5, 3.5, 4.0, 0],
        ['B:s1:0', 'B', 3.5, 7.5, 8.0, 0],
        ['F:s0:0', 'A', 8.0, 9.0, 2.0, 1]]


@pytest.fixture
def timeline_db(tmp_path):
    db = str(tmp_path / 'sim.db')
    sharedUtils.write_timeline_to_db(db, ROWS, 'sim_timeline', reset=True)
    return db


def test_timeline_data_frame(timeline_db):
    fields = ['start_s', 'finish_s']
    df = timelineChartFromSQL.get_timeline_data_frame(timeline_db, fields, 'sim_timeline')
    assert list(df.columns) == ['start_s', 'finish_s', 'task', 'resource', 'iteration']
    assert len(df) == 5
    first = timelineChartFromSQL.get_timeline_data_frame(timeline_db, fields, 'sim_timeline', iteration=0)
    assert len(first) == 4
    window = timelineChartFromSQL.get_timeline_data_frame(timeline_db, fields, 'sim_timeline', start=1.0, end=4.0)
    assert list(window['task']) == ['A:s0>s1:0', 'F:s1:0', 'B:s1:0']


def test_plot_timeline(timeline_db):
    fields = ['start_s', 'finish_s']
    df = timelineChartFromSQL.get_timeline_data_frame(timeline_db, fields, 'sim_timeline')
    fig, ax = plt.subplots()
    rows = timelineChartFromSQL.plot_timeline(ax, df, fields)
    assert rows == {'A': 0, 'B': 1, 'wifi': 2}
    # one bar collection per task kind and resource
    assert len(ax.collections) == 4
    plt.close(fig)


def test_timeline_main_saves(timeline_db, tmp_path):
    image = str(tmp_path / 'timeline.png')
    timelineChartFromSQL.main(['--db', timeline_db, '--save', image])
    assert (tmp_path / 'timeline.png').exists()
    plt.close('all')


@pytest.mark.parametrize('flags, has_legend', [([], True), (['--no_legend'], False)])
def test_timeline_legend_flag(timeline_db, tmp_path, flags, has_legend):
    timelineChartFromSQL.main(['--db', timeline_db, '--save', str(tmp_path / 'timeline.png'), *flags])
    legend = plt.gcf().axes[0].get_legend()
    assert (legend is not None) == has_legend
    if has_legend:
        assert [t.get_text() for t in legend.get_texts()] == ['activation', 'backward', 'forward']
    plt.close('all')


@pytest.fixture
def frontier_csv(tmp_path):
    path = str(tmp_path / 'frontier.csv')
    pd.DataFrame([(1.0, 2.0, 30.0), (0.1, 1.0, 50.0)], columns=frontierChartFromCSV.FIELDS).to_csv(path, index=False)
    return path


def test_read_frontier(frontier_csv, tmp_path):
    df = frontierChartFromCSV.read_frontier(frontier_csv)
    assert list(df['latency_s']) == [1.0, 2.0]
    bad = tmp_path / 'bad.csv'
    bad.write_text('lambda,latency_s\n0.1,1.0\n')
    with pytest.raises(ValueError):
        frontierChartFromCSV.read_frontier(str(bad))


def test_plot_frontier(frontier_csv, tmp_path):
    fig, ax = plt.subplots()
    frontierChartFromCSV.plot_frontier(ax, frontierChartFromCSV.read_frontier(frontier_csv), 'wifi')
    assert len(ax.texts) == 2
    plt.close(fig)
    image = str(tmp_path / 'frontier.png')
    frontierChartFromCSV.main(['--csv', frontier_csv, '--save', image])
    assert (tmp_path / 'frontier.png').exists()
    plt.close('all')
