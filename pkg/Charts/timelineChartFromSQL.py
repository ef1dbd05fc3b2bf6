import os
import sys

_path_parent = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if _path_parent not in sys.path:
    sys.path.append(_path_parent)

import argparse

import matplotlib

from Utility import sharedUtils

config_path = os.path.join(_path_parent, 'config.ini')
BAR_HEIGHT = 0.8
# Task id prefixes written by the simulator
COLORS = {'F': 'tab:blue', 'B': 'tab:orange', 'A': 'tab:green', 'G': 'tab:red', 'R': 'tab:purple'}
LABELS = {'F': 'forward', 'B': 'backward', 'A': 'activation', 'G': 'gradient', 'R': 'gather'}


# Get the parser of the timeline chart
def get_parser(file_end):
    parser = argparse.ArgumentParser(description='Plot the simulated task timeline as a Gantt chart')
    sharedUtils.parser_add_db_dir_args(parser, file_end)
    parser.add_argument('--start', type=float, help='Plot tasks starting from this simulation second')
    parser.add_argument('--end', type=float, help='Plot tasks starting up to this simulation second')
    parser.add_argument('--iteration', type=int, help='Plot a single iteration')
    parser.add_argument('--save', help='Write the chart to this image file instead of showing it')
    sharedUtils.parser_add_matplotlib_args(parser)
    return parser


# Read the timeline of a db as a data frame
def get_timeline_data_frame(db_path, fields, table_name, start=None, end=None, iteration=None):
    columns = fields + [c for c in ('task', 'resource', 'iteration') if c not in fields]
    where_data = f'iteration = {int(iteration)}' if iteration is not None else None
    data = sharedUtils.get_data_from_db(db_path, columns, table_name, start, end, where_data)
    return sharedUtils.get_data_frame_from_data(data, columns)


# Draw one bar per task on the row of its resource
def plot_timeline(ax, df, fields, color=None):
    start_field, finish_field = fields[0], fields[1]
    resources = sorted(df['resource'].unique())
    rows = {r: i for i, r in enumerate(resources)}
    for kind, group in df.groupby(df['task'].str.split(':').str[0]):
        label = LABELS.get(kind, kind)
        for resource, tasks in group.groupby('resource'):
            bars = list(zip(tasks[start_field], tasks[finish_field] - tasks[start_field]))
            ax.broken_barh(bars, (rows[resource] - BAR_HEIGHT / 2, BAR_HEIGHT),
                           facecolors=color or COLORS.get(kind, 'tab:gray'), edgecolor='black', linewidth=0.3,
                           label=label)
            label = None
    ax.set_yticks(range(len(resources)))
    ax.set_yticklabels(resources)
    return rows


def main(argv=None):
    import matplotlib.pyplot as plt

    file_end = sharedUtils.get_db_end_from_config(config_path)
    fields, table_name = sharedUtils.get_chart_config_from_file(config_path, 'SIMULATOR')
    args = get_parser(file_end).parse_args(argv)
    sharedUtils.validate_args(args)

    # Get the DB files
    if args.db_dir:
        args.db = sharedUtils.get_db_paths_from_dirs(args.db_dir, file_end)
    else:
        sharedUtils.check_db_files_exist(args.db)

    for db_path in args.db:
        df = get_timeline_data_frame(db_path, fields, table_name, args.start, args.end, args.iteration)
        if df.empty:
            print(f'No data found in {db_path}')
            continue
        fig, ax = plt.subplots()
        plot_timeline(ax, df, fields, args.color)
        sharedUtils.set_fig_ax(fig, ax, sharedUtils.get_file_name_from_path(db_path), 'Time (s)', 'Resource',
                               sharedUtils.get_file_name_from_path(__file__), legend=not args.no_legend,
                               no_grid=args.no_grid, maximize=not args.save, plt=plt)
        if args.save:
            fig.savefig(args.save if len(args.db) == 1 else f'{sharedUtils.get_file_name_from_path(db_path)}_{args.save}')

    if not args.save:
        plt.show()


if __name__ == '__main__':
    sharedUtils.set_matplotlib_backend(matplotlib, config_path)
    main()
