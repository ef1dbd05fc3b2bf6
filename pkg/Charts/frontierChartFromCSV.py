import os
import sys

_path_parent = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if _path_parent not in sys.path:
    sys.path.append(_path_parent)

import argparse

import matplotlib
import pandas as pd

from Utility import sharedUtils

config_path = os.path.join(_path_parent, 'config.ini')
FIELDS = ['lambda', 'latency_s', 'energy_j']


# Get the parser of the frontier chart
def get_parser():
    parser = argparse.ArgumentParser(description='Plot energy against latency of the frontier CSV files')
    parser.add_argument('--csv', nargs='+', required=True, help='Frontier CSV files written by edgeplan frontier')
    parser.add_argument('--no_labels', action='store_true', help='Do not annotate points with their lambda')
    parser.add_argument('--save', help='Write the chart to this image file instead of showing it')
    sharedUtils.parser_add_matplotlib_args(parser)
    return parser


# Read a frontier CSV, sorted by latency
def read_frontier(csv_path):
    sharedUtils.check_files_exist([csv_path])
    df = pd.read_csv(csv_path)
    missing = [f for f in FIELDS if f not in df.columns]
    if missing:
        raise ValueError(f'{csv_path} lacks the columns {", ".join(missing)}')
    return df.sort_values('latency_s').reset_index(drop=True)


# Plot a frontier as a step line with one marker per lambda
def plot_frontier(ax, df, label, color=None, labels=True):
    ax.step(df['latency_s'], df['energy_j'], where='post', color=color, label=label)
    ax.scatter(df['latency_s'], df['energy_j'], color=color)
    if labels:
        for _, row in df.iterrows():
            ax.annotate(f'λ={row["lambda"]:g}', (row['latency_s'], row['energy_j']), textcoords='offset points',
                        xytext=(4, 4), fontsize=8)


def main(argv=None):
    import matplotlib.pyplot as plt

    args = get_parser().parse_args(argv)
    fig, ax = plt.subplots()
    for csv_path in args.csv:
        plot_frontier(ax, read_frontier(csv_path), sharedUtils.get_file_name_from_path(csv_path), args.color,
                      not args.no_labels)
    sharedUtils.set_fig_ax(fig, ax, 'Energy-latency frontier', 'Iteration latency (s)', 'Energy (J)',
                           sharedUtils.get_file_name_from_path(__file__), legend=not args.no_legend,
                           no_grid=args.no_grid, maximize=not args.save, plt=plt)
    if args.save:
        fig.savefig(args.save)
    else:
        plt.show()


if __name__ == '__main__':
    sharedUtils.set_matplotlib_backend(matplotlib, config_path)
    main()
