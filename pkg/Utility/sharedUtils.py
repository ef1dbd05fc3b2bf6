import argparse
import configparser
import logging
import ntpath
import os
import sqlite3

import pandas as pd

from Utility.errors import InputError

TIMELINE_COLUMNS = ['task', 'resource', 'start_s', 'finish_s', 'energy_j', 'iteration']


# Set matplotlib backend from config file
def set_matplotlib_backend(matplotlib, config_file):
    matplotlib.use(get_single_value_from_config(config_file, 'SETTINGS', 'matplotlib_backend'))


# Get the filename from a path
def get_file_name_from_path(file_path):
    head, tail = ntpath.split(file_path)
    return tail or ntpath.basename(head)


# Get document file end from config file
def get_file_end_from_config(config_file):
    return get_single_value_from_config(config_file, 'COMMON', 'file_end', default='.json')


# Get db file end from config file
def get_db_end_from_config(config_file):
    return get_single_value_from_config(config_file, 'COMMON', 'db_end', default='.db')


# Get chart fields and table name from a config section
def get_chart_config_from_file(config_file, section):
    config = configparser.ConfigParser()
    config.read(config_file)
    section = config[section]
    return section['fields'].split(' '), section['table_name']


# Get single value from config file, default when the file, section or key is missing
def get_single_value_from_config(config_file, section, key, t=None, default=None):
    config = configparser.ConfigParser()
    config.read(config_file)
    if not config.has_option(section, key):
        if default is None:
            raise InputError(f'Missing [{section}] {key} in {config_file}')
        return default
    value = config[section][key]
    return value if t is None else t(value)


# Get a space separated list from config file
def get_list_from_config(config_file, section, key, t=float, default=None):
    value = get_single_value_from_config(config_file, section, key, default=default)
    if isinstance(value, str):
        return [t(v) for v in value.split()]
    return list(value)


# Configure logging for the command line tools
def set_logging(verbose=False):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')


# Add basic arguments to manage the db to a parser
def parser_add_db_args(parser, table_name=''):
    parser.add_argument('--db', help='sqlite3 database to write the task timeline to')
    parser.add_argument('--db_reset', action='store_true',
                        help=f'Drop the table {table_name} if exists and create it again before writing data')


# Add basic arguments to manage db_dir to a parser
def parser_add_db_dir_args(parser, file_end):
    db_grp = parser.add_mutually_exclusive_group(required=True)
    db_grp.add_argument('--db', nargs='+', default=[], help='sqlite3 databases to read from')
    db_grp.add_argument('--db_dir', nargs='+', default=[],
                        help=f'Paths to directory where to search for DB files. File\'s name have to end with "{file_end}"')


# Add the model, environment and QoE documents to a parser
def parser_add_doc_args(parser, qoe=True):
    parser.add_argument('--model', required=True, help='Model graph document')
    parser.add_argument('--env', required=True, help='Environment document')
    if qoe:
        parser.add_argument('--qoe', required=True, help='QoE document (latency target, lambda, workload)')


# Add basic arguments to manage matplotlib to a parser
def parser_add_matplotlib_args(parser, default_color=None):
    parser.add_argument('--color', help='Choose a custom color', default=default_color)
    parser.add_argument('--no_grid', help='Do not show the grid', action='store_true')
    parser.add_argument('--no_legend', help='Do not show the legend', action='store_true')


# Add the verbose flag to a parser
def parser_add_verbose_args(parser):
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging instead of progress bars')


# Check ends with proper file end
def check_file_end(file_path, file_end):
    return file_path.endswith(file_end)


# Get file paths with a given end from directories, sorted by name
def get_db_paths_from_dirs(db_dirs, file_end):
    db_paths = []
    for dir_name in db_dirs:
        if not os.path.isdir(dir_name):
            raise InputError(f'Directory {dir_name} does not exist')
        for file in sorted(os.listdir(dir_name)):
            if check_file_end(file, file_end):
                db_paths.append(os.path.join(dir_name, file))

    return db_paths


# Check db files exist
def check_db_files_exist(db_paths):
    for db_path in db_paths:
        if not os.path.isfile(db_path):
            raise InputError(f'DB file {db_path} does not exist')


# Check that input files exist
def check_files_exist(paths):
    for path in paths:
        if path is not None and not os.path.isfile(path):
            raise InputError(f'File {path} does not exist')


# Write timeline rows to a sqlite table
def write_timeline_to_db(db_path, rows, table_name, reset=False):
    with sqlite3.connect(db_path) as conn:
        c = conn.cursor()
        if reset:
            c.execute('DROP TABLE IF EXISTS ' + table_name)
            conn.commit()
        c.execute('CREATE TABLE IF NOT EXISTS ' + table_name +
                  ' (task TEXT, resource TEXT, start_s REAL, finish_s REAL, energy_j REAL, iteration INT)')
        c.executemany('INSERT INTO ' + table_name + ' VALUES (?, ?, ?, ?, ?, ?)', rows)
        conn.commit()


# Choose the right SQL query to execute, start and end are simulation seconds on the first field
def choose_sql_query(fields, table, start=None, end=None, where_data=None):
    sql_base = f'SELECT {",".join(fields)} FROM {table}'
    order_by = f'ORDER BY {fields[0]}'
    where_data = 'true' if not where_data else f' {where_data}'
    if start is not None and end is not None:
        return f'{sql_base} WHERE {where_data} AND {fields[0]} BETWEEN ? AND ? {order_by}', (start, end)
    if start is not None:
        return f'{sql_base} WHERE {where_data} AND {fields[0]} >= ? {order_by}', (start,)
    if end is not None:
        return f'{sql_base} WHERE {where_data} AND {fields[0]} <= ? {order_by}', (end,)
    return f'{sql_base} WHERE {where_data} {order_by}', ()


# Get data from a db
def get_data_from_db(db_path, fields, table, start=None, end=None, where_data=None):
    with sqlite3.connect(db_path) as conn:
        sql_query, sql_args = choose_sql_query(fields, table, start, end, where_data)
        return conn.execute(sql_query, sql_args).fetchall()


# Get data frame from data
def get_data_frame_from_data(data, fields):
    return pd.DataFrame(data, columns=fields)


# Write rows as a tab separated file
def write_rows_tsv(path, rows, columns=TIMELINE_COLUMNS):
    pd.DataFrame(rows, columns=columns).to_csv(path, sep='\t', index=False)


# Set options for fig, ax and plt
def set_fig_ax(fig, ax, title, x_label, y_label, w_title, legend=False, no_grid=False, maximize=False, plt=None):
    fig.tight_layout()
    ax.set_title(title)
    ax.set_xlabel(x_label)
    ax.set_ylabel(y_label)
    if legend:
        ax.legend()
    if not no_grid:
        ax.grid()
    if maximize and plt:
        fig_manager = plt.get_current_fig_manager()
        fig_manager.set_window_title(w_title)
        if hasattr(fig_manager, 'window'):
            fig_manager.window.showMaximized()


# Raise a usage error for invalid combinations of arguments
def validate_args(args):
    if getattr(args, 'start', None) is not None and getattr(args, 'end', None) is not None and args.start > args.end:
        raise argparse.ArgumentTypeError('--start must not be after --end')
