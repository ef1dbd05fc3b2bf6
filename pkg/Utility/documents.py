import json
import os

from Utility.errors import InputError, SchemaError

VERSION = 1
SCHEMAS = ('model_graph', 'env', 'qoe', 'plan', 'schedule', 'trace', 'manifest', 'adapt_report')


# Wrap a body with the versioned document header
def make_document(schema, body):
    if schema not in SCHEMAS:
        raise SchemaError(f'Unknown schema {schema}')
    return {'schema': schema, 'version': VERSION, **body}


# Check the header of a loaded document and return it
def check_document(doc, schema):
    if not isinstance(doc, dict):
        raise SchemaError(f'Expected a {schema} document, got {type(doc).__name__}')
    if doc.get('schema') != schema:
        raise SchemaError(f'Expected schema "{schema}", got "{doc.get("schema")}"')
    if doc.get('version') != VERSION:
        raise SchemaError(f'Unsupported {schema} version {doc.get("version")}')
    return doc


# Read a document from disk
def read_document(path, schema):
    if not os.path.isfile(path):
        raise InputError(f'Document {path} does not exist')
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f'{path} is not valid JSON: {e}') from e
    return check_document(doc, schema)


# Write a document to disk, keys sorted so fixtures diff cleanly
def write_document(path, doc):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write('\n')


# Get a required field, raising SchemaError with the field path when missing
def require(doc, key, where=''):
    if key not in doc:
        raise SchemaError(f'Missing field "{key}"{" in " + where if where else ""}')
    return doc[key]
