from .helper import (
    atomic_write, write_json, write_trace_csv, read_trace_csv, load_config_file,
    parse_regions_file, parse_regions, slugify,
)

__all__ = [
    'atomic_write', 'write_json', 'write_trace_csv', 'read_trace_csv', 'load_config_file',
    'parse_regions_file', 'parse_regions', 'slugify',
]
