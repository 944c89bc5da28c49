import csv
import io
import json
import os
import tempfile
from contextlib import contextmanager

from dotenv import dotenv_values

from specreg.errors import ConfigError, RegionFileError, UsageError
from specreg.models import RegionSpec


@contextmanager
def atomic_write(path, mode='wb'):
    """Write to a temporary sibling file and rename it over ``path`` on success"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp-', dir=directory)
    try:
        encoding = None if 'b' in mode else 'utf-8'
        newline = None if 'b' in mode else ''
        with os.fdopen(fd, mode, encoding=encoding, newline=newline) as handle:
            yield handle
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_json(path, data):
    """Write a JSON document atomically"""
    with atomic_write(path, 'w') as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
        handle.write('\n')
    return path


def write_trace_csv(path, trace):
    """Write optimizer trace rows (iteration, level, objective, step, grad_norm)"""
    with atomic_write(path, 'w') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['iteration', 'level', 'objective', 'step', 'grad_norm'])
        for iteration, level, objective, step, grad_norm in trace.rows():
            writer.writerow([int(iteration), int(level), repr(float(objective)), repr(float(step)),
                             repr(float(grad_norm))])
    return path


def read_trace_csv(path):
    """Read a trace CSV back into dictionaries of typed values"""
    with open(path, 'r', encoding='utf-8', newline='') as handle:
        return [{
            'iteration': int(row['iteration']),
            'level': int(row['level']),
            'objective': float(row['objective']),
            'step': float(row['step']),
            'grad_norm': float(row['grad_norm']),
        } for row in csv.DictReader(handle)]


def load_config_file(path):
    """Load a flat ``key = value`` configuration file"""
    if not os.path.isfile(path):
        raise UsageError(f'config file not found: {path}')
    try:
        values = dotenv_values(path, encoding='utf-8')
    except UnicodeDecodeError as e:
        raise ConfigError(f'config file {path} is not UTF-8: {e}') from None
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigError(f'config keys without a value in {path}: {", ".join(missing)}')
    return dict(values)


def parse_regions_file(path):
    """Parse ``name x y w h`` lines; blank lines and ``#`` comments are skipped"""
    if not os.path.isfile(path):
        raise UsageError(f'regions file not found: {path}')
    with open(path, 'r', encoding='utf-8') as handle:
        return parse_regions(handle.read())


def parse_regions(text):
    regions = []
    for number, line in enumerate(io.StringIO(text), start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        parts = line.split()
        if len(parts) < 5:
            raise RegionFileError(f'line {number}: expected "name x y w h", got {line!r}')
        name = ' '.join(parts[:-4])
        try:
            x, y, w, h = (int(v) for v in parts[-4:])
            regions.append(RegionSpec(name, (x, y, w, h)))
        except ValueError:
            raise RegionFileError(f'line {number}: rectangle must be four integers with positive size') from None
    if not regions:
        raise RegionFileError('regions file lists no regions')
    return regions


def slugify(name):
    """Turn a region name into a file-name fragment"""
    cleaned = ''.join(c.lower() if c.isalnum() else '_' for c in name.strip())
    return '_'.join(part for part in cleaned.split('_') if part) or 'region'
