"""Subcommands.

Each module defines one ``Command`` which ``create_app`` registers on the
argument parser, the way web apps register blueprints.
"""
import os

from specreg.config import Config
from specreg.errors import UsageError
from specreg.models import RegistrationConfig, SimilarityConfig
from specreg.utils import load_config_file


class Command:

    def __init__(self, name, help):
        self.name = name
        self.help = help
        self.handler = None
        self._arguments = []

    def argument(self, *flags, **kwargs):
        self._arguments.append((flags, kwargs))
        return self

    def route(self, func):
        self.handler = func
        return func

    def attach(self, subparsers):
        parser = subparsers.add_parser(self.name, help=self.help, description=self.help)
        for flags, kwargs in self._arguments:
            parser.add_argument(*flags, **kwargs)
        parser.set_defaults(handler=self.handler)
        return parser


def channel_arg(value):
    text = value.strip().lower()
    if text == 'mean':
        return 'mean'
    if not text.isdigit():
        raise UsageError(f'--channel expects an index or "mean", got {value!r}')
    return int(text)


def add_registration_flags(command):
    """Flags shared by every subcommand that runs a registration"""
    return (command
            .argument('--config', help='key = value registration settings file')
            .argument('--measure', choices=['ssd', 'cc', 'cr', 'mi', 'nmi', 'lmi', 'rc'],
                      type=str.lower, help='similarity measure')
            .argument('--levels', type=int, help='pyramid levels')
            .argument('--format', choices=['png', 'pgm'], default=None,
                      help='image format for written images'))


def registration_config(args):
    """Built-in defaults, then the --config file, then explicit flags"""
    cfg = RegistrationConfig(similarity=SimilarityConfig(measure=Config.DEFAULT_MEASURE))
    if getattr(args, 'config', None):
        cfg = cfg.with_overrides(load_config_file(args.config))
    overrides = {
        'measure': getattr(args, 'measure', None),
        'moving_channel': getattr(args, 'channel', None),
        'pyramid_levels': getattr(args, 'levels', None),
    }
    return cfg.with_overrides({k: v for k, v in overrides.items() if v is not None})


def output_dir(path):
    if os.path.exists(path) and not os.path.isdir(path):
        raise UsageError(f'output path {path} exists and is not a directory')
    os.makedirs(path, exist_ok=True)
    return path


def image_name(args, stem):
    extension = (getattr(args, 'format', None) or Config.OUTPUT_FORMAT).lower()
    if extension not in ('png', 'pgm'):
        raise UsageError(f'unsupported output format {extension!r}')
    return f'{stem}.{extension}'
