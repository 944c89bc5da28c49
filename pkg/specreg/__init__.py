import argparse
import logging
import sys

from specreg.config import Config
from specreg.errors import SpecregError, UsageError

logger = logging.getLogger(__name__)

__version__ = '1.0.0'


class ArgumentParser(argparse.ArgumentParser):
    """Raises UsageError instead of exiting so the app owns the exit code"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f'{self.prog}: {message}')


class App:

    def __init__(self, config=Config):
        self.config = config
        self.parser = ArgumentParser(
            prog='specreg',
            description='Two-stage multimodal non-rigid registration of document scans and spectral stacks')
        self.parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
        self.subparsers = self.parser.add_subparsers(dest='command', metavar='COMMAND')
        self.subparsers.required = True
        self.commands = {}

    def register_command(self, command):
        command.attach(self.subparsers)
        self.commands[command.name] = command

    def run(self, argv=None):
        """Parse ``argv`` and dispatch; returns the process exit code"""
        try:
            args = self.parser.parse_args(argv)
            return args.handler(args) or 0
        except SystemExit as e:
            # --help and --version
            return e.code if isinstance(e.code, int) else 0
        except SpecregError as e:
            logger.debug('Command failed', exc_info=True)
            print(f'error: {e}', file=sys.stderr)
            return e.exit_code
        except Exception as e:
            logger.exception('Unexpected failure')
            print(f'error: {e}', file=sys.stderr)
            return 2


def create_app(config=Config):
    logging.basicConfig(level=config.LOG_LEVEL.upper(), format=config.LOG_FORMAT, stream=sys.stderr)

    app = App(config)

    # Register commands
    from specreg.controllers.register import register_cmd
    from specreg.controllers.evaluate import evaluate_cmd
    from specreg.controllers.synth import synth_cmd
    from specreg.controllers.overlay import overlay_cmd

    app.register_command(register_cmd)
    app.register_command(evaluate_cmd)
    app.register_command(synth_cmd)
    app.register_command(overlay_cmd)

    return app
