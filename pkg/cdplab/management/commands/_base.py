import sys
import logging

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError, CommandParser

from cdplab.config import load_config
from cdplab.errors import CdpLabError, ConfigError

logger = logging.getLogger('cdplab')

EXIT_USAGE = 1
EXIT_PIPELINE = 2
EXIT_ACCEPTANCE = 3

# Options every Django command carries; they are not part of a run record.
DJANGO_OPTIONS = {'verbosity', 'settings', 'pythonpath', 'traceback', 'no_color', 'force_color', 'skip_checks'}


def run_arguments(options):
    return {key: value for key, value in sorted(options.items()) if key not in DJANGO_OPTIONS}


class LabCommandParser(CommandParser):
    """Argument errors exit with the usage code instead of argparse's 2"""

    def error(self, message):
        if self.called_from_command_line:
            self.print_usage(sys.stderr)
            self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")
        raise CommandError(f"Error: {message}", returncode=EXIT_USAGE)


class LabCommand(BaseCommand):
    """Base of the cdp_* commands: config loading, shared flags and exit codes"""

    requires_system_checks = []

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.__class__ = LabCommandParser
        return parser

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Experiment config JSON (bundled defaults when omitted)')
        parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='PATH=VALUE',
                            help='Override one config field, e.g. --set train.lambda_l1=50')
        parser.add_argument('--threads', type=int, default=settings.CDP_LAB_THREADS,
                            help='Worker cap; results do not depend on it')
        parser.add_argument('--dataset', default='dataset', help='Dataset directory')
        self.add_stage_arguments(parser)

    def add_stage_arguments(self, parser):
        pass

    def run_stage(self, config, options):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            config = load_config(options['config'], options['overrides'])
            if options['threads'] < 1:
                raise ConfigError(f"--threads must be >= 1, got {options['threads']}")
            self.run_stage(config, options)
        except ConfigError as e:
            logger.error(f"{self.__module__.rsplit('.', 1)[-1]}: {e}")
            raise CommandError(str(e), returncode=EXIT_USAGE) from e
        except CdpLabError as e:
            logger.error(f"{self.__module__.rsplit('.', 1)[-1]} aborted: {e}")
            raise CommandError(str(e), returncode=EXIT_PIPELINE) from e
