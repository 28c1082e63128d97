from cdplab.metrics import Metric
from cdplab.pipeline import ScoringManager
from cdplab.rocstat import Reference

from ._base import LabCommand, run_arguments


class Command(LabCommand):
    help = 'Score held-out originals and fakes against the references'

    def add_stage_arguments(self, parser):
        parser.add_argument('--references', nargs='+', choices=[r.value for r in Reference],
                            default=[r.value for r in Reference])
        parser.add_argument('--metrics', nargs='+', choices=[m.value for m in Metric],
                            default=[m.value for m in Metric])

    def run_stage(self, config, options):
        manager = ScoringManager(config, options['dataset'], options['threads'])
        df = manager.run(options['references'], options['metrics'], run_arguments(options))
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(df)} scores to {manager.layout.results / 'scores.csv'}"))
