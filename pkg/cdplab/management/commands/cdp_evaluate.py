from django.core.management.base import CommandError

from cdplab.pipeline import EvaluationManager

from ._base import LabCommand, run_arguments, EXIT_ACCEPTANCE


class Command(LabCommand):
    help = 'AUC table, histograms and ROC/scatter plots from scores.csv'

    def add_stage_arguments(self, parser):
        parser.add_argument('--check', action='store_true',
                            help='Assert the acceptance criteria; exit 3 when one fails')

    def run_stage(self, config, options):
        manager = EvaluationManager(config, options['dataset'], options['threads'])
        table, report = manager.run(options['check'], run_arguments(options))
        self.stdout.write(f"{len(table.cells)} AUC cells, {len(table.missing)} missing")
        if report is None:
            self.stdout.write(self.style.SUCCESS(f"Results in {manager.layout.results}"))
            return
        for criterion in report.criteria:
            style = self.style.SUCCESS if criterion.passed else self.style.ERROR
            self.stdout.write(style(f"{criterion.name}: {'PASS' if criterion.passed else 'FAIL'} ({criterion.detail})"))
        if not report.passed:
            failed = [c.name for c in report.criteria if not c.passed]
            raise CommandError(f"Acceptance check failed: {', '.join(failed)}", returncode=EXIT_ACCEPTANCE)
