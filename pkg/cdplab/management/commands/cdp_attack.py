from cdplab.attack import EstimatorKind
from cdplab.pipeline import AttackManager

from ._base import LabCommand, run_arguments


class Command(LabCommand):
    help = 'Estimate the templates from captured originals and produce the fakes'

    def add_stage_arguments(self, parser):
        parser.add_argument('--estimator', choices=[k.value for k in EstimatorKind],
                            help='Overrides attack.estimator')
        parser.add_argument('--attacker-printer', help='Overrides attack.attacker_printer')

    def run_stage(self, config, options):
        manager = AttackManager(config, options['dataset'], options['threads'])
        bers, fake_qc = manager.run(options['estimator'], options['attacker_printer'], run_arguments(options))
        if len(bers):
            discarded = int((~fake_qc['keep'].astype(bool)).sum())
            self.stdout.write(self.style.SUCCESS(
                f"Produced {len(bers)} fakes, mean bit error rate {bers['bit_error_rate'].mean():.4f}, "
                f"{len(fake_qc)} fake captures, {discarded} discarded by QC"
            ))
        else:
            self.stdout.write(self.style.WARNING("No fakes produced"))
