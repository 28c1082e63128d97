from cdplab.pipeline import SimulationManager

from ._base import LabCommand, run_arguments


class Command(LabCommand):
    help = 'Print every template, capture the prints on every device and run quality control'

    def add_stage_arguments(self, parser):
        parser.add_argument('--inject-blur', type=float, default=0.0, metavar='FRACTION',
                            help='Defocus a seeded random fraction of the captures before QC')
        parser.add_argument('--blur-sigma', type=float, default=4.0, help='Gaussian sigma of the injected defocus')

    def run_stage(self, config, options):
        manager = SimulationManager(config, options['dataset'], options['threads'])
        df = manager.run(options['inject_blur'], options['blur_sigma'], run_arguments(options))
        discarded = int((~df['keep']).sum())
        self.stdout.write(self.style.SUCCESS(
            f"Simulated {len(df)} captures, {discarded} discarded by QC"
        ))
