from cdplab.pipeline import TrainingManager

from ._base import LabCommand, run_arguments


class Command(LabCommand):
    help = 'Train the synthesizer per (printer, device) cell, or the learned attack estimator'

    def add_stage_arguments(self, parser):
        parser.add_argument('--target', choices=['synthesizer', 'estimator'], default='synthesizer')
        parser.add_argument('--printer', dest='printers', action='append', default=[],
                            help='Restrict to this printer (repeatable)')
        parser.add_argument('--device', dest='devices', action='append', default=[],
                            help='Restrict to this device (repeatable)')

    def run_stage(self, config, options):
        manager = TrainingManager(config, options['dataset'], options['threads'])
        outputs = manager.run(options['target'], options['printers'], options['devices'], run_arguments(options))
        for cell, summary in outputs.items():
            self.stdout.write(f"{cell}: {summary['checkpoint']} ({summary['n_pairs']} pairs, "
                              f"final L1 {summary['final_loss_l1']:.5f})")
        self.stdout.write(self.style.SUCCESS(f"Trained {len(outputs)} {options['target']} model(s)"))
