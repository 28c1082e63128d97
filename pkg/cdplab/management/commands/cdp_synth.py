from cdplab.pipeline import SynthesisManager

from ._base import LabCommand, run_arguments


class Command(LabCommand):
    help = 'Synthesize x_hat references for the held-out templates from trained generators'

    def add_stage_arguments(self, parser):
        parser.add_argument('--checkpoint', help='Generator checkpoint; its provenance selects the cell')
        parser.add_argument('--printer', dest='printers', action='append', default=[])
        parser.add_argument('--device', dest='devices', action='append', default=[])

    def run_stage(self, config, options):
        manager = SynthesisManager(config, options['dataset'], options['threads'])
        outputs = manager.run(options['printers'], options['devices'], options['checkpoint'], run_arguments(options))
        total = sum(summary['images'] for summary in outputs.values())
        self.stdout.write(self.style.SUCCESS(f"Synthesized {total} images for {len(outputs)} cell(s)"))
