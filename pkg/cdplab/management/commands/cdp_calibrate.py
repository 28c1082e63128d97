from cdplab.pipeline import CalibrationManager

from ._base import LabCommand, run_arguments


class Command(LabCommand):
    help = 'Tune per-device degradation so AUC(pcorr, t) spans calibrate.target_auc_span along the ladder'

    def add_stage_arguments(self, parser):
        parser.add_argument('--out', default='calibration',
                            help='Directory for tuned_config.json and calibration_sweep.csv')

    def run_stage(self, config, options):
        manager = CalibrationManager(config, options['out'], options['threads'])
        multipliers = manager.run(run_arguments(options))
        for device_id, multiplier in multipliers.items():
            self.stdout.write(f"{device_id}: x{multiplier:.4f}")
        self.stdout.write(self.style.SUCCESS(f"Tuned config written to {manager.layout.root / 'tuned_config.json'}"))
