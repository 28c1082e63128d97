from cdplab.pipeline import DatasetManager

from ._base import LabCommand, run_arguments


class Command(LabCommand):
    help = 'Generate the digital templates, the train/test split and the manifest'

    def run_stage(self, config, options):
        manager = DatasetManager(config, options['dataset'], options['threads'])
        manifest = manager.generate(run_arguments(options))
        self.stdout.write(self.style.SUCCESS(
            f"Generated {manifest.n_templates} templates ({len(manifest.train_ids)} train, "
            f"{len(manifest.test_ids)} test) in {manager.layout.root}"
        ))
