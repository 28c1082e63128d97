"""
Pipeline stages behind the cdp_* management commands.

Each manager reads the artifacts of the previous stages from the dataset
directory, writes its own outputs and leaves a run record under runs/.
Work items carry seeds derived from the experiment coordinates, so the
outputs do not depend on the number of threads.
"""

import copy
import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import align, attack, channel, metrics, pix2pix, rocstat
from .attack import EstimatorKind, EstimatorSpec
from .config import ExperimentConfig, write_config
from .errors import (
    InvalidArgumentError, MissingStageError, ProvenanceError, RegistrationFailedError,
    TrainingError, UndefinedCorrelationError,
)
from .imgcore import (
    DatasetLayout, DatasetManifest, Origin, PhysicalImage, QcEntry, Template, derive_seed,
    generate_dataset, load_image, load_manifest, persist_image, save_manifest, split_dataset,
    template_as_image,
)
from .metrics import Metric
from .rocstat import Reference, ScoreRecord
from .utils import StageTimer, parallel_map, write_run_record

logger = logging.getLogger('cdplab')

QC_LOG_COLUMNS = ['capture_path', 'keep', 'reason', 'injected', 'printer', 'device', 'origin',
                  'template_id', 'instance', 'repetition']
BER_COLUMNS = ['printer', 'attacker_printer', 'estimator', 'template_id', 'bit_error_rate']
SWEEP_COLUMNS = ['device', 'iteration', 'multiplier', 'psf_sigma', 'acq_noise_sigma', 'auc', 'auc_enrolled',
                 'target']
# Every template is printed once per printer.
PRINT_INSTANCE = 0


class StageManager:
    """Shared state of one command invocation"""

    command = ''

    def __init__(self, config: ExperimentConfig, dataset_dir, threads: int = 1):
        if threads < 1:
            raise InvalidArgumentError(f"threads must be >= 1, got {threads}")
        self.config = config
        self.layout = DatasetLayout(dataset_dir)
        self.threads = threads
        self.timer = StageTimer()

    @property
    def seed(self) -> int:
        return self.config.seed

    def relpath(self, path) -> str:
        return Path(path).relative_to(self.layout.root).as_posix()

    def load_dataset(self) -> Tuple[DatasetManifest, Dict[int, Template]]:
        """Manifest and templates written by cdp_gen, checked against the config"""
        if not self.layout.manifest.exists():
            raise MissingStageError(f"Dataset manifest {self.layout.manifest}", 'cdp_gen')
        manifest = load_manifest(self.layout)
        if manifest.template_size != self.config.dataset.template_size:
            raise ProvenanceError(
                f"Dataset holds {manifest.template_size}x{manifest.template_size} templates but the config "
                f"asks for {self.config.dataset.template_size}; rerun cdp_gen"
            )
        unknown = [p for p in self.config.printer_ids if p not in manifest.printer_ids]
        unknown += [d for d in self.config.device_ids if d not in manifest.device_ids]
        if unknown:
            raise ProvenanceError(f"Profiles {unknown} are not part of the dataset; rerun cdp_gen")

        loaded = parallel_map(lambda tid: load_image(self.layout.template(tid)), manifest.template_ids,
                              self.threads)
        return manifest, {t.id: t for t in loaded}

    def load_thresholds(self) -> Dict[str, Tuple[float, float]]:
        if not self.layout.qc_thresholds.exists():
            raise MissingStageError(f"QC thresholds {self.layout.qc_thresholds}", 'cdp_simulate')
        with open(self.layout.qc_thresholds, 'r', encoding='utf-8') as f:
            data = json.load(f)
        return {device: (values['blur_threshold'], values['contrast_threshold'])
                for device, values in data.items()}

    def kept_captures(self, index: Dict[str, QcEntry], printer_id: str, device_id: str, origin: Origin,
                      template_id: int, instance: int = PRINT_INSTANCE) -> List[Path]:
        """Capture paths that passed QC, in repetition order"""
        kept = []
        rep = 0
        while True:
            path = self.layout.capture(printer_id, device_id, origin, template_id, instance, rep)
            entry = index.get(self.relpath(path))
            if entry is None:
                return kept
            if entry.keep:
                kept.append(path)
            rep += 1

    def register(self, capture: PhysicalImage, template: Template) -> align.Registration:
        settings = self.config.align
        return align.register(capture, template, settings.search_radius, settings.peak_floor, settings.subpixel)

    def capture_and_screen(self, inst: channel.PhysicalInstance, printer_id: str,
                           thresholds: Dict[str, Tuple[float, float]], inject_fraction: float = 0.0,
                           inject_sigma: float = 4.0) -> List[List]:
        """Capture one physical instance on every device, screen it and persist all captures"""
        origin = inst.origin
        rows = []
        for device in self.config.devices:
            captures = channel.capture_repeats(
                inst, device, self.config.dataset.n_reps,
                derive_seed(self.seed, 'capture', printer_id, device.id, origin.value, inst.template_id, inst.instance),
            )
            injected = set()
            if inject_fraction > 0:
                for rep, capture in enumerate(captures):
                    rng = np.random.default_rng(derive_seed(self.seed, 'inject', printer_id, device.id, origin.value,
                                                            inst.template_id, inst.instance, rep))
                    if rng.uniform() < inject_fraction:
                        captures[rep] = channel.inject_blur(capture, inject_sigma)
                        injected.add(rep)

            blur_threshold, contrast_threshold = thresholds[device.id]
            result = channel.quality_control(captures, blur_threshold, contrast_threshold)
            reasons = {id(capture): why for capture, why in result.discarded}
            for rep, capture in enumerate(captures):
                path = self.layout.capture(printer_id, device.id, origin, inst.template_id, inst.instance, rep)
                persist_image(capture, path)
                why = reasons.get(id(capture), ())
                rows.append([self.relpath(path), not why, '+'.join(why), rep in injected, printer_id, device.id,
                             origin.value, inst.template_id, inst.instance, rep])
        return rows

    def write_qc_log(self, rows: List[List], path) -> pd.DataFrame:
        df = pd.DataFrame(rows, columns=QC_LOG_COLUMNS)
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False)
        for device, group in df.groupby('device', sort=True):
            rate = 1.0 - group['keep'].mean()
            logger.info(f"QC {device}: discarded {int((~group['keep']).sum())}/{len(group)} captures ({rate:.1%})")
        return df

    def finish(self, arguments: Dict, outputs: Dict) -> Dict:
        return write_run_record(self.layout.run_record(self.command), self.command, arguments,
                                {'master': self.seed}, self.timer, outputs)


class DatasetManager(StageManager):
    """Templates, split and manifest"""

    command = 'cdp_gen'

    def generate(self, arguments: Optional[Dict] = None) -> DatasetManifest:
        settings = self.config.dataset
        start = time.time()
        templates, manifest = generate_dataset(
            self.seed, settings.n_templates, settings.template_size, settings.black_fraction,
            printer_ids=self.config.printer_ids, device_ids=self.config.device_ids,
        )
        manifest = split_dataset(manifest, settings.train_fraction, derive_seed(self.seed, 'split'))
        parallel_map(lambda t: persist_image(t, self.layout.template(t.id)), templates, self.threads)
        save_manifest(manifest, self.layout)
        self.timer.lap('generate', start)

        logger.info(f"Dataset at {self.layout.root}: {len(manifest.train_ids)} train / "
                    f"{len(manifest.test_ids)} test templates")
        self.finish(arguments or {}, {
            'manifest': self.relpath(self.layout.manifest),
            'n_templates': manifest.n_templates,
            'n_train': len(manifest.train_ids),
            'n_test': len(manifest.test_ids),
        })
        return manifest


class SimulationManager(StageManager):
    """Original prints, their captures and quality control"""

    command = 'cdp_simulate'

    def calibrate_thresholds(self, manifest: DatasetManifest,
                             templates: Dict[int, Template]) -> Dict[str, Tuple[float, float]]:
        """
        Per-device QC thresholds from a clean calibration run, unless the config fixes them.

        The run prints the first train templates and reprints an Otsu estimate of each,
        so the thresholds cover clean originals and clean fakes alike.
        """
        qc = self.config.qc
        if qc.blur_threshold is not None and qc.contrast_threshold is not None:
            return {d.id: (qc.blur_threshold, qc.contrast_threshold) for d in self.config.devices}

        ids = list(manifest.train_ids)[:qc.calibration_templates]
        items = [(p.id, tid) for p in self.config.printers for tid in ids]
        source = self.config.device(self.config.attack.source_device)
        spec = EstimatorSpec(EstimatorKind.THRESHOLD_OTSU, threshold=self.config.attack.threshold)

        def clean_run(item):
            printer_id, tid = item
            template = templates[tid]
            original = channel.print_template(template, self.config.printer(printer_id),
                                              derive_seed(self.seed, 'qc-calibration', printer_id, tid))
            prints = [original]
            probe, _ = channel.acquire(original, source,
                                       derive_seed(self.seed, 'qc-calibration', 'probe', printer_id, tid), 0)
            try:
                t_hat = attack.estimate_template(self.register(probe, template).aligned, spec,
                                                 (template.height, template.width))
                attacker = self.config.printer(self.config.attack.attacker_printer or printer_id)
                prints.append(attack.make_fake(t_hat, attacker,
                                               derive_seed(self.seed, 'qc-calibration', 'fake', printer_id, tid)))
            except RegistrationFailedError:
                logger.warning(f"QC calibration: {printer_id} template {tid} did not register, no clean fake")
            return len(prints) - 1, {
                device.id: [
                    capture
                    for inst in prints
                    for capture in channel.capture_repeats(
                        inst, device, self.config.dataset.n_reps,
                        derive_seed(self.seed, 'qc-calibration', printer_id, device.id, inst.origin.value, tid),
                    )
                ]
                for device in self.config.devices
            }

        runs = parallel_map(clean_run, items, self.threads)
        n_fakes = sum(n for n, _ in runs)
        thresholds = {}
        for device in self.config.devices:
            clean = [capture for _, run in runs for capture in run[device.id]]
            blur, contrast = channel.calibrate_qc_thresholds(clean, qc.percentile, qc.margin)
            if qc.blur_threshold is not None:
                blur = qc.blur_threshold
            if qc.contrast_threshold is not None:
                contrast = qc.contrast_threshold
            thresholds[device.id] = (blur, contrast)
            logger.info(f"QC thresholds {device.id}: blur={blur:.6f} contrast={contrast:.6f} "
                        f"({len(clean)} clean captures of {len(runs)} originals and {n_fakes} fakes)")
        return thresholds

    def run(self, inject_fraction: float = 0.0, inject_sigma: float = 4.0,
            arguments: Optional[Dict] = None) -> pd.DataFrame:
        if not 0.0 <= inject_fraction < 1.0:
            raise InvalidArgumentError(f"inject_fraction must lie in [0, 1), got {inject_fraction}")
        manifest, templates = self.load_dataset()

        start = time.time()
        thresholds = self.calibrate_thresholds(manifest, templates)
        self.layout.qc_thresholds.parent.mkdir(parents=True, exist_ok=True)
        with open(self.layout.qc_thresholds, 'w', encoding='utf-8') as f:
            json.dump({device: {'blur_threshold': blur, 'contrast_threshold': contrast}
                       for device, (blur, contrast) in thresholds.items()}, f, indent=2, sort_keys=True)
            f.write('\n')
        self.timer.lap('qc_calibration', start)

        start = time.time()
        items = [(p.id, tid) for p in self.config.printers for tid in manifest.template_ids]

        def simulate(item):
            printer_id, tid = item
            inst = channel.print_template(templates[tid], self.config.printer(printer_id),
                                          derive_seed(self.seed, 'print', printer_id, tid, PRINT_INSTANCE),
                                          instance=PRINT_INSTANCE)
            persist_image(inst.latent, self.layout.physical(printer_id, Origin.ORIGINAL, tid, PRINT_INSTANCE))
            return self.capture_and_screen(inst, printer_id, thresholds, inject_fraction, inject_sigma)

        rows = [row for rows in parallel_map(simulate, items, self.threads) for row in rows]
        df = self.write_qc_log(rows, self.layout.qc_log)
        self.timer.lap('print_and_capture', start)

        self.finish(arguments or {}, {
            'qc_log': self.relpath(self.layout.qc_log),
            'qc_thresholds': self.relpath(self.layout.qc_thresholds),
            'n_captures': len(df),
            'n_discarded': int((~df['keep']).sum()),
        })
        return df


class AttackManager(StageManager):
    """Template estimation from captured originals, reprinting and capture of the fakes"""

    command = 'cdp_attack'

    def estimator_for(self, printer_id: str, kind: EstimatorKind) -> EstimatorSpec:
        if kind == EstimatorKind.THRESHOLD_OTSU:
            return EstimatorSpec(kind, threshold=self.config.attack.threshold)
        path = self.layout.estimator_dir(printer_id) / 'generator.ckpt'
        if not path.exists():
            raise MissingStageError(f"Estimator checkpoint {path}",
                                    f'cdp_train --target estimator --printer {printer_id}')
        network, header = pix2pix.load_generator(path)
        return EstimatorSpec(kind, network=network, threshold=self.config.attack.threshold,
                             train_ids=tuple(header.get('train_ids', ())))

    def run(self, estimator: Optional[str] = None, attacker_printer: Optional[str] = None,
            arguments: Optional[Dict] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """Bit error rates per fake and the QC log of the fake captures"""
        manifest, templates = self.load_dataset()
        if not self.layout.qc_log.exists():
            raise MissingStageError("QC log of the original captures", 'cdp_simulate')
        thresholds = self.load_thresholds()
        index = {entry.capture_path: entry for entry in manifest.qc_log}
        kind = EstimatorKind(estimator or self.config.attack.estimator)
        source = self.config.attack.source_device
        settings = self.config.align
        size = manifest.template_size

        qc_rows, ber_rows, failures = [], [], []
        for printer_id in self.config.printer_ids:
            start = time.time()
            spec = self.estimator_for(printer_id, kind)
            attacker = self.config.printer(attacker_printer or self.config.attack.attacker_printer or printer_id)

            probes, probe_templates, probe_paths = [], [], []
            for tid in manifest.test_ids:
                kept = self.kept_captures(index, printer_id, source, Origin.ORIGINAL, tid)
                if not kept:
                    logger.warning(f"No QC-kept {source} capture of {printer_id} template {tid}; no fake produced")
                    continue
                probes.append(load_image(kept[0]))
                probe_templates.append(templates[tid])
                probe_paths.append(self.relpath(kept[0]))

            batch = align.batch_register(probes, probe_templates, settings.search_radius, settings.peak_floor,
                                         probe_paths, settings.subpixel, self.threads)
            failures.extend(batch.failures)
            records = attack.run_attack([r.aligned for r in batch.succeeded], spec, attacker, self.seed,
                                        expected_shape=(size, size), threads=self.threads)

            def reprint(record):
                persist_image(record.t_hat, self.layout.estimated(printer_id, record.template_id))
                persist_image(record.fake.latent,
                              self.layout.physical(printer_id, Origin.FAKE, record.template_id, record.fake.instance))
                return self.capture_and_screen(record.fake, printer_id, thresholds)

            qc_rows.extend(row for rows in parallel_map(reprint, records, self.threads) for row in rows)
            bers = [attack.bit_error_rate(r.t_hat, templates[r.template_id]) for r in records]
            ber_rows.extend([printer_id, attacker.id, kind.value, r.template_id, ber] for r, ber in zip(records, bers))
            self.timer.lap(f'attack_{printer_id}', start)
            if bers:
                logger.info(f"Attack on {printer_id} from {source} captures: {len(records)} fakes, "
                            f"mean bit error rate {np.mean(bers):.4f}")

        fake_qc = self.write_qc_log(qc_rows, self.layout.fake_qc_log)
        ber_path = self.layout.root / 'estimated' / 'bit_error_rates.csv'
        ber_path.parent.mkdir(parents=True, exist_ok=True)
        bers = pd.DataFrame(ber_rows, columns=BER_COLUMNS)
        bers.to_csv(ber_path, index=False, float_format='%.12f')
        failure_path = self.layout.root / 'estimated' / 'registration_failures.csv'
        align.write_failure_log(failures, failure_path)

        self.finish(arguments or {}, {
            'estimator': kind.value,
            'fake_qc_log': self.relpath(self.layout.fake_qc_log),
            'bit_error_rates': self.relpath(ber_path),
            'registration_failures': len(failures),
            'n_fakes': len(bers),
            'n_fake_captures': len(fake_qc),
            'n_fake_discarded': int((~fake_qc['keep']).sum()) if len(fake_qc) else 0,
        })
        return bers, fake_qc


class TrainingManager(StageManager):
    """Synthesizer per (printer, device) cell, or the learned attack estimator per printer"""

    command = 'cdp_train'

    def registered_originals(self, manifest: DatasetManifest, templates: Dict[int, Template],
                             printer_id: str, device_id: str) -> List[Tuple[Template, PhysicalImage]]:
        """(template, registered enrollment capture) over the train split"""
        index = {entry.capture_path: entry for entry in manifest.qc_log}

        def pair(tid):
            kept = self.kept_captures(index, printer_id, device_id, Origin.ORIGINAL, tid)
            if not kept:
                return None
            try:
                return templates[tid], self.register(load_image(kept[0]), templates[tid]).aligned
            except RegistrationFailedError:
                return None

        pairs = [p for p in parallel_map(pair, manifest.train_ids, self.threads) if p is not None]
        n_pairs = self.config.train.n_pairs
        return pairs[:n_pairs] if n_pairs else pairs

    def _cells(self, printers: Sequence[str], devices: Sequence[str]) -> List[Tuple[str, str]]:
        printers = list(printers) or self.config.printer_ids
        devices = list(devices) or self.config.device_ids
        for printer_id in printers:
            self.config.printer(printer_id)
        for device_id in devices:
            self.config.device(device_id)
        return [(p, d) for p in printers for d in devices]

    def run(self, target: str = 'synthesizer', printers: Sequence[str] = (), devices: Sequence[str] = (),
            arguments: Optional[Dict] = None) -> Dict[str, Dict]:
        manifest, templates = self.load_dataset()
        if not self.layout.qc_log.exists():
            raise MissingStageError("QC log of the original captures", 'cdp_simulate')

        if target == 'estimator':
            source = self.config.attack.source_device
            cells = [(self.config.printer(p).id, source) for p in (list(printers) or self.config.printer_ids)]
        elif target == 'synthesizer':
            cells = self._cells(printers, devices)
        else:
            raise InvalidArgumentError(f"Unknown training target '{target}'")

        outputs = {}
        for printer_id, device_id in cells:
            start = time.time()
            pairs = self.registered_originals(manifest, templates, printer_id, device_id)
            if not pairs:
                raise TrainingError(f"No training pairs for {printer_id}/{device_id} survived QC and registration")
            provenance = {'printer': printer_id, 'device': device_id, 'dataset_seed': manifest.seed}

            if target == 'estimator':
                out_dir = self.layout.estimator_dir(printer_id)
                cfg = replace(self.config.train, epochs=self.config.estimator_epochs)
                result = attack.train_estimator([(x, t) for t, x in pairs], cfg, self.config.generator,
                                                out_dir=out_dir, provenance=provenance)
            else:
                out_dir = self.layout.model_dir(printer_id, device_id)
                result = pix2pix.train(pairs, self.config.train, self.config.generator, self.config.discriminator,
                                       out_dir=out_dir, provenance=provenance)

            final = result.history.iloc[-1]
            self.timer.lap(f'{target}_{printer_id}_{device_id}', start)
            logger.info(f"Trained {target} for {printer_id}/{device_id} on {len(pairs)} pairs: "
                        f"loss_l1={final['loss_l1']:.5f}")
            outputs[f'{printer_id}/{device_id}'] = {
                'checkpoint': self.relpath(out_dir / 'generator.ckpt'),
                'n_pairs': len(pairs),
                'steps': result.steps,
                'final_loss_l1': float(final['loss_l1']),
            }

        self.finish(arguments or {}, outputs)
        return outputs


class SynthesisManager(StageManager):
    """x_hat references for the held-out templates"""

    command = 'cdp_synth'

    def _cells(self, printers: Sequence[str], devices: Sequence[str], checkpoint=None) -> List[Tuple[str, str, Path]]:
        if checkpoint is None:
            return [(p, d, self.layout.model_dir(p, d) / 'generator.ckpt')
                    for p in (list(printers) or self.config.printer_ids)
                    for d in (list(devices) or self.config.device_ids)]

        _, header = pix2pix.load_generator(checkpoint)
        provenance = header.get('provenance', {})
        printer_id, device_id = provenance.get('printer'), provenance.get('device')
        if (printers and printer_id not in printers) or (devices and device_id not in devices):
            raise ProvenanceError(
                f"{checkpoint} was trained for {printer_id}/{device_id}, "
                f"not {'/'.join(printers) or '*'}/{'/'.join(devices) or '*'}"
            )
        return [(printer_id, device_id, Path(checkpoint))]

    def run(self, printers: Sequence[str] = (), devices: Sequence[str] = (), checkpoint=None,
            arguments: Optional[Dict] = None) -> Dict[str, Dict]:
        manifest, templates = self.load_dataset()
        test_templates = [templates[tid] for tid in manifest.test_ids]

        outputs = {}
        for printer_id, device_id, path in self._cells(printers, devices, checkpoint):
            if not path.exists():
                raise MissingStageError(f"Generator checkpoint {path}",
                                        f'cdp_train --printer {printer_id} --device {device_id}')
            start = time.time()
            generator, header = pix2pix.load_generator(path)
            provenance = header.get('provenance', {})
            if (provenance.get('printer'), provenance.get('device')) != (printer_id, device_id):
                raise ProvenanceError(
                    f"{path} was trained for {provenance.get('printer')}/{provenance.get('device')}, "
                    f"not {printer_id}/{device_id}"
                )
            overlap = sorted(set(header.get('train_ids', ())) & set(manifest.test_ids))
            if overlap:
                raise ProvenanceError(f"{path} was trained on held-out templates {overlap[:5]}")

            out_dir = self.layout.synthetic_dir(printer_id, device_id)
            paths = pix2pix.synthesize_all(generator, test_templates, out_dir, printer_id, device_id, self.threads)
            record = {
                'printer': printer_id,
                'device': device_id,
                'checkpoint': str(path),
                'epoch': header.get('epoch'),
                'train_ids': header.get('train_ids', []),
                'template_ids': [t.id for t in test_templates],
            }
            with open(out_dir / 'provenance.json', 'w', encoding='utf-8') as f:
                json.dump(record, f, indent=2, sort_keys=True)
                f.write('\n')
            self.timer.lap(f'synth_{printer_id}_{device_id}', start)
            outputs[f'{printer_id}/{device_id}'] = {'images': len(paths), 'dir': self.relpath(out_dir)}

        self.finish(arguments or {}, outputs)
        return outputs


class ScoringManager(StageManager):
    """Similarity of every held-out probe to the requested references"""

    command = 'cdp_score'

    def check_synthetic(self, manifest: DatasetManifest, printer_id: str, device_id: str) -> bool:
        """False when the cell has no x_hat; raises when x_hat belongs elsewhere or saw the test split"""
        path = self.layout.synthetic_dir(printer_id, device_id) / 'provenance.json'
        if not path.exists():
            return False
        with open(path, 'r', encoding='utf-8') as f:
            provenance = json.load(f)
        if (provenance.get('printer'), provenance.get('device')) != (printer_id, device_id):
            raise ProvenanceError(
                f"{path}: x_hat was synthesized for {provenance.get('printer')}/{provenance.get('device')}, "
                f"not {printer_id}/{device_id}"
            )
        overlap = sorted(set(provenance.get('train_ids', ())) & set(manifest.test_ids))
        if overlap:
            raise ProvenanceError(f"{path}: generator was trained on held-out templates {overlap[:5]}")
        return True

    def score_template(self, index: Dict[str, QcEntry], template: Template, printer_id: str, device_id: str,
                       references: Sequence[Reference], metric_names: Sequence[Metric]):
        """Score records and registration failures of one (printer, device, template)"""
        originals = self.kept_captures(index, printer_id, device_id, Origin.ORIGINAL, template.id)
        if not originals:
            logger.warning(f"No QC-kept original capture for {printer_id}/{device_id} template {template.id}")
            return [], []
        fakes = self.kept_captures(index, printer_id, device_id, Origin.FAKE, template.id)

        registered, failures = {}, []
        for path in originals + fakes:
            try:
                registered[path] = self.register(load_image(path), template).aligned
            except RegistrationFailedError as e:
                failures.append(align.RegistrationFailure(self.relpath(path), template.id, e.peak, 'peak below floor'))

        # The first kept repetition of the original is its enrollment.
        enrollment = registered.get(originals[0])
        refs = {}
        if Reference.TEMPLATE in references:
            refs[Reference.TEMPLATE] = template_as_image(template)
        if Reference.SYNTHETIC in references:
            refs[Reference.SYNTHETIC] = load_image(self.layout.synthetic(printer_id, device_id, template.id)).pixels
        if Reference.ENROLLED in references:
            if enrollment is None:
                logger.warning(f"Enrollment of {printer_id}/{device_id} template {template.id} failed registration")
            else:
                refs[Reference.ENROLLED] = enrollment.pixels

        probes = [(Origin.ORIGINAL, path) for path in originals[1:]] + [(Origin.FAKE, path) for path in fakes]
        margin = self.config.align.margin
        records = []
        for origin, path in probes:
            probe = registered.get(path)
            if probe is None:
                continue
            for reference, ref_pixels in refs.items():
                try:
                    values = metrics.score_pair(probe.pixels, ref_pixels, margin, self.config.ssim)
                except UndefinedCorrelationError as e:
                    logger.warning(f"Skipping {self.relpath(path)} against {reference.value}: {e}")
                    continue
                enrolled = reference == Reference.ENROLLED
                for metric in metric_names:
                    records.append(ScoreRecord(
                        printer_id=printer_id, device_id=device_id, reference=reference, metric=metric,
                        origin=origin, template_id=template.id, instance=probe.instance,
                        repetition=probe.repetition, score=values[metric],
                        enrollment_template_id=template.id if enrolled else None,
                        enrollment_instance=PRINT_INSTANCE if enrolled else None,
                    ))
        return records, failures

    def run(self, references: Sequence[str] = (), metric_names: Sequence[str] = (),
            arguments: Optional[Dict] = None) -> pd.DataFrame:
        manifest, templates = self.load_dataset()
        if not self.layout.qc_log.exists():
            raise MissingStageError("QC log of the original captures", 'cdp_simulate')
        if not self.layout.fake_qc_log.exists():
            raise MissingStageError("QC log of the fake captures", 'cdp_attack')
        references = [Reference(r) for r in (references or [r.value for r in Reference])]
        metric_names = [Metric(m) for m in (metric_names or [m.value for m in Metric])]
        cells = [(p, d) for p in self.config.printer_ids for d in self.config.device_ids]
        synthetic = set()
        if Reference.SYNTHETIC in references:
            synthetic = {cell for cell in cells if self.check_synthetic(manifest, *cell)}
            if not synthetic:
                raise MissingStageError("Synthetic references (x_hat)", 'cdp_synth')
            for printer_id, device_id in sorted(set(cells) - synthetic):
                logger.warning(f"No x_hat for {printer_id}/{device_id}; scoring it without the xhat reference")

        def score(item):
            printer_id, device_id, tid = item
            cell_references = [r for r in references
                               if r != Reference.SYNTHETIC or (printer_id, device_id) in synthetic]
            return self.score_template(index, templates[tid], printer_id, device_id, cell_references, metric_names)

        start = time.time()
        index = {entry.capture_path: entry for entry in manifest.qc_log}
        items = [(p, d, tid) for p, d in cells for tid in manifest.test_ids]
        results = parallel_map(score, items, self.threads)
        records = [r for recs, _ in results for r in recs]
        failures = [f for _, fails in results for f in fails]
        self.timer.lap('score', start)

        scores_path = self.layout.results / 'scores.csv'
        df = rocstat.write_scores_csv(records, scores_path)
        failure_path = self.layout.results / 'registration_failures.csv'
        align.write_failure_log(failures, failure_path)
        logger.info(f"Wrote {len(df)} scores to {scores_path} ({len(failures)} captures failed registration)")

        self.finish(arguments or {}, {
            'scores': self.relpath(scores_path),
            'n_scores': len(df),
            'references': [r.value for r in references],
            'metrics': [m.value for m in metric_names],
            'registration_failures': len(failures),
        })
        return df


class EvaluationManager(StageManager):
    """AUC table, histograms, ROC and scatter plots, acceptance report"""

    command = 'cdp_evaluate'

    def run(self, check: bool = False, arguments: Optional[Dict] = None) -> Tuple[rocstat.AucTable,
                                                                                 Optional[rocstat.AcceptanceReport]]:
        scores_path = self.layout.results / 'scores.csv'
        if not scores_path.exists():
            raise MissingStageError(f"Scores {scores_path}", 'cdp_score')
        df = rocstat.read_scores_csv(scores_path)
        settings = self.config.evaluate
        results = self.layout.results

        start = time.time()
        table = rocstat.auc_table(df, self.config.printer_ids, self.config.device_ids,
                                  metrics=sorted(df['metric'].unique()), references=sorted(df['reference'].unique()))
        table.write_json(results / 'auc_table.json')

        sets = rocstat.score_sets(df)
        rows, histograms = [], {}
        for key, s in sets.items():
            histograms['/'.join(key)] = rocstat.histogram_export(s, settings.n_bins)
            if key not in table.cells:
                continue
            area, u_area = table.cells[key], rocstat.mann_whitney_auc(s)
            if abs(area - u_area) > 1e-9:
                logger.warning(f"AUC {'/'.join(key)}: trapezoid {area:.12f} differs from Mann-Whitney {u_area:.12f}")
            rows.append(list(key) + [area, u_area, s.positives.size, s.negatives.size])
            rocstat.roc_svg(s, results / 'roc' / f"{'_'.join(key)}.svg")
        pd.DataFrame(rows, columns=rocstat.CELL_KEYS + ['auc', 'mann_whitney_auc', 'n_original', 'n_fake']).to_csv(
            results / 'auc_cells.csv', index=False, float_format='%.12f')
        with open(results / 'histograms.json', 'w', encoding='utf-8') as f:
            json.dump(histograms, f, indent=2, sort_keys=True)
            f.write('\n')

        for printer_id in self.config.printer_ids:
            for reference in sorted(df['reference'].unique()):
                try:
                    points = rocstat.scatter_export(df, printer_id, reference)
                except InvalidArgumentError as e:
                    logger.info(f"No scatter for {printer_id}/{reference}: {e}")
                    continue
                (results / 'scatter').mkdir(parents=True, exist_ok=True)
                points.to_csv(results / 'scatter' / f'{printer_id}_{reference}.csv', index=False, float_format='%.12f')
                rocstat.scatter_svg(df, printer_id, results / 'scatter' / f'{printer_id}_{reference}.svg', reference)
        self.timer.lap('evaluate', start)

        report = None
        if check:
            report = rocstat.acceptance_check(table, self.config.printer_ids, self.config.ladder,
                                              settings.inversion_tolerance, settings.min_gain, settings.gain_below)
            with open(results / 'acceptance.json', 'w', encoding='utf-8') as f:
                json.dump(report.to_dict(), f, indent=2, sort_keys=True)
                f.write('\n')

        self.finish(arguments or {}, {
            'auc_table': self.relpath(results / 'auc_table.json'),
            'cells': len(table.cells),
            'missing_cells': ['/'.join(key) for key in table.missing],
            'acceptance': report.to_dict() if report else None,
        })
        return table, report


class CalibrationManager(StageManager):
    """Tune the device ladder on a reduced in-memory pipeline"""

    command = 'cdp_calibrate'

    def population(self) -> List[Tuple[str, Template, channel.PhysicalInstance, channel.PhysicalInstance]]:
        """(printer, template, original print, Otsu fake) for the calibration templates"""
        settings = self.config.calibrate
        seed = derive_seed(self.seed, 'calibrate')
        templates, _ = generate_dataset(seed, settings.n_templates, self.config.dataset.template_size,
                                        self.config.dataset.black_fraction)
        source = self.config.device(self.config.attack.source_device)
        spec = EstimatorSpec(EstimatorKind.THRESHOLD_OTSU, threshold=self.config.attack.threshold)
        size = self.config.dataset.template_size

        def build(item):
            printer, template = item
            attacker = self.config.printer(self.config.attack.attacker_printer or printer.id)
            original = channel.print_template(template, printer, derive_seed(seed, 'print', printer.id, template.id))
            probe, _ = channel.acquire(original, source, derive_seed(seed, 'probe', printer.id, template.id), 0)
            try:
                aligned = self.register(probe, template).aligned
            except RegistrationFailedError:
                return None
            t_hat = attack.estimate_template(aligned, spec, (size, size))
            fake = attack.make_fake(t_hat, attacker, attack.fake_seed(seed, attacker.id, template.id))
            return printer.id, template, original, fake

        items = [(p, t) for p in self.config.printers for t in templates]
        return [entry for entry in parallel_map(build, items, self.threads) if entry is not None]

    def ladder_auc(self, population, device: channel.DeviceProfile) -> Tuple[float, Optional[float]]:
        """Mean over printers of AUC(pcorr, t) and of AUC(pcorr, x_e) for one device profile"""
        seed = derive_seed(self.seed, 'calibrate')
        margin = self.config.align.margin

        def score(entry):
            printer_id, template, original, fake = entry
            reference = metrics.crop_margin(template_as_image(template), margin)
            out, enrolled = [], None
            for inst in (original, fake):
                captures = channel.capture_repeats(
                    inst, device, self.config.dataset.n_reps,
                    derive_seed(seed, 'capture', printer_id, device.id, inst.origin.value, template.id),
                )
                for capture in captures:
                    try:
                        aligned = metrics.crop_margin(self.register(capture, template).aligned.pixels, margin)
                        value = metrics.pcorr(aligned, reference)
                    except (RegistrationFailedError, UndefinedCorrelationError):
                        continue
                    out.append((printer_id, inst.origin, Reference.TEMPLATE, value))
                    # the first original capture enrolls the instance
                    if inst.origin == Origin.ORIGINAL and enrolled is None:
                        enrolled = aligned
                    elif enrolled is not None:
                        try:
                            out.append((printer_id, inst.origin, Reference.ENROLLED, metrics.pcorr(aligned, enrolled)))
                        except UndefinedCorrelationError:
                            pass
            return out

        scores = [s for out in parallel_map(score, population, self.threads) for s in out]

        def mean_auc(reference):
            areas = []
            for printer_id in self.config.printer_ids:
                s = rocstat.ScoreSet(
                    positives=[v for p, o, r, v in scores if p == printer_id and r == reference and o == Origin.ORIGINAL],
                    negatives=[v for p, o, r, v in scores if p == printer_id and r == reference and o == Origin.FAKE],
                )
                if s.positives.size and s.negatives.size:
                    areas.append(rocstat.auc(s))
            return float(np.mean(areas)) if areas else None

        template_auc = mean_auc(Reference.TEMPLATE)
        if template_auc is None:
            raise InvalidArgumentError(f"Calibration of {device.id} produced no scorable captures")
        return template_auc, mean_auc(Reference.ENROLLED)

    def run(self, arguments: Optional[Dict] = None) -> Dict[str, float]:
        settings = self.config.calibrate
        start = time.time()
        population = self.population()
        self.timer.lap('population', start)

        # The source device feeds the attacker, so it keeps its profile.
        ladder = [d for d in self.config.ladder if d != self.config.attack.source_device]
        low, high = settings.target_auc_span
        targets = np.linspace(low, high, len(ladder)) if len(ladder) > 1 else np.array([high])

        rows, multipliers = [], {}
        for device_id, target in zip(ladder, targets):
            start = time.time()
            base = self.config.device(device_id)
            lo, hi = np.log(settings.multiplier_low), np.log(settings.multiplier_high)
            best, tried = None, []
            for iteration in range(settings.iterations):
                mid = 0.5 * (lo + hi)
                multiplier = float(np.exp(mid))
                device = replace(base, psf_sigma=base.psf_sigma * multiplier,
                                 acq_noise_sigma=base.acq_noise_sigma * multiplier)
                value, enrolled_auc = self.ladder_auc(population, device)
                rows.append([device_id, iteration, multiplier, device.psf_sigma, device.acq_noise_sigma, value,
                             enrolled_auc, target])
                tried.append(multiplier)
                # x_e must keep separating perfectly, whatever the template AUC
                separates = enrolled_auc is None or enrolled_auc == 1.0
                if separates and (best is None or abs(value - target) < abs(best[1] - target)):
                    best = (multiplier, value)
                # more degradation lowers the AUC
                if value > target and separates:
                    lo = mid
                else:
                    hi = mid
            if best is None:
                best = (min(tried), float('nan'))
                logger.warning(f"Calibration of {device_id}: no multiplier kept AUC(pcorr, x_e) at 1.0, "
                               f"keeping the mildest one tried ({best[0]:.4f})")
            multipliers[device_id] = best[0]
            self.timer.lap(f'calibrate_{device_id}', start)
            logger.info(f"Calibrated {device_id}: multiplier {best[0]:.4f} gives AUC {best[1]:.4f} "
                        f"(target {target:.4f})")

        tuned = copy.deepcopy(self.config.raw)
        for item in tuned['devices']:
            if item['id'] in multipliers:
                item['psf_sigma'] = round(item['psf_sigma'] * multipliers[item['id']], 6)
                item['acq_noise_sigma'] = round(item['acq_noise_sigma'] * multipliers[item['id']], 6)
        config_path = self.layout.root / 'tuned_config.json'
        write_config(tuned, config_path)
        sweep_path = self.layout.root / 'calibration_sweep.csv'
        pd.DataFrame(rows, columns=SWEEP_COLUMNS).to_csv(sweep_path, index=False, float_format='%.12f')

        self.finish(arguments or {}, {
            'tuned_config': self.relpath(config_path),
            'sweep': self.relpath(sweep_path),
            'multipliers': multipliers,
        })
        return multipliers
