from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from cdplab.attack import (
    EstimatorKind, EstimatorSpec, bit_error_rate, estimate_template, fake_seed, make_fake, run_attack,
    train_estimator,
)
from cdplab.channel import DeviceProfile, PrinterProfile, acquire, capture_repeats, print_template
from cdplab.config import load_profiles
from cdplab.errors import EstimationError, InvalidArgumentError
from cdplab.imgcore import (
    ImageRole, Origin, PhysicalImage, Template, TemplateKind, derive_seed, generate_template, template_as_image,
)
from cdplab.metrics import pcorr
from cdplab.pix2pix import GeneratorConfig, TrainConfig

CLEAN = PrinterProfile(id='clean', dot_gain=0.0, instance_noise_sigma=0.01, print_blur_sigma=0.0)
ATTACKER = PrinterProfile(id='HPI76', dot_gain=0.2, instance_noise_sigma=0.1, print_blur_sigma=0.5)


def clean_probe(template):
    return print_template(template, CLEAN, instance_seed=template.id + 100).latent


class EstimateTests(SimpleTestCase):

    def test_otsu_recovers_a_clean_print(self):
        template = generate_template(5, 32, 32, 0.5, template_id=4)
        t_hat = estimate_template(clean_probe(template), EstimatorSpec())
        self.assertEqual(t_hat.kind, TemplateKind.ESTIMATED)
        self.assertEqual(t_hat.id, 4)
        self.assertEqual(bit_error_rate(t_hat, template), 0.0)

    def test_constant_probe_has_no_threshold(self):
        probe = PhysicalImage(pixels=np.full((8, 8), 0.4), role=ImageRole.CAPTURE_Y, template_id=0,
                              printer_id='p', device_id='d')
        with self.assertRaises(EstimationError):
            estimate_template(probe, EstimatorSpec())

    def test_probe_must_be_registered(self):
        probe = clean_probe(generate_template(1, 16, 16, 0.5))
        with self.assertRaises(InvalidArgumentError):
            estimate_template(probe, EstimatorSpec(), expected_shape=(32, 32))

    def test_bit_error_rate_counts_flipped_modules(self):
        template = generate_template(2, 8, 8, 0.5)
        flipped = template.bits.copy()
        flipped[0, :4] ^= 1
        t_hat = Template(id=0, width=8, height=8, bits=flipped, kind=TemplateKind.ESTIMATED)
        self.assertAlmostEqual(bit_error_rate(t_hat, template), 4 / 64)


class EstimatorSpecTests(SimpleTestCase):

    def test_learned_estimator_needs_a_network(self):
        with self.assertRaises(InvalidArgumentError):
            EstimatorSpec(kind=EstimatorKind.LEARNED_UNET)

    def test_threshold_range(self):
        with self.assertRaises(InvalidArgumentError):
            EstimatorSpec(threshold=1.0)

    def test_disjoint_training_templates(self):
        spec = EstimatorSpec(train_ids=(1, 2, 3))
        spec.check_disjoint([4, 5])
        with self.assertRaises(InvalidArgumentError):
            spec.check_disjoint([3, 4])


class FakeTests(SimpleTestCase):

    def test_fake_needs_an_estimated_template(self):
        with self.assertRaises(InvalidArgumentError):
            make_fake(generate_template(1, 16, 16, 0.5), ATTACKER, instance_seed=1)

    def test_fake_seeds_do_not_collide_with_print_seeds(self):
        self.assertNotEqual(fake_seed(1, 'HPI55', 3), derive_seed(1, 'print', 'HPI55', 3, 0))

    def test_run_attack_keeps_probe_order(self):
        templates = [generate_template(derive_seed(3, i), 16, 16, 0.5, template_id=i) for i in (7, 2, 5)]
        probes = [clean_probe(t) for t in templates]
        records = run_attack(probes, EstimatorSpec(), ATTACKER, seed=9, expected_shape=(16, 16), threads=2)

        self.assertEqual([r.template_id for r in records], [7, 2, 5])
        for record, template in zip(records, templates):
            self.assertEqual(record.fake.origin, Origin.FAKE)
            self.assertEqual(record.fake.latent.role, ImageRole.FAKE_F)
            self.assertEqual(record.fake.printer_id, 'HPI76')
            self.assertEqual(bit_error_rate(record.t_hat, template), 0.0)

        again = run_attack(probes, EstimatorSpec(), ATTACKER, seed=9, threads=1)
        for a, b in zip(records, again):
            np.testing.assert_array_equal(a.fake.latent.pixels, b.fake.latent.pixels)

    def test_empty_probe_list(self):
        self.assertEqual(run_attack([], EstimatorSpec(), ATTACKER, seed=0), [])


class LearnedEstimatorTests(SimpleTestCase):

    def test_trained_network_estimates_templates(self):
        templates = [generate_template(derive_seed(4, i), 8, 8, 0.5, template_id=i) for i in range(3)]
        pairs = [(clean_probe(t), t) for t in templates[:2]]
        cfg = TrainConfig(epochs=2, n_pairs=None, seed=1)
        result = train_estimator(pairs, cfg, GeneratorConfig(depth=1, base_channels=2))

        self.assertIsNone(result.discriminator)
        self.assertEqual(result.steps, 4)
        spec = EstimatorSpec(kind=EstimatorKind.LEARNED_UNET, network=result.generator, train_ids=(0, 1))
        t_hat = estimate_template(clean_probe(templates[2]), spec, expected_shape=(8, 8))
        self.assertEqual(t_hat.kind, TemplateKind.ESTIMATED)
        self.assertEqual(t_hat.bits.shape, (8, 8))

        with self.assertRaises(InvalidArgumentError):
            run_attack([clean_probe(templates[0])], spec, ATTACKER, seed=0)

    def test_pairs_must_be_registered(self):
        template = generate_template(1, 8, 8, 0.5)
        other = clean_probe(generate_template(1, 16, 16, 0.5))
        with self.assertRaises(InvalidArgumentError):
            train_estimator([(other, template)], TrainConfig(epochs=1), GeneratorConfig(depth=1, base_channels=2))


class ReprintTests(SimpleTestCase):
    """Fakes printed from the exact template by the legitimate printer"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        printers, devices = load_profiles()
        printer = printers[0]
        device = replace(next(d for d in devices if d.id == 'xs_wide'), shift_jitter_max=0)
        template = generate_template(31, 64, 64, 0.5, template_id=31)
        t_hat = Template(id=31, width=64, height=64, bits=template.bits, kind=TemplateKind.ESTIMATED)
        reference = template_as_image(template)

        cls.to_template = {Origin.ORIGINAL: [], Origin.FAKE: []}
        cls.to_enrollment = {Origin.ORIGINAL: [], Origin.FAKE: []}
        for i in range(30):
            original = print_template(template, printer, derive_seed(31, 'print', i), instance=i)
            enrolled, probe = capture_repeats(original, device, 2, derive_seed(31, 'capture', 'original', i))
            fake = make_fake(t_hat, printer, fake_seed(31, printer.id, template.id, i), instance=i)
            fake_capture = capture_repeats(fake, device, 1, derive_seed(31, 'capture', 'fake', i))[0]
            for origin, capture in ((Origin.ORIGINAL, probe), (Origin.FAKE, fake_capture)):
                cls.to_template[origin].append(pcorr(capture.pixels, reference))
                cls.to_enrollment[origin].append(pcorr(capture.pixels, enrolled.pixels))

    def test_template_reference_cannot_tell_them_apart(self):
        originals = np.asarray(self.to_template[Origin.ORIGINAL])
        fakes = np.asarray(self.to_template[Origin.FAKE])
        spread = np.sqrt(originals.var(ddof=1) / originals.size + fakes.var(ddof=1) / fakes.size)
        self.assertLess(abs(originals.mean() - fakes.mean()), 4 * spread)

    def test_enrollment_reference_separates_them(self):
        self.assertGreater(min(self.to_enrollment[Origin.ORIGINAL]), max(self.to_enrollment[Origin.FAKE]))

    def test_half_flipped_estimate_decorrelates_the_fake(self):
        device = DeviceProfile(id='flat', psf_sigma=0.5, acq_noise_sigma=0.02, gamma=1.0, scale_factor=1.0,
                               shift_jitter_max=0)
        values = []
        for i in range(10):
            template = generate_template(derive_seed(32, i), 64, 64, 0.5, template_id=i)
            rng = np.random.default_rng(derive_seed(32, 'flip', i))
            flips = np.zeros(template.bits.size, dtype=np.uint8)
            flips[rng.choice(flips.size, flips.size // 2, replace=False)] = 1
            t_hat = Template(id=i, width=64, height=64, bits=template.bits ^ flips.reshape(64, 64),
                             kind=TemplateKind.ESTIMATED)
            self.assertEqual(bit_error_rate(t_hat, template), 0.5)
            fake = make_fake(t_hat, ATTACKER, fake_seed(32, ATTACKER.id, i))
            capture, _ = acquire(fake, device, derive_seed(32, 'acquire', i))
            values.append(pcorr(capture.pixels, template_as_image(template)))
        self.assertLess(abs(np.mean(values)), 0.03)
        self.assertLess(max(abs(v) for v in values), 0.1)
