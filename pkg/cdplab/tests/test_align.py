import shutil
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from cdplab.align import (
    FAILURE_LOG_COLUMNS, batch_register, correlation_surface, register, to_template_resolution, write_failure_log,
)
from cdplab.channel import acquire, print_template
from cdplab.config import load_profiles
from cdplab.errors import InvalidArgumentError, RegistrationFailedError
from cdplab.imgcore import derive_seed, generate_template, template_as_image


class RegistrationTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.printers, cls.devices = load_profiles()
        cls.templates = [generate_template(derive_seed(2, 'align', i), 64, 64, 0.5, template_id=i)
                         for i in range(10)]

    def capture(self, trial, device=None):
        template = self.templates[trial % len(self.templates)]
        printer = self.printers[trial % len(self.printers)]
        device = device or self.devices[trial % len(self.devices)]
        inst = print_template(template, printer, derive_seed(2, 'print', trial))
        capture, shift = acquire(inst, device, derive_seed(2, 'acquire', trial), repetition=0)
        return template, capture, shift

    def test_injected_shift_is_recovered(self):
        trials = 500
        exact = near = 0
        for trial in range(trials):
            template, capture, shift = self.capture(trial)
            found = register(capture, template, search_radius=4).shift
            exact += found == shift
            near += max(abs(found[0] - shift[0]), abs(found[1] - shift[1])) <= 1
        self.assertGreaterEqual(exact, 0.95 * trials)
        self.assertGreaterEqual(near, 0.99 * trials)

    def test_aligned_capture_sits_on_the_template_grid(self):
        template, capture, shift = self.capture(3)
        registration = register(capture, template, search_radius=4)
        self.assertEqual(registration.aligned.pixels.shape, (64, 64))
        self.assertEqual(registration.aligned.template_id, template.id)
        self.assertGreater(registration.peak, 0.15)

    def test_subpixel_refinement_stays_near_the_integer_peak(self):
        template, capture, shift = self.capture(5)
        registration = register(capture, template, search_radius=4, subpixel=True)
        self.assertLessEqual(abs(registration.shift[0] - shift[0]), 0.5)
        self.assertLessEqual(abs(registration.shift[1] - shift[1]), 0.5)
        self.assertEqual(registration.aligned.pixels.shape, (64, 64))

    def test_capture_of_another_template_fails(self):
        _, capture, _ = self.capture(1)
        stranger = generate_template(12345, 64, 64, 0.5, template_id=99)
        with self.assertRaises(RegistrationFailedError) as ctx:
            register(capture, stranger, search_radius=4, peak_floor=0.3)
        self.assertLess(ctx.exception.peak, 0.3)
        self.assertEqual(ctx.exception.template_id, 99)

    def test_resampling_to_template_resolution(self):
        epson = next(d for d in self.devices if d.scale_factor == 2.0)
        template, capture, _ = self.capture(2, device=epson)
        self.assertEqual(capture.pixels.shape, (128, 128))
        self.assertEqual(to_template_resolution(capture, template).shape, (64, 64))

    def test_surface_peaks_at_zero_shift_for_the_template_itself(self):
        reference = template_as_image(self.templates[0])
        surface = correlation_surface(reference, reference, 3)
        self.assertEqual(surface.shape, (7, 7))
        self.assertAlmostEqual(surface[3, 3], 1.0, delta=1e-12)
        self.assertEqual(np.unravel_index(np.argmax(surface), surface.shape), (3, 3))

    def test_search_radius_limits(self):
        template, capture, _ = self.capture(0)
        with self.assertRaises(InvalidArgumentError):
            register(capture, template, search_radius=32)
        with self.assertRaises(InvalidArgumentError):
            register(capture, template, search_radius=-1)


class BatchRegistrationTests(SimpleTestCase):

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        printers, devices = load_profiles()
        self.templates = [generate_template(derive_seed(3, i), 32, 32, 0.5, template_id=i) for i in range(4)]
        self.captures = [
            acquire(print_template(t, printers[0], derive_seed(3, 'print', t.id)), devices[0],
                    derive_seed(3, 'rep', t.id))[0]
            for t in self.templates
        ]

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_failures_are_collected_not_raised(self):
        templates = list(self.templates)
        templates[2] = generate_template(777, 32, 32, 0.5, template_id=2)
        result = batch_register(self.captures, templates, search_radius=4, peak_floor=0.2,
                                paths=[f'y_{i}.png' for i in range(4)], threads=2)

        self.assertIsNone(result.aligned[2])
        self.assertEqual(len(result.succeeded), 3)
        self.assertEqual([(f.capture_path, f.template_id) for f in result.failures], [('y_2.png', 2)])

        write_failure_log(result.failures, self.tmp / 'results' / 'registration_failures.csv')
        df = pd.read_csv(self.tmp / 'results' / 'registration_failures.csv')
        self.assertEqual(list(df.columns), FAILURE_LOG_COLUMNS)
        self.assertEqual(df['reason'].tolist(), ['peak below floor'])

    def test_lengths_must_match(self):
        with self.assertRaises(InvalidArgumentError):
            batch_register(self.captures, self.templates[:2], search_radius=4)
