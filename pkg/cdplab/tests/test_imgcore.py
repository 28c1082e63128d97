import shutil
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase
from PIL import Image
from scipy import stats

from cdplab.errors import InvalidArgumentError, ImageIOError, ImageParseError
from cdplab.imgcore import (
    DatasetLayout, ImageRole, Origin, PhysicalImage, Template, TemplateKind, derive_seed, generate_dataset,
    generate_template, load_image, load_manifest, persist_image, save_manifest, split_dataset,
    template_as_image,
)


class TemplateGenerationTests(SimpleTestCase):

    def test_exact_black_count(self):
        template = generate_template(seed=3, width=64, height=64, black_fraction=0.5)
        self.assertEqual(template.black_count, 2048)
        self.assertEqual(template.bits.shape, (64, 64))
        self.assertEqual(template.kind, TemplateKind.ORIGINAL)

    def test_black_count_rounds_down(self):
        template = generate_template(seed=0, width=5, height=5, black_fraction=0.5)
        self.assertEqual(template.black_count, 12)

    def test_same_seed_same_template(self):
        a = generate_template(11, 32, 32, 0.5)
        b = generate_template(11, 32, 32, 0.5)
        c = generate_template(12, 32, 32, 0.5)
        self.assertEqual(a, b)
        self.assertFalse(np.array_equal(a.bits, c.bits))

    def test_block_patterns_are_uniform(self):
        templates, _ = generate_dataset(7, 144, 64, 0.5)
        self.assertEqual(templates[0].black_count, 2048)
        counts = np.zeros(16, dtype=np.int64)
        for template in templates:
            blocks = template.bits.reshape(32, 2, 32, 2).transpose(0, 2, 1, 3).reshape(-1, 4)
            codes = blocks @ np.array([8, 4, 2, 1])
            counts += np.bincount(codes, minlength=16)
        self.assertEqual(counts.sum(), 144 * 1024)
        self.assertGreater(stats.chisquare(counts).pvalue, 1e-3)

    def test_rejects_bad_arguments(self):
        with self.assertRaises(InvalidArgumentError):
            generate_template(0, 3, 3, 0.5)
        with self.assertRaises(InvalidArgumentError):
            generate_template(0, 16, 16, 0.0)
        with self.assertRaises(InvalidArgumentError):
            generate_template(0, 16, 16, 1.0)

    def test_template_rejects_non_binary_bits(self):
        with self.assertRaises(InvalidArgumentError):
            Template(id=0, width=4, height=4, bits=np.full((4, 4), 2))

    def test_template_as_image_is_white_on_zero_bits(self):
        template = generate_template(1, 8, 8, 0.5)
        image = template_as_image(template)
        np.testing.assert_array_equal(image[template.bits == 1], 0.0)
        np.testing.assert_array_equal(image[template.bits == 0], 1.0)


class DatasetTests(SimpleTestCase):

    def test_dataset_templates_are_distinct(self):
        templates, manifest = generate_dataset(seed=1, n=20, size=16, black_fraction=0.5)
        self.assertEqual([t.id for t in templates], list(range(20)))
        self.assertEqual(len({t.bits.tobytes() for t in templates}), 20)
        self.assertEqual(manifest.n_templates, 20)

    def test_dataset_needs_two_templates(self):
        with self.assertRaises(InvalidArgumentError):
            generate_dataset(seed=1, n=1, size=16, black_fraction=0.5)

    def test_split_sizes_and_disjointness(self):
        _, manifest = generate_dataset(seed=1, n=144, size=8, black_fraction=0.5)
        split = split_dataset(manifest, 0.278, seed=5)
        self.assertEqual(len(split.train_ids), 40)
        self.assertEqual(len(split.test_ids), 104)
        self.assertFalse(set(split.train_ids) & set(split.test_ids))
        self.assertEqual(sorted(split.train_ids + split.test_ids), list(range(144)))
        self.assertEqual(split_dataset(manifest, 0.278, seed=5), split)

    def test_split_rejects_empty_side(self):
        _, manifest = generate_dataset(seed=1, n=2, size=8, black_fraction=0.5)
        with self.assertRaises(InvalidArgumentError):
            split_dataset(manifest, 0.1, seed=0)

    def test_derive_seed_is_stable_and_keyed(self):
        self.assertEqual(derive_seed(1, 'print', 'HPI55', 3), derive_seed(1, 'print', 'HPI55', 3))
        self.assertNotEqual(derive_seed(1, 'print', 'HPI55', 3), derive_seed(1, 'print', 'HPI76', 3))
        self.assertNotEqual(derive_seed(1, 'print', 3), derive_seed(2, 'print', 3))
        self.assertTrue(0 <= derive_seed(99, 'x') < 2 ** 63)


class PhysicalImageTests(SimpleTestCase):

    def test_rejects_out_of_range_pixels(self):
        with self.assertRaises(InvalidArgumentError):
            PhysicalImage(pixels=np.full((4, 4), 1.5), role=ImageRole.ORIGINAL_X, template_id=0, printer_id='p')

    def test_from_array_clamps(self):
        image = PhysicalImage.from_array(np.array([[-0.5, 0.5], [1.5, 1.0]]), role=ImageRole.CAPTURE_Y,
                                         template_id=0, printer_id='p', device_id='d')
        np.testing.assert_array_equal(image.pixels, [[0.0, 0.5], [1.0, 1.0]])

    def test_synthetic_needs_a_device(self):
        with self.assertRaises(InvalidArgumentError):
            PhysicalImage(pixels=np.zeros((4, 4)), role=ImageRole.SYNTHETIC_XHAT, template_id=0, printer_id='p')

    def test_pixels_are_read_only(self):
        image = PhysicalImage(pixels=np.zeros((4, 4)), role=ImageRole.ORIGINAL_X, template_id=0, printer_id='p')
        with self.assertRaises(ValueError):
            image.pixels[0, 0] = 1.0


class PersistenceTests(SimpleTestCase):

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.layout = DatasetLayout(self.tmp)

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_template_reloads_identically(self):
        template = generate_template(4, 16, 16, 0.5, template_id=7)
        persist_image(template, self.layout.template(7))
        self.assertEqual(load_image(self.layout.template(7)), template)

    def test_capture_provenance_comes_from_the_path(self):
        rng = np.random.default_rng(0)
        capture = PhysicalImage(pixels=rng.uniform(size=(12, 12)), role=ImageRole.CAPTURE_Y, template_id=3,
                                printer_id='HPI55', device_id='epson', instance=0, repetition=2)
        path = self.layout.capture('HPI55', 'epson', Origin.FAKE, 3, 0, 2)
        persist_image(capture, path)
        loaded = load_image(path)
        self.assertEqual(loaded.role, ImageRole.CAPTURE_Y)
        self.assertEqual((loaded.printer_id, loaded.device_id), ('HPI55', 'epson'))
        self.assertEqual((loaded.template_id, loaded.instance, loaded.repetition), (3, 0, 2))
        np.testing.assert_allclose(loaded.pixels, capture.pixels, atol=0.5 / 65535 + 1e-12)

    def test_synthetic_provenance(self):
        image = PhysicalImage(pixels=np.full((8, 8), 0.25), role=ImageRole.SYNTHETIC_XHAT, template_id=5,
                              printer_id='HPI76', device_id='xs_wide')
        persist_image(image, self.layout.synthetic('HPI76', 'xs_wide', 5))
        loaded = load_image(self.layout.synthetic('HPI76', 'xs_wide', 5))
        self.assertEqual(loaded.role, ImageRole.SYNTHETIC_XHAT)
        self.assertEqual(loaded.device_id, 'xs_wide')

    def test_eight_bit_png_is_rejected_at_bit_depth_offset(self):
        path = self.layout.template(0)
        path.parent.mkdir(parents=True)
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(path)
        with self.assertRaises(ImageParseError) as ctx:
            load_image(path)
        self.assertEqual(ctx.exception.offset, 24)

    def test_non_png_is_rejected_at_offset_zero(self):
        path = self.layout.template(0)
        path.parent.mkdir(parents=True)
        path.write_bytes(b'not an image at all, just text')
        with self.assertRaises(ImageParseError) as ctx:
            load_image(path)
        self.assertEqual(ctx.exception.offset, 0)

    def test_missing_image(self):
        with self.assertRaises(ImageIOError):
            load_image(self.layout.template(99))

    def test_manifest_merges_qc_logs(self):
        _, manifest = generate_dataset(seed=2, n=4, size=8, black_fraction=0.5, printer_ids=['HPI55'],
                                       device_ids=['epson'])
        manifest = split_dataset(manifest, 0.5, seed=0)
        save_manifest(manifest, self.layout)
        self.layout.qc_log.parent.mkdir(parents=True)
        pd.DataFrame([['captures/a.png', True, ''], ['captures/b.png', False, 'blur']],
                     columns=['capture_path', 'keep', 'reason']).to_csv(self.layout.qc_log, index=False)
        pd.DataFrame([['captures/c.png', False, 'blur+contrast']],
                     columns=['capture_path', 'keep', 'reason']).to_csv(self.layout.fake_qc_log, index=False)

        loaded = load_manifest(self.layout)
        self.assertEqual(loaded.train_ids, manifest.train_ids)
        self.assertEqual(loaded.printer_ids, ('HPI55',))
        self.assertEqual([(e.capture_path, e.keep, e.reason) for e in loaded.qc_log], [
            ('captures/a.png', True, ''),
            ('captures/b.png', False, 'blur'),
            ('captures/c.png', False, 'blur+contrast'),
        ])

    def test_missing_manifest(self):
        with self.assertRaises(ImageIOError):
            load_manifest(self.layout)
