import numpy as np
from django.test import SimpleTestCase

from cdplab.errors import InvalidArgumentError, UndefinedCorrelationError
from cdplab.metrics import (
    Metric, SsimParams, SsimWindow, affine_invariance_holds, crop_margin, gaussian_window, pcorr, score_pair,
    ssim, ssim_map,
)


def windowed_ssim(a, b, weights, c1, c2):
    """Direct per-window SSIM, one window at a time"""
    side = weights.shape[0]
    rows = a.shape[0] - side + 1
    cols = a.shape[1] - side + 1
    values = []
    for i in range(rows):
        for j in range(cols):
            wa = a[i:i + side, j:j + side]
            wb = b[i:i + side, j:j + side]
            mu_a = np.sum(weights * wa)
            mu_b = np.sum(weights * wb)
            var_a = np.sum(weights * (wa - mu_a) ** 2)
            var_b = np.sum(weights * (wb - mu_b) ** 2)
            cov = np.sum(weights * (wa - mu_a) * (wb - mu_b))
            values.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                          / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(values))


class PearsonTests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_matches_corrcoef(self):
        for _ in range(50):
            a = self.rng.uniform(size=(16, 16))
            b = 0.5 * a + self.rng.normal(0, 0.3, size=(16, 16))
            self.assertAlmostEqual(pcorr(a, b), np.corrcoef(a.ravel(), b.ravel())[0, 1], delta=1e-10)

    def test_identity(self):
        a = self.rng.uniform(size=(32, 32))
        self.assertAlmostEqual(pcorr(a, a), 1.0, delta=1e-12)
        self.assertAlmostEqual(pcorr(a, 1.0 - a), -1.0, delta=1e-12)

    def test_affine_invariance(self):
        a = self.rng.uniform(size=(16, 16))
        b = self.rng.uniform(size=(16, 16))
        self.assertTrue(affine_invariance_holds(a, b, alpha=2.5, beta=0.3))
        self.assertTrue(affine_invariance_holds(a, b, alpha=-0.4, beta=-1.0))
        with self.assertRaises(InvalidArgumentError):
            affine_invariance_holds(a, b, alpha=0.0, beta=1.0)

    def test_symmetric(self):
        for _ in range(50):
            a = self.rng.uniform(size=(16, 16))
            b = 0.3 * a + self.rng.normal(0, 0.5, size=(16, 16))
            self.assertAlmostEqual(pcorr(a, b), pcorr(b, a), delta=1e-12)

    def test_constant_images(self):
        flat = np.full((8, 8), 0.3)
        self.assertEqual(pcorr(flat, self.rng.uniform(size=(8, 8))), 0.0)
        with self.assertRaises(UndefinedCorrelationError):
            pcorr(flat, flat)

    def test_shape_mismatch(self):
        with self.assertRaises(InvalidArgumentError):
            pcorr(np.zeros((4, 4)), np.zeros((4, 5)))


class SsimTests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(1)

    def test_gaussian_window_matches_windowed_oracle(self):
        params = SsimParams()
        weights = gaussian_window(11, 1.5)
        for _ in range(50):
            a = self.rng.uniform(size=(16, 16))
            b = np.clip(a + self.rng.normal(0, 0.25, size=(16, 16)), 0, 1)
            self.assertAlmostEqual(ssim(a, b, params), windowed_ssim(a, b, weights, params.c1, params.c2),
                                   delta=1e-10)

    def test_uniform_window_matches_windowed_oracle(self):
        params = SsimParams(window=SsimWindow.UNIFORM)
        weights = np.full((8, 8), 1 / 64)
        for _ in range(20):
            a = self.rng.uniform(size=(12, 12))
            b = self.rng.uniform(size=(12, 12))
            self.assertAlmostEqual(ssim(a, b, params), windowed_ssim(a, b, weights, params.c1, params.c2),
                                   delta=1e-10)

    def test_identity(self):
        a = self.rng.uniform(size=(20, 20))
        self.assertAlmostEqual(ssim(a, a), 1.0, delta=1e-12)

    def test_map_has_one_value_per_valid_window(self):
        self.assertEqual(ssim_map(np.ones((16, 20)), np.ones((16, 20))).shape, (6, 10))

    def test_window_weights_are_normalized(self):
        self.assertAlmostEqual(gaussian_window(11, 1.5).sum(), 1.0, delta=1e-12)
        self.assertAlmostEqual(SsimParams(window='uniform').weights().sum(), 1.0, delta=1e-12)

    def test_image_smaller_than_window(self):
        with self.assertRaises(InvalidArgumentError):
            ssim(np.ones((8, 8)), np.ones((8, 8)))

    def test_constants(self):
        params = SsimParams(k1=0.02, k2=0.05, dynamic_range=2.0)
        self.assertAlmostEqual(params.c1, 0.0016)
        self.assertAlmostEqual(params.c2, 0.01)
        with self.assertRaises(InvalidArgumentError):
            SsimParams(k1=0.0)


class ScorePairTests(SimpleTestCase):

    def test_margin_is_cropped_before_scoring(self):
        rng = np.random.default_rng(2)
        probe = rng.uniform(size=(24, 24))
        reference = rng.uniform(size=(24, 24))
        scores = score_pair(probe, reference, margin=4)
        self.assertEqual(set(scores), {Metric.PCORR, Metric.SSIM})
        self.assertEqual(scores[Metric.PCORR], pcorr(probe[4:-4, 4:-4], reference[4:-4, 4:-4]))
        self.assertEqual(scores[Metric.SSIM], ssim(probe[4:-4, 4:-4], reference[4:-4, 4:-4]))

    def test_margin_limits(self):
        image = np.ones((8, 8))
        self.assertEqual(crop_margin(image, 0).shape, (8, 8))
        with self.assertRaises(InvalidArgumentError):
            crop_margin(image, 4)
        with self.assertRaises(InvalidArgumentError):
            crop_margin(image, -1)
