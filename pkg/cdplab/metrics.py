"""
Similarity metrics used for authentication scoring: Pearson correlation and SSIM
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, UndefinedCorrelationError

logger = logging.getLogger('cdplab')


class Metric(str, Enum):
    PCORR = 'pcorr'
    SSIM = 'ssim'


class SsimWindow(str, Enum):
    GAUSSIAN = 'gaussian'
    UNIFORM = 'uniform'


@dataclass(frozen=True)
class SsimParams:
    window: SsimWindow = SsimWindow.GAUSSIAN
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    gaussian_side: int = 11
    gaussian_sigma: float = 1.5
    uniform_side: int = 8

    def __post_init__(self):
        object.__setattr__(self, 'window', SsimWindow(self.window))
        if self.k1 <= 0 or self.k2 <= 0:
            raise InvalidArgumentError(f"SSIM constants must be > 0, got k1={self.k1}, k2={self.k2}")
        if self.dynamic_range <= 0:
            raise InvalidArgumentError("SSIM dynamic range must be > 0")

    @property
    def side(self) -> int:
        return self.gaussian_side if self.window == SsimWindow.GAUSSIAN else self.uniform_side

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def weights(self) -> np.ndarray:
        """Normalized window weights, sum = 1"""
        if self.window == SsimWindow.UNIFORM:
            side = self.uniform_side
            return np.full((side, side), 1.0 / (side * side))
        return gaussian_window(self.gaussian_side, self.gaussian_sigma)


def gaussian_window(side: int, sigma: float) -> np.ndarray:
    half = (side - 1) / 2.0
    y, x = np.ogrid[-half:half + 1, -half:half + 1]
    w = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return w / w.sum()


def _as_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"Image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def pcorr(a, b) -> float:
    """Pearson correlation over all pixels (two-pass, float64)"""
    a, b = _as_pair(a, b)
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    ss_a = float(np.dot(da, da))
    ss_b = float(np.dot(db, db))
    if ss_a == 0.0 and ss_b == 0.0:
        raise UndefinedCorrelationError("Pearson correlation of two constant images is undefined")
    if ss_a == 0.0 or ss_b == 0.0:
        return 0.0
    value = float(np.dot(da, db)) / np.sqrt(ss_a * ss_b)
    return float(np.clip(value, -1.0, 1.0))


def ssim_map(a, b, params: SsimParams = SsimParams()) -> np.ndarray:
    """SSIM index at every valid window position (no padding)"""
    a, b = _as_pair(a, b)
    side = params.side
    if a.ndim != 2 or a.shape[0] < side or a.shape[1] < side:
        raise InvalidArgumentError(f"Image {a.shape} is smaller than the {side}x{side} SSIM window")

    w = params.weights()
    windows_a = sliding_window_view(a, (side, side))
    windows_b = sliding_window_view(b, (side, side))
    mu_a = np.einsum('ijkl,kl->ij', windows_a, w)
    mu_b = np.einsum('ijkl,kl->ij', windows_b, w)
    dev_a = windows_a - mu_a[:, :, None, None]
    dev_b = windows_b - mu_b[:, :, None, None]
    var_a = np.einsum('ijkl,kl->ij', dev_a * dev_a, w)
    var_b = np.einsum('ijkl,kl->ij', dev_b * dev_b, w)
    cov = np.einsum('ijkl,kl->ij', dev_a * dev_b, w)

    c1, c2 = params.c1, params.c2
    return ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / \
        ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))


def ssim(a, b, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM over all valid window positions"""
    return float(ssim_map(a, b, params).mean())


def affine_invariance_holds(a, b, alpha: float, beta: float, tol: float = 1e-10) -> bool:
    """pcorr(alpha * a + beta, b) equals sign(alpha) * pcorr(a, b)"""
    if alpha == 0:
        raise InvalidArgumentError("alpha must be non-zero")
    a = np.asarray(a, dtype=np.float64)
    transformed = pcorr(alpha * a + beta, b)
    return abs(transformed - np.sign(alpha) * pcorr(a, b)) <= tol


def crop_margin(image, margin: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if margin < 0:
        raise InvalidArgumentError(f"margin must be >= 0, got {margin}")
    if margin == 0:
        return image
    if 2 * margin >= min(image.shape):
        raise InvalidArgumentError(f"margin {margin} leaves nothing of a {image.shape} image")
    return image[margin:-margin, margin:-margin]


def score_pair(probe, reference, margin: int = 0, params: SsimParams = SsimParams()) -> Dict[Metric, float]:
    """Both metrics between a registered probe and a reference, borders cropped"""
    probe = crop_margin(probe, margin)
    reference = crop_margin(reference, margin)
    return {Metric.PCORR: pcorr(probe, reference), Metric.SSIM: ssim(probe, reference, params)}
