"""
Print-and-acquire channel simulator.

Stands in for the industrial printers and the scanner/phone cameras:
- print_template: template -> physical instance with its own microstructure
- acquire / capture_repeats: physical instance -> captures y
- quality_control: blur and contrast screening of captures
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .errors import InvalidArgumentError
from .imgcore import (
    Template, PhysicalImage, ImageRole, Origin, template_as_image, derive_seed,
)

logger = logging.getLogger('cdplab')

PAPER_WHITE = 1.0
# Correlation length of the print microstructure, in template modules.
DEFAULT_MICROSTRUCTURE_SCALE = 1.5
# Ink spreads into the four direct neighbours of a black module.
DOT_GAIN_KERNEL = cv2.getStructuringElement(cv2.MORPH_CROSS, (3, 3))


@dataclass(frozen=True)
class PrinterProfile:
    id: str
    dot_gain: float
    instance_noise_sigma: float
    print_blur_sigma: float
    dot_gain_jitter: float = 0.0
    microstructure_scale: float = DEFAULT_MICROSTRUCTURE_SCALE

    def __post_init__(self):
        for name in ('dot_gain', 'instance_noise_sigma', 'print_blur_sigma', 'dot_gain_jitter',
                     'microstructure_scale'):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"Printer {self.id}: {name} must be >= 0")
        if self.instance_noise_sigma <= 0:
            raise InvalidArgumentError(
                f"Printer {self.id}: instance_noise_sigma must be > 0, prints need microstructure"
            )
        if self.dot_gain_jitter > 1:
            raise InvalidArgumentError(f"Printer {self.id}: dot_gain_jitter must be <= 1")


@dataclass(frozen=True)
class DeviceProfile:
    id: str
    psf_sigma: float
    acq_noise_sigma: float
    gamma: float
    scale_factor: float
    shift_jitter_max: int
    psf_jitter: float = 0.0

    def __post_init__(self):
        if self.psf_sigma < 0 or self.acq_noise_sigma < 0:
            raise InvalidArgumentError(f"Device {self.id}: psf_sigma and acq_noise_sigma must be >= 0")
        if self.gamma <= 0:
            raise InvalidArgumentError(f"Device {self.id}: gamma must be > 0")
        if not 0.25 <= self.scale_factor <= 4.0:
            raise InvalidArgumentError(f"Device {self.id}: scale_factor must lie in [0.25, 4]")
        if self.shift_jitter_max < 0:
            raise InvalidArgumentError(f"Device {self.id}: shift_jitter_max must be >= 0")
        if not 0.0 <= self.psf_jitter < 1.0:
            raise InvalidArgumentError(f"Device {self.id}: psf_jitter must lie in [0, 1)")

    @property
    def effective_blur(self) -> float:
        """PSF width measured on the template grid"""
        return self.psf_sigma / self.scale_factor


@dataclass(frozen=True)
class PhysicalInstance:
    """One printed CDP; the latent print is fixed for every later capture"""

    template_id: int
    printer_id: str
    instance: int
    latent: PhysicalImage
    seed: int

    @property
    def origin(self) -> Origin:
        return Origin.FAKE if self.latent.role == ImageRole.FAKE_F else Origin.ORIGINAL


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return image
    return cv2.GaussianBlur(image, (0, 0), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT)


def translate_image(image: np.ndarray, dx: int, dy: int, fill: float = PAPER_WHITE) -> np.ndarray:
    """out[y, x] = image[y - dy, x - dx]; uncovered pixels take the fill value"""
    height, width = image.shape
    out = np.full_like(image, fill)
    if abs(dx) >= width or abs(dy) >= height:
        return out
    out[max(dy, 0):height + min(dy, 0), max(dx, 0):width + min(dx, 0)] = \
        image[max(-dy, 0):height - max(dy, 0), max(-dx, 0):width - max(dx, 0)]
    return out


def microstructure_field(shape: Tuple[int, int], sigma: float, scale: float,
                         rng: np.random.Generator) -> np.ndarray:
    """
    Zero-mean Gaussian field with per-pixel std sigma.

    scale > 0 low-passes white noise so the field is correlated over a few modules
    and outlives the capture PSF; scale == 0 leaves it white.
    """
    field = rng.normal(0.0, 1.0, size=shape)
    if scale > 0:
        field = gaussian_blur(field, scale)
        std = field.std()
        if std > 0:
            field = field / std
    return sigma * field


def print_template(template: Template, printer: PrinterProfile, instance_seed: int,
                   instance: int = 0, origin: Origin = Origin.ORIGINAL) -> PhysicalInstance:
    """Ink map -> dot gain -> print blur -> per-instance microstructure"""
    rng = np.random.default_rng(instance_seed)

    gain = printer.dot_gain
    if printer.dot_gain_jitter > 0:
        gain *= 1.0 + printer.dot_gain_jitter * rng.uniform(-1.0, 1.0)

    white = template_as_image(template)
    if gain > 0:
        eroded = cv2.erode(white, DOT_GAIN_KERNEL, borderType=cv2.BORDER_REPLICATE)
        white = white - gain * (white - eroded)
    white = gaussian_blur(white, printer.print_blur_sigma)
    white = white + microstructure_field(white.shape, printer.instance_noise_sigma,
                                         printer.microstructure_scale, rng)

    role = ImageRole.FAKE_F if Origin(origin) == Origin.FAKE else ImageRole.ORIGINAL_X
    latent = PhysicalImage.from_array(white, role=role, template_id=template.id,
                                      printer_id=printer.id, instance=instance)
    return PhysicalInstance(template_id=template.id, printer_id=printer.id,
                            instance=instance, latent=latent, seed=instance_seed)


def acquire(inst: PhysicalInstance, device: DeviceProfile, rep_seed: int,
            repetition: Optional[int] = None) -> Tuple[PhysicalImage, Tuple[int, int]]:
    """Capture one photo of a physical instance; returns the capture and the injected shift"""
    rng = np.random.default_rng(rep_seed)

    jitter = device.shift_jitter_max
    if jitter > 0:
        dx, dy = (int(v) for v in rng.integers(-jitter, jitter + 1, size=2))
    else:
        dx, dy = 0, 0
    psf = device.psf_sigma
    if device.psf_jitter > 0:
        psf *= 1.0 + device.psf_jitter * rng.uniform(-1.0, 1.0)

    # The shift is a placement of the print in the frame, so it lives on the template grid.
    image = translate_image(np.asarray(inst.latent.pixels), dx, dy)
    if device.scale_factor != 1.0:
        height, width = image.shape
        size = (int(round(width * device.scale_factor)), int(round(height * device.scale_factor)))
        image = cv2.resize(image, size, interpolation=cv2.INTER_LINEAR)
    image = gaussian_blur(image, psf)
    if device.gamma != 1.0:
        image = np.power(np.clip(image, 0.0, 1.0), device.gamma)
    if device.acq_noise_sigma > 0:
        image = image + rng.normal(0.0, device.acq_noise_sigma, size=image.shape)

    capture = PhysicalImage.from_array(
        image, role=ImageRole.CAPTURE_Y, template_id=inst.template_id, printer_id=inst.printer_id,
        device_id=device.id, instance=inst.instance, repetition=repetition,
    )
    return capture, (dx, dy)


def capture_repeats(inst: PhysicalInstance, device: DeviceProfile, n_reps: int,
                    seed: int) -> List[PhysicalImage]:
    """n_reps independent captures with seeds derived per repetition"""
    if n_reps < 1:
        raise InvalidArgumentError(f"n_reps must be >= 1, got {n_reps}")
    return [
        acquire(inst, device, derive_seed(seed, 'rep', rep), repetition=rep)[0]
        for rep in range(n_reps)
    ]


def inject_blur(capture: PhysicalImage, sigma: float) -> PhysicalImage:
    """Degrade a capture with extra defocus"""
    return capture.with_pixels(gaussian_blur(np.asarray(capture.pixels), sigma))


def capture_contrast(image: np.ndarray) -> float:
    """Robust intensity range p99 - p1"""
    low, high = np.percentile(image, [1.0, 99.0])
    return float(high - low)


def capture_sharpness(image: np.ndarray) -> float:
    """Laplacian variance of the contrast-normalized capture"""
    low, high = np.percentile(image, [1.0, 99.0])
    if high - low <= 0:
        return 0.0
    normalized = (np.asarray(image, dtype=np.float64) - low) / (high - low)
    return float(cv2.Laplacian(normalized, cv2.CV_64F).var())


@dataclass
class QcResult:
    kept: List[PhysicalImage]
    discarded: List[Tuple[PhysicalImage, Tuple[str, ...]]]

    @property
    def status(self) -> str:
        return 'ok' if self.kept else 'empty'

    @property
    def discard_rate(self) -> float:
        total = len(self.kept) + len(self.discarded)
        return len(self.discarded) / total if total else 0.0


def qc_reasons(capture: PhysicalImage, blur_threshold: float, contrast_threshold: float) -> Tuple[str, ...]:
    """Failed checks, blur first; a flat image only fails the contrast check"""
    pixels = np.asarray(capture.pixels)
    contrast = capture_contrast(pixels)
    reasons = []
    if contrast > 0 and capture_sharpness(pixels) < blur_threshold:
        reasons.append('blur')
    if contrast < contrast_threshold or contrast == 0:
        reasons.append('contrast')
    return tuple(reasons)


def quality_control(captures: Sequence[PhysicalImage], blur_threshold: float,
                    contrast_threshold: float) -> QcResult:
    """Split captures into kept and discarded (with reasons)"""
    if not captures:
        raise InvalidArgumentError("quality_control needs at least one capture")

    result = QcResult(kept=[], discarded=[])
    for capture in captures:
        reasons = qc_reasons(capture, blur_threshold, contrast_threshold)
        if reasons:
            logger.warning(
                f"QC discard {capture.printer_id}/{capture.device_id} template {capture.template_id} "
                f"instance {capture.instance} rep {capture.repetition}: {'+'.join(reasons)}"
            )
            result.discarded.append((capture, reasons))
        else:
            result.kept.append(capture)

    if not result.kept:
        logger.warning(f"QC discarded all {len(captures)} captures")
    return result


def calibrate_qc_thresholds(clean_captures: Sequence[PhysicalImage], percentile: float = 1.0,
                            margin: float = 0.8) -> Tuple[float, float]:
    """Thresholds at a low percentile of clean sharpness/contrast, scaled by margin"""
    if not clean_captures:
        raise InvalidArgumentError("QC calibration needs clean captures")
    sharpness = [capture_sharpness(np.asarray(c.pixels)) for c in clean_captures]
    contrast = [capture_contrast(np.asarray(c.pixels)) for c in clean_captures]
    blur_threshold = float(np.percentile(sharpness, percentile)) * margin
    contrast_threshold = float(np.percentile(contrast, percentile)) * margin
    return blur_threshold, contrast_threshold
