"""
Registration of captures onto the template grid.

Captures are resampled back to template resolution, then an exhaustive
integer-shift search finds the translation that best correlates the capture
with the template. A parabolic subpixel refinement can be switched on.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
import pandas as pd

from .channel import translate_image, PAPER_WHITE
from .errors import InvalidArgumentError, RegistrationFailedError, UndefinedCorrelationError
from .imgcore import PhysicalImage, Template, template_as_image
from .metrics import pcorr
from .utils import parallel_map

logger = logging.getLogger('cdplab')

DEFAULT_PEAK_FLOOR = 0.05
FAILURE_LOG_COLUMNS = ['capture_path', 'template_id', 'peak_pcorr', 'reason']


@dataclass(frozen=True)
class Registration:
    aligned: PhysicalImage
    shift: Tuple[float, float]
    peak: float


@dataclass(frozen=True)
class RegistrationFailure:
    capture_path: str
    template_id: int
    peak_pcorr: float
    reason: str


@dataclass
class BatchRegistration:
    aligned: List[Optional[Registration]]
    failures: List[RegistrationFailure]

    @property
    def succeeded(self) -> List[Registration]:
        return [r for r in self.aligned if r is not None]


def to_template_resolution(capture: PhysicalImage, template: Template) -> np.ndarray:
    """Bilinear resample of the capture onto the template grid"""
    pixels = np.asarray(capture.pixels)
    if pixels.shape == (template.height, template.width):
        return pixels
    return cv2.resize(pixels, (template.width, template.height), interpolation=cv2.INTER_LINEAR)


def _candidate_shifts(radius: int) -> List[Tuple[int, int]]:
    # Visiting order implements the tie-break: smallest norm, then (dx, dy) lexicographic.
    shifts = [(dx, dy) for dx in range(-radius, radius + 1) for dy in range(-radius, radius + 1)]
    return sorted(shifts, key=lambda s: (s[0] * s[0] + s[1] * s[1], s[0], s[1]))


def correlation_surface(image: np.ndarray, reference: np.ndarray, radius: int) -> np.ndarray:
    """pcorr of the central crops for every shift; surface[dy + r, dx + r]"""
    height, width = reference.shape
    if 2 * radius >= min(height, width):
        raise InvalidArgumentError(f"search radius {radius} too large for a {height}x{width} template")
    core = reference[radius:height - radius, radius:width - radius]
    surface = np.full((2 * radius + 1, 2 * radius + 1), -np.inf)
    for dx, dy in _candidate_shifts(radius):
        window = image[radius + dy:height - radius + dy, radius + dx:width - radius + dx]
        try:
            surface[dy + radius, dx + radius] = pcorr(window, core)
        except UndefinedCorrelationError:
            surface[dy + radius, dx + radius] = 0.0
    return surface


def _parabolic_offset(left: float, centre: float, right: float) -> float:
    curvature = left - 2.0 * centre + right
    if curvature >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / curvature, -0.5, 0.5))


def register(capture: PhysicalImage, template: Template, search_radius: int,
             peak_floor: float = DEFAULT_PEAK_FLOOR, subpixel: bool = False) -> Registration:
    """Undo resampling and translation of a capture relative to its template"""
    if search_radius < 0:
        raise InvalidArgumentError(f"search_radius must be >= 0, got {search_radius}")

    image = to_template_resolution(capture, template)
    surface = correlation_surface(image, template_as_image(template), search_radius)

    best, peak = (0, 0), -np.inf
    for dx, dy in _candidate_shifts(search_radius):
        value = surface[dy + search_radius, dx + search_radius]
        if value > peak:
            best, peak = (dx, dy), value

    if peak < peak_floor:
        logger.warning(
            f"Registration failed for template {template.id} ({capture.printer_id}/{capture.device_id} "
            f"instance {capture.instance} rep {capture.repetition}): peak {peak:.4f}"
        )
        raise RegistrationFailedError(template.id, float(peak), peak_floor)

    dx, dy = best
    if subpixel:
        row, col = dy + search_radius, dx + search_radius
        last = 2 * search_radius
        sub_dx = _parabolic_offset(surface[row, col - 1], peak, surface[row, col + 1]) if 0 < col < last else 0.0
        sub_dy = _parabolic_offset(surface[row - 1, col], peak, surface[row + 1, col]) if 0 < row < last else 0.0
        shift = (dx + sub_dx, dy + sub_dy)
        warp = np.float64([[1.0, 0.0, -shift[0]], [0.0, 1.0, -shift[1]]])
        aligned = cv2.warpAffine(image, warp, (template.width, template.height), flags=cv2.INTER_LINEAR,
                                 borderMode=cv2.BORDER_CONSTANT, borderValue=PAPER_WHITE)
    else:
        shift = (dx, dy)
        aligned = translate_image(image, -dx, -dy, fill=PAPER_WHITE)

    return Registration(aligned=capture.with_pixels(aligned), shift=shift, peak=float(peak))


def batch_register(captures: Sequence[PhysicalImage], templates: Sequence[Template], search_radius: int,
                   peak_floor: float = DEFAULT_PEAK_FLOOR, paths: Optional[Sequence[str]] = None,
                   subpixel: bool = False, threads: int = 1) -> BatchRegistration:
    """Register captures[i] against templates[i]; failures are logged, not raised"""
    if len(captures) != len(templates):
        raise InvalidArgumentError(f"{len(captures)} captures but {len(templates)} templates")
    paths = list(paths) if paths is not None else [''] * len(captures)

    def run(index):
        try:
            return register(captures[index], templates[index], search_radius, peak_floor, subpixel), None
        except RegistrationFailedError as e:
            return None, RegistrationFailure(str(paths[index]), templates[index].id, e.peak, 'peak below floor')

    results = parallel_map(run, range(len(captures)), threads)
    failures = [failure for _, failure in results if failure is not None]
    if failures:
        logger.warning(f"{len(failures)} of {len(captures)} captures failed registration")
    return BatchRegistration(aligned=[registration for registration, _ in results], failures=failures)


def write_failure_log(failures: Sequence[RegistrationFailure], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [[f.capture_path, f.template_id, round(f.peak_pcorr, 6), f.reason] for f in failures]
    pd.DataFrame(rows, columns=FAILURE_LOG_COLUMNS).to_csv(path, index=False)
