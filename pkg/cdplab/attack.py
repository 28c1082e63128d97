"""
Machine-learning fakes: estimate the digital template from a captured original,
then reprint the estimate on the attacker's printer.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np

from . import autodiff as ad
from .channel import PrinterProfile, PhysicalInstance, print_template
from .errors import InvalidArgumentError, EstimationError
from .imgcore import Template, TemplateKind, PhysicalImage, Origin, template_as_image, derive_seed
from .pix2pix import (
    UNetGenerator, GeneratorConfig, DiscriminatorConfig, TrainConfig, TrainResult,
    fit_translation, to_network_input,
)
from .utils import parallel_map

logger = logging.getLogger('cdplab')


class EstimatorKind(str, Enum):
    THRESHOLD_OTSU = 'threshold_otsu'
    LEARNED_UNET = 'learned_unet'


@dataclass(frozen=True)
class EstimatorSpec:
    kind: EstimatorKind = EstimatorKind.THRESHOLD_OTSU
    network: Optional[UNetGenerator] = None
    threshold: float = 0.5
    train_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'kind', EstimatorKind(self.kind))
        if not 0.0 < self.threshold < 1.0:
            raise InvalidArgumentError(f"Estimator threshold must lie in (0, 1), got {self.threshold}")
        if self.kind == EstimatorKind.LEARNED_UNET and self.network is None:
            raise InvalidArgumentError("learned_unet estimator needs a trained network")

    def check_disjoint(self, evaluation_ids: Sequence[int]):
        """A learned estimator must not have seen the templates it attacks during evaluation"""
        overlap = sorted(set(self.train_ids) & set(evaluation_ids))
        if overlap:
            raise InvalidArgumentError(
                f"Estimator was trained on evaluation templates {overlap[:5]}{'...' if len(overlap) > 5 else ''}"
            )


def _otsu_dark_mask(pixels: np.ndarray) -> np.ndarray:
    quantized = np.floor(pixels * 255.0 + 0.5).astype(np.uint8)
    if quantized.min() == quantized.max():
        raise EstimationError("Probe has a constant histogram; no Otsu threshold exists")
    _, mask = cv2.threshold(quantized, 0, 1, cv2.THRESH_BINARY_INV + cv2.THRESH_OTSU)
    return mask


def estimate_template(probe: PhysicalImage, est: EstimatorSpec,
                      expected_shape: Optional[Tuple[int, int]] = None) -> Template:
    """t_hat (kind=estimated) from a probe registered to the template grid"""
    pixels = np.asarray(probe.pixels)
    if expected_shape is not None and pixels.shape != tuple(expected_shape):
        raise InvalidArgumentError(
            f"Probe of template {probe.template_id} is {pixels.shape}, expected {tuple(expected_shape)}; register it first"
        )

    if est.kind == EstimatorKind.THRESHOLD_OTSU:
        bits = _otsu_dark_mask(pixels)
    else:
        if np.ptp(pixels) == 0:
            raise EstimationError("Probe is constant; nothing to estimate from")
        if pixels.shape[0] != pixels.shape[1]:
            raise InvalidArgumentError(f"Probe of template {probe.template_id} is not square")
        est.network.config.check_size(pixels.shape[0])
        with ad.no_grad():
            white = est.network(to_network_input([pixels])).data[0, 0]
        bits = (white < est.threshold).astype(np.uint8)

    height, width = pixels.shape
    return Template(id=probe.template_id, width=width, height=height, bits=bits, kind=TemplateKind.ESTIMATED)


def bit_error_rate(t_hat: Template, template: Template) -> float:
    if t_hat.bits.shape != template.bits.shape:
        raise InvalidArgumentError(f"Template shapes differ: {t_hat.bits.shape} vs {template.bits.shape}")
    return float(np.mean(t_hat.bits != template.bits))


def make_fake(t_hat: Template, attacker_printer: PrinterProfile, instance_seed: int,
              instance: int = 0) -> PhysicalInstance:
    """Reprint of an estimated template; the microstructure is the attacker's own"""
    if t_hat.kind != TemplateKind.ESTIMATED:
        raise InvalidArgumentError(f"make_fake needs an estimated template, template {t_hat.id} is {t_hat.kind.value}")
    return print_template(t_hat, attacker_printer, instance_seed, instance=instance, origin=Origin.FAKE)


@dataclass(frozen=True)
class FakeRecord:
    template_id: int
    t_hat: Template
    fake: PhysicalInstance


def fake_seed(seed: int, printer_id: str, template_id: int, instance: int = 0) -> int:
    # 'fake' namespace, disjoint from the seeds of original prints
    return derive_seed(seed, 'fake', printer_id, template_id, instance)


def run_attack(probes: Sequence[PhysicalImage], estimator: EstimatorSpec, attacker_printer: PrinterProfile,
               seed: int, expected_shape: Optional[Tuple[int, int]] = None, threads: int = 1) -> List[FakeRecord]:
    """One fake per probed template, in probe order"""
    if not probes:
        return []
    if estimator.kind == EstimatorKind.LEARNED_UNET:
        estimator.check_disjoint([p.template_id for p in probes])

    def attack(probe):
        t_hat = estimate_template(probe, estimator, expected_shape)
        fake = make_fake(t_hat, attacker_printer, fake_seed(seed, attacker_printer.id, probe.template_id))
        return FakeRecord(template_id=probe.template_id, t_hat=t_hat, fake=fake)

    records = parallel_map(attack, probes, threads)
    logger.info(f"Produced {len(records)} fakes on printer {attacker_printer.id} with {estimator.kind.value}")
    return records


def train_estimator(pairs: Sequence[Tuple[PhysicalImage, Template]], cfg: TrainConfig,
                    gen_cfg: GeneratorConfig = GeneratorConfig(), out_dir=None,
                    provenance=None) -> TrainResult:
    """U-Net capture -> template regression, L1 only"""
    if not pairs:
        raise InvalidArgumentError("train_estimator needs at least one (capture, template) pair")
    pairs = list(pairs)[:cfg.n_pairs] if cfg.n_pairs else list(pairs)
    for capture, template in pairs:
        if capture.pixels.shape != template.bits.shape:
            raise InvalidArgumentError(f"Capture of template {template.id} is not registered to its grid")
    gen_cfg.check_size(pairs[0][1].width)

    cfg = replace(cfg, adversarial_weight=0.0, extra_ssim_weight=0.0, extra_l2_weight=0.0,
                  lambda_l1=cfg.lambda_l1 or 1.0)
    conditions = [np.asarray(capture.pixels) for capture, _ in pairs]
    targets = [template_as_image(template) for _, template in pairs]
    return fit_translation(conditions, targets, [t.id for _, t in pairs], cfg, gen_cfg,
                           DiscriminatorConfig(), out_dir, dict(provenance or {}, role='estimator'))
