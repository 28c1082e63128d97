"""
Synthetic physical CDP generation.

Components:
- UNetGenerator: template t -> synthetic capture x_hat
- PatchDiscriminator: (t, image) -> grid of patch probabilities
- loss_discriminator / loss_generator: adversarial + weighted L1 (optional L2 and SSIM terms)
- train: alternating D/G updates with Adam, loss history and checkpoints
- synthesize_all: x_hat for every template of a split
"""

import logging
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import autodiff as ad
from .autodiff import Tensor, Module, Conv2d, ConvTranspose2d, Adam
from .errors import InvalidArgumentError, NumericError, TrainingError
from .imgcore import (
    Template, PhysicalImage, ImageRole, template_as_image, derive_seed, persist_image,
)
from .metrics import SsimParams
from .utils import parallel_map

logger = logging.getLogger('cdplab')

BCE_EPS = 1e-7
HISTORY_COLUMNS = ['epoch', 'loss_d', 'loss_g', 'loss_l1']


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 4
    base_channels: int = 32
    max_channel_multiplier: int = 8

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise InvalidArgumentError("Generator depth and base_channels must be >= 1")

    def channels(self, level: int) -> int:
        return self.base_channels * min(2 ** level, self.max_channel_multiplier)

    def check_size(self, size: int):
        if size % (2 ** self.depth):
            raise InvalidArgumentError(
                f"Template side {size} is not divisible by 2^depth = {2 ** self.depth}"
            )


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_layers: int = 3
    base_channels: int = 32
    max_channel_multiplier: int = 8

    def __post_init__(self):
        if self.n_layers < 1 or self.base_channels < 1:
            raise InvalidArgumentError("Discriminator n_layers and base_channels must be >= 1")

    def channels(self, level: int) -> int:
        return self.base_channels * min(2 ** level, self.max_channel_multiplier)

    def output_size(self, size: int) -> int:
        for _ in range(self.n_layers):
            size = (size + 2 - 4) // 2 + 1
        # two stride-1 k4 p1 convolutions each remove one pixel
        return size - 2


@dataclass(frozen=True)
class TrainConfig:
    lambda_l1: float = 100.0
    adversarial_weight: float = 1.0
    extra_ssim_weight: float = 0.0
    extra_l2_weight: float = 0.0
    epochs: int = 200
    batch_size: int = 1
    seed: int = 0
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    n_pairs: Optional[int] = None
    checkpoint_every: int = 50
    ssim: SsimParams = field(default_factory=SsimParams)

    def __post_init__(self):
        weights = (self.lambda_l1, self.adversarial_weight, self.extra_ssim_weight, self.extra_l2_weight)
        if any(w < 0 for w in weights):
            raise InvalidArgumentError("Loss weights must be >= 0")
        if not any(w > 0 for w in weights):
            raise InvalidArgumentError("At least one loss weight must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("epochs and batch_size must be >= 1")
        if self.n_pairs is not None and self.n_pairs < 1:
            raise InvalidArgumentError("n_pairs must be >= 1")


def to_network_input(images: Sequence[np.ndarray]) -> Tensor:
    """Stack [0,1] images into an NCHW tensor scaled to [-1, 1]"""
    return Tensor(np.stack([2.0 * np.asarray(img, dtype=np.float64) - 1.0 for img in images])[:, None])


def to_target(images: Sequence[np.ndarray]) -> Tensor:
    """Stack [0,1] images into an NCHW tensor, no rescaling"""
    return Tensor(np.stack([np.asarray(img, dtype=np.float64) for img in images])[:, None])


class UNetGenerator(Module):
    """Encoder-decoder with skip connections, sigmoid output in (0, 1)"""

    def __init__(self, config: GeneratorConfig = GeneratorConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        depth = config.depth

        self.down = []
        in_channels = 1
        for level in range(depth):
            out_channels = config.channels(level)
            self.down.append(Conv2d(in_channels, out_channels, 4, stride=2, padding=1, rng=rng))
            in_channels = out_channels

        self.up = []
        for level in range(depth - 1, 0, -1):
            out_channels = config.channels(level - 1)
            self.up.append(ConvTranspose2d(in_channels, out_channels, 4, stride=2, padding=1, rng=rng))
            in_channels = 2 * out_channels

        self.last = ConvTranspose2d(in_channels, 1, 4, stride=2, padding=1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        depth = self.config.depth
        skips = []
        for level, conv in enumerate(self.down):
            x = conv(x)
            if 0 < level < depth - 1:
                x = ad.instance_norm(x)
            x = ad.leaky_relu(x, 0.2)
            skips.append(x)

        for up, skip in zip(self.up, reversed(skips[:-1])):
            x = ad.relu(ad.instance_norm(up(x)))
            x = ad.concat_channels(x, skip)

        return ad.sigmoid(self.last(x))


class PatchDiscriminator(Module):
    """Conditional PatchGAN: one probability per receptive patch"""

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)

        self.layers = [Conv2d(2, config.channels(0), 4, stride=2, padding=1, rng=rng)]
        in_channels = config.channels(0)
        for level in range(1, config.n_layers):
            self.layers.append(Conv2d(in_channels, config.channels(level), 4, stride=2, padding=1, rng=rng))
            in_channels = config.channels(level)
        self.layers.append(Conv2d(in_channels, config.channels(config.n_layers), 4, stride=1, padding=1, rng=rng))
        self.last = Conv2d(config.channels(config.n_layers), 1, 4, stride=1, padding=1, rng=rng)

    def forward(self, condition: Tensor, image: Tensor) -> Tensor:
        if condition.shape != image.shape:
            raise InvalidArgumentError(f"Discriminator inputs differ: {condition.shape} vs {image.shape}")
        if self.config.output_size(image.shape[-1]) < 1:
            raise InvalidArgumentError(
                f"Image side {image.shape[-1]} too small for a {self.config.n_layers}-layer PatchGAN"
            )
        x = ad.concat_channels(condition, image)
        for index, conv in enumerate(self.layers):
            x = conv(x)
            if index > 0:
                x = ad.instance_norm(x)
            x = ad.leaky_relu(x, 0.2)
        return ad.sigmoid(self.last(x))


def generator_forward(generator: UNetGenerator, template: Template, printer_id: str,
                      device_id: str) -> PhysicalImage:
    """x_hat = G(t) as a synthetic image of the given (printer, device)"""
    if template.width != template.height:
        raise InvalidArgumentError(f"Template {template.id} is not square")
    generator.config.check_size(template.width)
    with ad.no_grad():
        out = generator(to_network_input([template_as_image(template)]))
    return PhysicalImage.from_array(out.data[0, 0], role=ImageRole.SYNTHETIC_XHAT, template_id=template.id,
                                    printer_id=printer_id, device_id=device_id)


def discriminator_forward(discriminator: PatchDiscriminator, template_image: np.ndarray,
                          image: np.ndarray) -> np.ndarray:
    """Patch probability grid for one (t, image) pair"""
    template_image = np.asarray(template_image, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if template_image.shape != image.shape:
        raise InvalidArgumentError(f"Template {template_image.shape} and image {image.shape} differ in size")
    with ad.no_grad():
        out = discriminator(to_network_input([template_image]), to_network_input([image]))
    return out.data[0, 0]


def _as_network_image(image: Tensor) -> Tensor:
    """[0,1] generator output -> [-1,1] discriminator input"""
    return image * 2.0 - 1.0


def loss_discriminator(discriminator: PatchDiscriminator, condition: Tensor, real: Tensor,
                       fake: Tensor) -> Tensor:
    """-mean log D(t, x) - mean log(1 - D(t, x_hat)); fake is detached here"""
    real_prob = discriminator(condition, _as_network_image(real))
    fake_prob = discriminator(condition, _as_network_image(fake.detach()))
    return ad.bce_loss(real_prob, 1.0, BCE_EPS) + ad.bce_loss(fake_prob, 0.0, BCE_EPS)


def differentiable_ssim(a: Tensor, b: Tensor, params: SsimParams = SsimParams()) -> Tensor:
    """Mean SSIM over valid windows, built from graph ops"""
    window = Tensor(params.weights()[None, None])
    c1, c2 = params.c1, params.c2
    mu_a = ad.conv2d(a, window)
    mu_b = ad.conv2d(b, window)
    mu_ab = mu_a * mu_b
    mu_aa = ad.square(mu_a)
    mu_bb = ad.square(mu_b)
    var_a = ad.conv2d(ad.square(a), window) - mu_aa
    var_b = ad.conv2d(ad.square(b), window) - mu_bb
    cov = ad.conv2d(a * b, window) - mu_ab
    numerator = (mu_ab * 2.0 + c1) * (cov * 2.0 + c2)
    denominator = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return ad.tensor_mean(numerator / denominator)


def generator_terms(discriminator: Optional[PatchDiscriminator], condition: Tensor, real: Tensor,
                    fake: Tensor, cfg: TrainConfig) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted generator objective on an already generated fake"""
    l1 = ad.l1_loss(fake, real)
    total = l1 * cfg.lambda_l1
    parts = {'l1': l1.item()}
    if cfg.adversarial_weight > 0:
        if discriminator is None:
            raise InvalidArgumentError("adversarial_weight > 0 needs a discriminator")
        adversarial = ad.bce_loss(discriminator(condition, _as_network_image(fake)), 1.0, BCE_EPS)
        total = total + adversarial * cfg.adversarial_weight
        parts['adversarial'] = adversarial.item()
    if cfg.extra_l2_weight > 0:
        l2 = ad.mse_loss(fake, real)
        total = total + l2 * cfg.extra_l2_weight
        parts['l2'] = l2.item()
    if cfg.extra_ssim_weight > 0:
        ssim_value = differentiable_ssim(real, fake, cfg.ssim)
        total = total + (1.0 - ssim_value) * cfg.extra_ssim_weight
        parts['ssim'] = ssim_value.item()
    return total, parts


def loss_generator(discriminator: Optional[PatchDiscriminator], generator: UNetGenerator, condition: Tensor,
                   real: Tensor, weights: TrainConfig) -> Tensor:
    """adv * -mean log D(t, G(t)) + lambda * mean|x - G(t)| (+ optional L2 / SSIM terms)"""
    fake = generator(condition)
    total, _ = generator_terms(discriminator, condition, real, fake, weights)
    return total


@dataclass
class TrainResult:
    generator: UNetGenerator
    discriminator: Optional[PatchDiscriminator]
    history: pd.DataFrame
    steps: int


def _checkpoint(out_dir: Path, result_g: UNetGenerator, result_d: Optional[PatchDiscriminator],
                header: Dict, history: List[Dict]):
    ad.save_checkpoint(out_dir / 'generator.ckpt', result_g, dict(header, architecture='unet_generator',
                                                                 config=asdict(result_g.config)))
    if result_d is not None:
        ad.save_checkpoint(out_dir / 'discriminator.ckpt', result_d,
                           dict(header, architecture='patch_discriminator', config=asdict(result_d.config)))
    pd.DataFrame(history, columns=HISTORY_COLUMNS).to_csv(out_dir / 'loss_history.csv', index=False)


def train(pairs: Sequence[Tuple[Template, PhysicalImage]], cfg: TrainConfig,
          gen_cfg: GeneratorConfig = GeneratorConfig(), disc_cfg: DiscriminatorConfig = DiscriminatorConfig(),
          out_dir=None, provenance: Optional[Dict] = None) -> TrainResult:
    """Alternating D/G training on (template, registered capture) pairs"""
    if not pairs:
        raise InvalidArgumentError("train needs at least one (template, capture) pair")
    pairs = list(pairs)[:cfg.n_pairs] if cfg.n_pairs else list(pairs)
    size = pairs[0][0].width
    gen_cfg.check_size(size)
    for template, capture in pairs:
        if (template.height, template.width) != (size, size) or capture.pixels.shape != (size, size):
            raise InvalidArgumentError(f"Pair for template {template.id} is not {size}x{size}")

    conditions = [template_as_image(t) for t, _ in pairs]
    targets = [np.asarray(x.pixels) for _, x in pairs]
    return fit_translation(conditions, targets, [t.id for t, _ in pairs], cfg, gen_cfg, disc_cfg,
                           out_dir, provenance)


def fit_translation(conditions: Sequence[np.ndarray], targets: Sequence[np.ndarray], ids: Sequence[int],
                    cfg: TrainConfig, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig,
                    out_dir=None, provenance: Optional[Dict] = None) -> TrainResult:
    """Image-to-image training loop shared by the synthesizer and the learned estimator"""
    size = conditions[0].shape[-1]
    generator = UNetGenerator(gen_cfg, seed=derive_seed(cfg.seed, 'generator'))
    discriminator = None
    if cfg.adversarial_weight > 0:
        if disc_cfg.output_size(size) < 1:
            raise InvalidArgumentError(f"Template side {size} too small for the discriminator")
        discriminator = PatchDiscriminator(disc_cfg, seed=derive_seed(cfg.seed, 'discriminator'))
    opt_g = Adam(generator.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2)
    opt_d = Adam(discriminator.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2) if discriminator else None

    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, 'shuffle'))
    out_dir = Path(out_dir) if out_dir is not None else None
    header = {'seed': cfg.seed, 'provenance': provenance or {},
              'train_ids': [int(i) for i in ids], 'train_config': asdict(cfg)}

    history = []
    step = 0
    logger.info(f"Training on {len(conditions)} pairs of {size}x{size} for {cfg.epochs} epochs")
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(conditions))
        sums = {'loss_d': 0.0, 'loss_g': 0.0, 'loss_l1': 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            step += 1
            condition = to_network_input([conditions[i] for i in batch])
            real = to_target([targets[i] for i in batch])
            try:
                fake = generator(condition)

                if discriminator is not None:
                    opt_d.zero_grad()
                    loss_d = loss_discriminator(discriminator, condition, real, fake)
                    loss_d.backward()
                    opt_d.step()
                    sums['loss_d'] += loss_d.item()

                opt_g.zero_grad()
                loss_g, parts = generator_terms(discriminator, condition, real, fake, cfg)
                loss_g.backward()
                opt_g.step()
            except NumericError as e:
                logger.error(f"Training aborted at epoch {epoch}, step {step}: {e}")
                raise TrainingError(f"Non-finite loss: {e}", epoch=epoch, step=step) from e

            sums['loss_g'] += loss_g.item()
            sums['loss_l1'] += parts['l1']
            n_batches += 1

        row = {'epoch': epoch, **{k: v / n_batches for k, v in sums.items()}}
        history.append(row)
        logger.info(
            f"epoch {epoch}/{cfg.epochs}: loss_d={row['loss_d']:.5f} "
            f"loss_g={row['loss_g']:.5f} loss_l1={row['loss_l1']:.5f}"
        )
        if out_dir is not None and (epoch % max(cfg.checkpoint_every, 1) == 0 or epoch == cfg.epochs):
            _checkpoint(out_dir, generator, discriminator, dict(header, epoch=epoch, step=step), history)

    return TrainResult(generator=generator, discriminator=discriminator,
                       history=pd.DataFrame(history, columns=HISTORY_COLUMNS), steps=step)


def load_generator(path) -> Tuple[UNetGenerator, Dict]:
    """Restore G and the checkpoint header (provenance included)"""
    header, state = ad.load_checkpoint(path)
    if header.get('architecture') != 'unet_generator':
        raise InvalidArgumentError(f"{path} does not hold a U-Net generator")
    generator = UNetGenerator(GeneratorConfig(**header['config']))
    generator.load_state_dict(state)
    return generator, header


def synthesize_all(generator: UNetGenerator, templates: Sequence[Template], out_dir, printer_id: str,
                   device_id: str, threads: int = 1) -> List[Path]:
    """One x_hat per template written as out_dir/xhat_{id}.png"""
    out_dir = Path(out_dir)

    def synthesize(template):
        path = out_dir / f'xhat_{template.id:04d}.png'
        persist_image(generator_forward(generator, template, printer_id, device_id), path)
        return path

    paths = parallel_map(synthesize, templates, threads)
    if paths:
        logger.info(f"Synthesized {len(paths)} images for {printer_id}/{device_id} in {out_dir}")
    return paths
