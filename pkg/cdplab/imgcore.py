"""
Core image types for the lab:
- Template: binary digital CDP t (and estimated t_hat)
- PhysicalImage: grayscale print or capture with provenance
- DatasetManifest: seeds, ids and the train/test split

Also holds template generation and the on-disk dataset layout.
"""

import os
import re
import json
import hashlib
import logging
from dataclasses import dataclass, field, replace, asdict
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image

from .errors import (
    InvalidArgumentError, ImageIOError, ImageParseError, DuplicateTemplateError,
)

logger = logging.getLogger('cdplab')

PNG_SIGNATURE = b'\x89PNG\r\n\x1a\n'
# Bit-depth byte of the IHDR chunk: signature, chunk length, type, width, height.
PNG_BIT_DEPTH_OFFSET = 24
QUANT_LEVELS = 65535


class TemplateKind(str, Enum):
    ORIGINAL = 'original'
    ESTIMATED = 'estimated'


class ImageRole(str, Enum):
    ORIGINAL_X = 'original_x'
    ENROLLED_XE = 'enrolled_xe'
    FAKE_F = 'fake_f'
    SYNTHETIC_XHAT = 'synthetic_xhat'
    CAPTURE_Y = 'capture_y'


class Origin(str, Enum):
    ORIGINAL = 'original'
    FAKE = 'fake'


def derive_seed(master_seed: int, *keys) -> int:
    """Stable 63-bit seed for a coordinate in the experiment grid"""
    text = '/'.join([str(int(master_seed))] + [str(k) for k in keys])
    digest = hashlib.blake2b(text.encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little') & ((1 << 63) - 1)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Template:
    """Binary digital CDP; bits is (height, width), 1 = black ink"""

    id: int
    width: int
    height: int
    bits: np.ndarray
    kind: TemplateKind = TemplateKind.ORIGINAL

    def __post_init__(self):
        if self.id < 0:
            raise InvalidArgumentError(f"Template id must be >= 0, got {self.id}")
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if bits.shape != (self.height, self.width):
            raise InvalidArgumentError(
                f"Template bits shape {bits.shape} does not match {self.height}x{self.width}"
            )
        if bits.size and bits.max() > 1:
            raise InvalidArgumentError("Template bits must be 0 or 1")
        object.__setattr__(self, 'kind', TemplateKind(self.kind))
        object.__setattr__(self, 'bits', _frozen(bits))

    @property
    def black_count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, Template):
            return NotImplemented
        return (self.id, self.width, self.height, self.kind) == \
            (other.id, other.width, other.height, other.kind) and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True, eq=False)
class PhysicalImage:
    """Grayscale image in [0, 1] (0 = black) with provenance"""

    pixels: np.ndarray
    role: ImageRole
    template_id: int
    printer_id: str
    device_id: Optional[str] = None
    instance: int = 0
    repetition: Optional[int] = None

    def __post_init__(self):
        pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise InvalidArgumentError(f"PhysicalImage needs a 2-D array, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)):
            raise InvalidArgumentError("PhysicalImage pixels must be finite")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise InvalidArgumentError("PhysicalImage pixels must lie in [0, 1]; use from_array to clamp")
        role = ImageRole(self.role)
        if role == ImageRole.SYNTHETIC_XHAT and not self.device_id:
            raise InvalidArgumentError("Synthetic images are generated per imaging device; device_id is required")
        object.__setattr__(self, 'role', role)
        object.__setattr__(self, 'pixels', _frozen(pixels))

    @classmethod
    def from_array(cls, array, **provenance) -> 'PhysicalImage':
        """Build an image from raw values, clamping into [0, 1]"""
        array = np.asarray(array, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise InvalidArgumentError("Cannot build an image from non-finite values")
        return cls(pixels=np.clip(array, 0.0, 1.0), **provenance)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def with_pixels(self, array, **changes) -> 'PhysicalImage':
        """Copy with new (clamped) pixels and optional provenance changes"""
        return replace(self, pixels=np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0), **changes)


@dataclass(frozen=True)
class QcEntry:
    capture_path: str
    keep: bool
    reason: str = ''


@dataclass(frozen=True)
class DatasetManifest:
    seed: int
    n_templates: int
    template_size: int
    black_fraction: float
    printer_ids: Tuple[str, ...] = ()
    device_ids: Tuple[str, ...] = ()
    train_ids: Tuple[int, ...] = ()
    test_ids: Tuple[int, ...] = ()
    split_seed: Optional[int] = None
    train_fraction: Optional[float] = None
    qc_log: Tuple[QcEntry, ...] = field(default=())

    @property
    def template_ids(self) -> List[int]:
        return list(range(self.n_templates))

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['printer_ids'] = list(self.printer_ids)
        data['device_ids'] = list(self.device_ids)
        data['split'] = {'train_ids': list(self.train_ids), 'test_ids': list(self.test_ids)}
        del data['train_ids'], data['test_ids']
        data['qc_log'] = [asdict(entry) for entry in self.qc_log]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'DatasetManifest':
        split = data.get('split', {})
        return cls(
            seed=int(data['seed']),
            n_templates=int(data['n_templates']),
            template_size=int(data['template_size']),
            black_fraction=float(data['black_fraction']),
            printer_ids=tuple(data.get('printer_ids', ())),
            device_ids=tuple(data.get('device_ids', ())),
            train_ids=tuple(int(i) for i in split.get('train_ids', ())),
            test_ids=tuple(int(i) for i in split.get('test_ids', ())),
            split_seed=data.get('split_seed'),
            train_fraction=data.get('train_fraction'),
            qc_log=tuple(QcEntry(**entry) for entry in data.get('qc_log', ())),
        )


def generate_template(seed: int, width: int, height: int, black_fraction: float,
                      template_id: int = 0) -> Template:
    """Exactly floor(black_fraction * width * height) black pixels at seeded positions"""
    if width < 4 or height < 4:
        raise InvalidArgumentError(f"Template dimensions must be >= 4, got {width}x{height}")
    if not 0.0 < black_fraction < 1.0:
        raise InvalidArgumentError(f"black_fraction must lie in (0, 1), got {black_fraction}")

    n_pixels = width * height
    n_black = int(np.floor(black_fraction * n_pixels))
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_pixels)
    flat = np.zeros(n_pixels, dtype=np.uint8)
    flat[order[:n_black]] = 1
    return Template(id=template_id, width=width, height=height,
                    bits=flat.reshape(height, width), kind=TemplateKind.ORIGINAL)


def generate_dataset(seed: int, n: int, size: int, black_fraction: float,
                     printer_ids=(), device_ids=()) -> Tuple[List[Template], DatasetManifest]:
    """n pairwise-distinct templates with per-template seeds derived from the master seed"""
    if n < 2:
        raise InvalidArgumentError(f"A dataset needs at least 2 templates, got {n}")

    templates = []
    seen = {}
    for template_id in range(n):
        template = generate_template(derive_seed(seed, 'template', template_id), size, size,
                                     black_fraction, template_id=template_id)
        key = template.bits.tobytes()
        if key in seen:
            raise DuplicateTemplateError(
                f"Templates {seen[key]} and {template_id} are identical; "
                f"regenerate the dataset with a different master seed"
            )
        seen[key] = template_id
        templates.append(template)

    manifest = DatasetManifest(
        seed=seed, n_templates=n, template_size=size, black_fraction=black_fraction,
        printer_ids=tuple(printer_ids), device_ids=tuple(device_ids),
    )
    logger.info(f"Generated {n} templates of {size}x{size} (seed={seed})")
    return templates, manifest


def split_dataset(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Seeded shuffle then prefix split; |train| = round(train_fraction * n)"""
    if not 0.0 < train_fraction < 1.0:
        raise InvalidArgumentError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = manifest.n_templates
    n_train = int(np.floor(train_fraction * n + 0.5))
    if n_train == 0 or n_train == n:
        raise InvalidArgumentError(
            f"train_fraction {train_fraction} leaves an empty split for {n} templates"
        )
    order = np.random.default_rng(seed).permutation(n)
    train_ids = tuple(sorted(int(i) for i in order[:n_train]))
    test_ids = tuple(sorted(int(i) for i in order[n_train:]))
    return replace(manifest, train_ids=train_ids, test_ids=test_ids,
                   split_seed=seed, train_fraction=train_fraction)


def template_as_image(template: Template) -> np.ndarray:
    """Template as a float image, white = 1"""
    return 1.0 - template.bits.astype(np.float64)


class DatasetLayout:
    """Paths of the on-disk dataset"""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def manifest(self) -> Path:
        return self.root / 'manifest.json'

    def template(self, template_id: int) -> Path:
        return self.root / 'templates' / f't_{template_id:04d}.png'

    def estimated(self, printer: str, template_id: int) -> Path:
        return self.root / 'estimated' / printer / f'that_{template_id:04d}.png'

    def physical(self, printer: str, origin: str, template_id: int, instance: int) -> Path:
        return self.root / 'physical' / printer / Origin(origin).value / f'x_{template_id:04d}_{instance}.png'

    def capture_dir(self, printer: str, device: str, origin: str) -> Path:
        return self.root / 'captures' / printer / device / Origin(origin).value

    def capture(self, printer: str, device: str, origin: str, template_id: int,
                instance: int, rep: int) -> Path:
        return self.capture_dir(printer, device, origin) / f'y_{template_id:04d}_{instance}_{rep}.png'

    def synthetic_dir(self, printer: str, device: str) -> Path:
        return self.root / 'synthetic' / printer / device

    def synthetic(self, printer: str, device: str, template_id: int) -> Path:
        return self.synthetic_dir(printer, device) / f'xhat_{template_id:04d}.png'

    def model_dir(self, printer: str, device: str) -> Path:
        return self.root / 'models' / printer / device

    def estimator_dir(self, printer: str) -> Path:
        return self.root / 'models' / printer / 'estimator'

    @property
    def qc_log(self) -> Path:
        return self.root / 'captures' / 'qc_log.csv'

    @property
    def fake_qc_log(self) -> Path:
        return self.root / 'captures' / 'qc_log_fake.csv'

    @property
    def qc_thresholds(self) -> Path:
        return self.root / 'captures' / 'qc_thresholds.json'

    @property
    def results(self) -> Path:
        return self.root / 'results'

    def run_record(self, command: str) -> Path:
        return self.root / 'runs' / f'{command}.json'


def save_manifest(manifest: DatasetManifest, layout: DatasetLayout):
    """Write manifest.json (the QC log lives next to the captures)"""
    layout.root.mkdir(parents=True, exist_ok=True)
    data = manifest.to_dict()
    data['qc_log'] = []
    with open(layout.manifest, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def load_manifest(layout: DatasetLayout) -> DatasetManifest:
    """Read manifest.json and merge the QC logs of the simulate and attack stages"""
    try:
        with open(layout.manifest, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ImageIOError(f"Manifest not found: {layout.manifest}") from e
    manifest = DatasetManifest.from_dict(data)
    entries = []
    for log_path in (layout.qc_log, layout.fake_qc_log):
        if not log_path.exists():
            continue
        df = pd.read_csv(log_path, keep_default_na=False)
        entries.extend(
            QcEntry(capture_path=row.capture_path, keep=str(row.keep) in ('True', 'true', '1'),
                    reason=str(row.reason))
            for row in df.itertuples(index=False)
        )
    if entries:
        manifest = replace(manifest, qc_log=tuple(entries))
    return manifest


# File name conventions of the dataset layout
_TEMPLATE_RE = re.compile(r'^t_(\d{4,})\.png$')
_ESTIMATED_RE = re.compile(r'^that_(\d{4,})\.png$')
_PHYSICAL_RE = re.compile(r'^x_(\d{4,})_(\d+)\.png$')
_CAPTURE_RE = re.compile(r'^y_(\d{4,})_(\d+)_(\d+)\.png$')
_SYNTHETIC_RE = re.compile(r'^xhat_(\d{4,})\.png$')


def persist_image(img: Union[PhysicalImage, Template], path):
    """Write a 16-bit grayscale PNG; provenance is carried by the path"""
    path = Path(path)
    if isinstance(img, Template):
        values = (1 - img.bits.astype(np.int64)) * QUANT_LEVELS
    elif isinstance(img, PhysicalImage):
        values = np.floor(img.pixels * QUANT_LEVELS + 0.5)
    else:
        raise InvalidArgumentError(f"Cannot persist object of type {type(img).__name__}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(values.astype(np.uint16)).save(path, format='PNG')
    except OSError as e:
        raise ImageIOError(f"Could not write image {path}: {e}") from e


def _read_png(path: Path) -> np.ndarray:
    try:
        with open(path, 'rb') as f:
            head = f.read(PNG_BIT_DEPTH_OFFSET + 1)
    except FileNotFoundError as e:
        raise ImageIOError(f"Image not found: {path}") from e
    except OSError as e:
        raise ImageIOError(f"Could not read image {path}: {e}") from e

    if head[:8] != PNG_SIGNATURE:
        raise ImageParseError(path, 0, 'missing PNG signature')
    if len(head) <= PNG_BIT_DEPTH_OFFSET:
        raise ImageParseError(path, len(head), 'truncated header')
    if head[PNG_BIT_DEPTH_OFFSET] != 16:
        raise ImageParseError(path, PNG_BIT_DEPTH_OFFSET, f'bit depth {head[PNG_BIT_DEPTH_OFFSET]}, expected 16')

    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ('I;16', 'I;16B', 'I;16L', 'I'):
                raise ImageParseError(path, PNG_BIT_DEPTH_OFFSET + 1, f'color mode {img.mode}, expected grayscale')
            return np.asarray(img).astype(np.int64)
    except ImageParseError:
        raise
    except (OSError, SyntaxError, ValueError) as e:
        raise ImageParseError(path, os.path.getsize(path), f'corrupt image data ({e})') from e


def load_image(path) -> Union[PhysicalImage, Template]:
    """Read an image back, reconstructing its provenance from the layout"""
    path = Path(path)
    values = _read_png(path)
    name = path.name
    parts = path.parts

    match = _TEMPLATE_RE.match(name) or _ESTIMATED_RE.match(name)
    if match:
        if not np.all((values == 0) | (values == QUANT_LEVELS)):
            raise ImageParseError(path, PNG_BIT_DEPTH_OFFSET, 'template image is not binary')
        kind = TemplateKind.ESTIMATED if name.startswith('that_') else TemplateKind.ORIGINAL
        height, width = values.shape
        return Template(id=int(match.group(1)), width=width, height=height,
                        bits=(values == 0).astype(np.uint8), kind=kind)

    pixels = values.astype(np.float64) / QUANT_LEVELS
    match = _CAPTURE_RE.match(name)
    if match:
        # captures/{printer}/{device}/{origin}/y_...
        origin, device, printer = parts[-2], parts[-3], parts[-4]
        return PhysicalImage(pixels=pixels, role=ImageRole.CAPTURE_Y,
                             template_id=int(match.group(1)), printer_id=printer, device_id=device,
                             instance=int(match.group(2)), repetition=int(match.group(3)))
    match = _PHYSICAL_RE.match(name)
    if match:
        # physical/{printer}/{origin}/x_...
        origin, printer = parts[-2], parts[-3]
        role = ImageRole.FAKE_F if origin == Origin.FAKE.value else ImageRole.ORIGINAL_X
        return PhysicalImage(pixels=pixels, role=role, template_id=int(match.group(1)),
                             printer_id=printer, instance=int(match.group(2)))
    match = _SYNTHETIC_RE.match(name)
    if match:
        # synthetic/{printer}/{device}/xhat_...
        device, printer = parts[-2], parts[-3]
        return PhysicalImage(pixels=pixels, role=ImageRole.SYNTHETIC_XHAT,
                             template_id=int(match.group(1)), printer_id=printer, device_id=device)

    raise InvalidArgumentError(f"{path} does not follow the dataset naming convention")
