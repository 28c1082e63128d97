"""
Experiment configuration.

One JSON document holds the profiles, sizes, seeds and training settings.
The bundled default is merged under any user file, `--set a.b=value`
overrides are applied on top, and every section is validated with the forms
in cdplab.forms before typed settings objects are built.
"""

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from django.conf import settings

from . import forms
from .channel import DEFAULT_MICROSTRUCTURE_SCALE, PrinterProfile, DeviceProfile
from .errors import ConfigError, CdpLabError
from .metrics import SsimParams
from .pix2pix import GeneratorConfig, DiscriminatorConfig, TrainConfig

logger = logging.getLogger('cdplab')

SECTION_FORMS = {
    'dataset': forms.DatasetForm,
    'attack': forms.AttackForm,
    'align': forms.AlignForm,
    'qc': forms.QcForm,
    'metrics': forms.MetricsForm,
    'generator': forms.GeneratorForm,
    'discriminator': forms.DiscriminatorForm,
    'train': forms.TrainForm,
    'evaluate': forms.EvaluateForm,
    'calibrate': forms.CalibrateForm,
}
PROFILE_FORMS = {
    'printers': forms.PrinterForm,
    'devices': forms.DeviceForm,
}


@dataclass(frozen=True)
class DatasetSettings:
    n_templates: int
    template_size: int
    black_fraction: float
    train_fraction: float
    n_reps: int


@dataclass(frozen=True)
class AttackSettings:
    estimator: str
    source_device: str
    attacker_printer: Optional[str]
    threshold: float


@dataclass(frozen=True)
class AlignSettings:
    search_radius: int
    peak_floor: float
    margin: int
    subpixel: bool = False


@dataclass(frozen=True)
class QcSettings:
    percentile: float
    margin: float
    calibration_templates: int
    blur_threshold: Optional[float] = None
    contrast_threshold: Optional[float] = None


@dataclass(frozen=True)
class EvaluateSettings:
    n_bins: int
    inversion_tolerance: float
    min_gain: float
    gain_below: float


@dataclass(frozen=True)
class CalibrateSettings:
    target_auc_span: Tuple[float, float]
    n_templates: int
    iterations: int
    multiplier_low: float
    multiplier_high: float


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    dataset: DatasetSettings
    printers: Tuple[PrinterProfile, ...]
    devices: Tuple[DeviceProfile, ...]
    attack: AttackSettings
    align: AlignSettings
    qc: QcSettings
    ssim: SsimParams
    generator: GeneratorConfig
    discriminator: DiscriminatorConfig
    train: TrainConfig
    estimator_epochs: int
    evaluate: EvaluateSettings
    calibrate: CalibrateSettings
    raw: Dict = field(default_factory=dict, compare=False, repr=False)

    def printer(self, printer_id: str) -> PrinterProfile:
        for p in self.printers:
            if p.id == printer_id:
                return p
        raise ConfigError(f"printers: no profile with id '{printer_id}'")

    def device(self, device_id: str) -> DeviceProfile:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise ConfigError(f"devices: no profile with id '{device_id}'")

    @property
    def printer_ids(self) -> List[str]:
        return [p.id for p in self.printers]

    @property
    def device_ids(self) -> List[str]:
        return [d.id for d in self.devices]

    @property
    def ladder(self) -> List[str]:
        """Device ids from the blurriest to the sharpest effective PSF"""
        order = sorted(range(len(self.devices)), key=lambda i: (-self.devices[i].effective_blur, i))
        return [self.devices[i].id for i in order]


def read_config_file(path) -> Dict:
    """Parse a JSON config; syntax errors carry line and column"""
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def deep_merge(base: Dict, override: Dict) -> Dict:
    """Dicts merge recursively, everything else (lists included) is replaced"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _child(container, segment: str, assignment: str):
    if isinstance(container, dict):
        return segment
    if isinstance(container, list):
        if segment.lstrip('-').isdigit():
            index = int(segment)
            if not -len(container) <= index < len(container):
                raise ConfigError(f"--set {assignment}: index {index} out of range")
            return index
        for index, item in enumerate(container):
            if isinstance(item, dict) and item.get('id') == segment:
                return index
        raise ConfigError(f"--set {assignment}: no list item with id '{segment}'")
    raise ConfigError(f"--set {assignment}: cannot descend into a {type(container).__name__}")


def apply_override(data: Dict, assignment: str) -> Dict:
    """Apply one `a.b.c=value` override; list items by index or by profile id"""
    if '=' not in assignment:
        raise ConfigError(f"--set {assignment}: expected dotted.path=value")
    path, raw_value = assignment.split('=', 1)
    segments = [s for s in path.strip().split('.') if s]
    if not segments:
        raise ConfigError(f"--set {assignment}: empty path")

    data = copy.deepcopy(data)
    node = data
    for segment in segments[:-1]:
        key = _child(node, segment, assignment)
        if isinstance(node, dict) and key not in node:
            node[key] = {}
        node = node[key]
    node[_child(node, segments[-1], assignment)] = _parse_value(raw_value)
    return data


def _form_errors(section: str, form) -> List[str]:
    messages = []
    for name, errors in form.errors.items():
        target = section if name == '__all__' else f"{section}.{name}"
        messages.extend(f"{target}: {message}" for message in errors)
    return messages


def _validate_section(data: Dict, section: str, errors: List[str]) -> Dict:
    values = data.get(section)
    if not isinstance(values, dict):
        errors.append(f"{section}: missing or not an object")
        return {}
    form = SECTION_FORMS[section](data=values)
    if not form.is_valid():
        errors.extend(_form_errors(section, form))
        return {}
    unknown = sorted(set(values) - set(form.fields))
    errors.extend(f"{section}.{name}: unknown field" for name in unknown)
    return form.cleaned_data


def _validate_profiles(data: Dict, section: str, errors: List[str]) -> List[Dict]:
    items = data.get(section)
    if not isinstance(items, list) or not items:
        errors.append(f"{section}: expected a non-empty list of profiles")
        return []
    cleaned, seen = [], set()
    for index, item in enumerate(items):
        if not isinstance(item, dict):
            errors.append(f"{section}[{index}]: expected an object")
            continue
        form = PROFILE_FORMS[section](data=item)
        if not form.is_valid():
            errors.extend(_form_errors(f"{section}[{index}]", form))
            continue
        unknown = sorted(set(item) - set(form.fields))
        errors.extend(f"{section}[{index}].{name}: unknown field" for name in unknown)
        if form.cleaned_data['id'] in seen:
            errors.append(f"{section}[{index}].id: duplicate id '{form.cleaned_data['id']}'")
        seen.add(form.cleaned_data['id'])
        cleaned.append(form.cleaned_data)
    return cleaned


def validate_config(data: Dict) -> ExperimentConfig:
    """Validate every section and build the typed configuration"""
    errors: List[str] = []
    if not isinstance(data.get('seed'), int) or isinstance(data.get('seed'), bool) or data.get('seed') < 0:
        errors.append("seed: expected a non-negative integer")

    sections = {name: _validate_section(data, name, errors) for name in SECTION_FORMS}
    printers = _validate_profiles(data, 'printers', errors)
    devices = _validate_profiles(data, 'devices', errors)
    unknown = sorted(set(data) - set(SECTION_FORMS) - set(PROFILE_FORMS) - {'seed'})
    errors.extend(f"{name}: unknown section" for name in unknown)
    if errors:
        raise ConfigError("Invalid configuration:\n  " + "\n  ".join(errors))

    try:
        printer_profiles = tuple(
            PrinterProfile(**dict(
                p, dot_gain_jitter=p['dot_gain_jitter'] or 0.0,
                microstructure_scale=(DEFAULT_MICROSTRUCTURE_SCALE if p['microstructure_scale'] is None
                                      else p['microstructure_scale']),
            )) for p in printers
        )
        device_profiles = tuple(
            DeviceProfile(**dict(d, psf_jitter=d['psf_jitter'] or 0.0)) for d in devices
        )
        metrics = sections['metrics']
        ssim = SsimParams(window=metrics['ssim_window'], k1=metrics['k1'], k2=metrics['k2'],
                          dynamic_range=metrics['dynamic_range'])
        train = dict(sections['train'])
        estimator_epochs = train.pop('estimator_epochs')
        attack = dict(sections['attack'], attacker_printer=sections['attack']['attacker_printer'] or None)
        config = ExperimentConfig(
            seed=int(data['seed']),
            dataset=DatasetSettings(**sections['dataset']),
            printers=printer_profiles,
            devices=device_profiles,
            attack=AttackSettings(**attack),
            align=AlignSettings(**sections['align']),
            qc=QcSettings(**sections['qc']),
            ssim=ssim,
            generator=GeneratorConfig(**sections['generator']),
            discriminator=DiscriminatorConfig(**sections['discriminator']),
            train=TrainConfig(seed=int(data['seed']), ssim=ssim, **train),
            estimator_epochs=estimator_epochs,
            evaluate=EvaluateSettings(**sections['evaluate']),
            calibrate=CalibrateSettings(**dict(sections['calibrate'],
                                               target_auc_span=tuple(sections['calibrate']['target_auc_span']))),
            raw=copy.deepcopy(data),
        )
    except CdpLabError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e

    if config.attack.source_device not in config.device_ids:
        raise ConfigError(f"attack.source_device: unknown device '{config.attack.source_device}'")
    if config.attack.attacker_printer and config.attack.attacker_printer not in config.printer_ids:
        raise ConfigError(f"attack.attacker_printer: unknown printer '{config.attack.attacker_printer}'")
    max_jitter = max(d.shift_jitter_max for d in config.devices)
    if config.align.search_radius < max_jitter:
        raise ConfigError(
            f"align.search_radius: {config.align.search_radius} is below the largest device "
            f"shift_jitter_max ({max_jitter})"
        )
    if 2 * config.align.search_radius >= config.dataset.template_size:
        raise ConfigError("align.search_radius: too large for dataset.template_size")
    return config


def load_config(path=None, overrides: Sequence[str] = (), seed_override=None) -> ExperimentConfig:
    """Defaults <- config file <- --set overrides <- CDP_LAB_SEED"""
    data = read_config_file(settings.CDP_LAB_DEFAULT_CONFIG)
    if path is not None:
        data = deep_merge(data, read_config_file(path))
    for assignment in overrides:
        data = apply_override(data, assignment)

    env_seed = seed_override if seed_override is not None else getattr(settings, 'CDP_LAB_SEED', None)
    if env_seed not in (None, ''):
        try:
            data['seed'] = int(env_seed)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"CDP_LAB_SEED: expected an integer, got '{env_seed}'") from e
        logger.info(f"Seed overridden by CDP_LAB_SEED: {data['seed']}")
    return validate_config(data)


def load_profiles(path=None) -> Tuple[Tuple[PrinterProfile, ...], Tuple[DeviceProfile, ...]]:
    """Printer and device profiles of a config file (bundled defaults when omitted)"""
    config = load_config(path)
    return config.printers, config.devices


def write_config(data: Dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=False)
        f.write('\n')
