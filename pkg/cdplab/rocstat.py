"""
ROC analysis of authentication scores.

Originals are the positive class and a higher score means "more original".
No decision threshold is ever chosen here; the module only reports curves,
areas and distributions per (printer, device, metric, reference) cell.
"""

import json
import logging
from dataclasses import dataclass, asdict, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib
matplotlib.use('Agg')
from matplotlib import pyplot as plt
import numpy as np
import pandas as pd
from scipy import stats

from .errors import InvalidArgumentError, ImageIOError
from .imgcore import Origin
from .metrics import Metric

logger = logging.getLogger('cdplab')

SCORE_COLUMNS = ['printer', 'device', 'reference', 'metric', 'origin', 'template_id', 'instance',
                 'repetition', 'score']
CELL_KEYS = ['printer', 'device', 'metric', 'reference']
SVG_HASH_SALT = 'cdp-lab'


class Reference(str, Enum):
    TEMPLATE = 't'
    SYNTHETIC = 'xhat'
    ENROLLED = 'xe'


@dataclass(frozen=True)
class ScoreRecord:
    printer_id: str
    device_id: str
    reference: Reference
    metric: Metric
    origin: Origin
    template_id: int
    instance: int
    repetition: int
    score: float
    enrollment_template_id: Optional[int] = None
    enrollment_instance: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'reference', Reference(self.reference))
        object.__setattr__(self, 'metric', Metric(self.metric))
        object.__setattr__(self, 'origin', Origin(self.origin))
        if not np.isfinite(self.score):
            raise InvalidArgumentError(f"Score for template {self.template_id} is not finite")
        if self.reference == Reference.ENROLLED:
            if self.enrollment_instance is None or self.enrollment_template_id is None:
                raise InvalidArgumentError("xe scores must record the enrollment template and instance")
            if self.enrollment_template_id != self.template_id:
                raise InvalidArgumentError("xe scores compare a probe with the enrollment of its own template")

    @property
    def cell(self) -> Tuple[str, str, str, str]:
        return self.printer_id, self.device_id, self.metric.value, self.reference.value

    def to_row(self) -> List:
        return [self.printer_id, self.device_id, self.reference.value, self.metric.value, self.origin.value,
                self.template_id, self.instance, self.repetition, self.score]


@dataclass
class ScoreSet:
    positives: np.ndarray
    negatives: np.ndarray
    printer_id: str = ''
    device_id: str = ''
    metric: str = ''
    reference: str = ''

    def __post_init__(self):
        self.positives = np.asarray(self.positives, dtype=np.float64).ravel()
        self.negatives = np.asarray(self.negatives, dtype=np.float64).ravel()

    @property
    def cell(self) -> Tuple[str, str, str, str]:
        return self.printer_id, self.device_id, self.metric, self.reference

    def require_both_classes(self):
        if self.positives.size == 0 or self.negatives.size == 0:
            raise InvalidArgumentError(
                f"ROC needs originals and fakes; cell {self.cell} has "
                f"{self.positives.size} originals and {self.negatives.size} fakes"
            )


def _roc_counts(s: ScoreSet) -> Tuple[np.ndarray, np.ndarray]:
    """Cumulative (fakes, originals) at or above each distinct threshold, led by (0, 0)"""
    s.require_both_classes()
    pos = np.sort(s.positives)
    neg = np.sort(s.negatives)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tp = pos.size - np.searchsorted(pos, thresholds, side='left')
    fp = neg.size - np.searchsorted(neg, thresholds, side='left')
    return np.concatenate([[0], fp]), np.concatenate([[0], tp])


def roc_curve(s: ScoreSet) -> List[Tuple[float, float]]:
    """(FPR, TPR) at every distinct threshold, from (0, 0) to (1, 1)"""
    fp, tp = _roc_counts(s)
    return [(f / s.negatives.size, t / s.positives.size) for f, t in zip(fp.tolist(), tp.tolist())]


def auc(s: ScoreSet) -> float:
    """Trapezoidal area under roc_curve, accumulated on integer counts"""
    fp, tp = _roc_counts(s)
    area = np.sum(np.diff(fp) * (tp[1:] + tp[:-1]))
    return float(area) / (2.0 * s.positives.size * s.negatives.size)


def mann_whitney_auc(s: ScoreSet) -> float:
    """P(original > fake) + P(tie) / 2 from the Mann-Whitney U statistic"""
    s.require_both_classes()
    u = stats.mannwhitneyu(s.positives, s.negatives, alternative='two-sided', method='asymptotic').statistic
    return float(u) / (s.positives.size * s.negatives.size)


def records_frame(records: Sequence[ScoreRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in records], columns=SCORE_COLUMNS)


def write_scores_csv(records: Sequence[ScoreRecord], path) -> pd.DataFrame:
    """scores.csv sorted by experiment coordinates"""
    df = records_frame(records).sort_values(
        ['printer', 'device', 'reference', 'metric', 'origin', 'template_id', 'instance', 'repetition'],
        kind='mergesort',
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format='%.12f')
    return df


def read_scores_csv(path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype={'printer': str, 'device': str, 'reference': str, 'metric': str,
                                      'origin': str})
    except FileNotFoundError as e:
        raise ImageIOError(f"Scores file not found: {path}") from e
    missing = [c for c in SCORE_COLUMNS if c not in df.columns]
    if missing:
        raise InvalidArgumentError(f"{path} lacks columns {missing}")
    return df


def score_sets(df: pd.DataFrame) -> Dict[Tuple[str, str, str, str], ScoreSet]:
    """One ScoreSet per (printer, device, metric, reference) cell"""
    sets = {}
    for key, group in df.groupby(CELL_KEYS, sort=True):
        key = tuple(str(k) for k in key)
        sets[key] = ScoreSet(
            positives=group.loc[group['origin'] == Origin.ORIGINAL.value, 'score'].to_numpy(),
            negatives=group.loc[group['origin'] == Origin.FAKE.value, 'score'].to_numpy(),
            printer_id=key[0], device_id=key[1], metric=key[2], reference=key[3],
        )
    return sets


@dataclass
class AucTable:
    cells: Dict[Tuple[str, str, str, str], float] = field(default_factory=dict)
    missing: List[Tuple[str, str, str, str]] = field(default_factory=list)

    def get(self, printer, device, metric, reference) -> Optional[float]:
        return self.cells.get((printer, device, Metric(metric).value, Reference(reference).value))

    def to_nested(self) -> Dict:
        nested: Dict = {}
        for (printer, device, metric, reference), value in sorted(self.cells.items()):
            nested.setdefault(printer, {}).setdefault(device, {}).setdefault(metric, {})[reference] = round(value, 6)
        return nested

    def write_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_nested(), f, indent=2, sort_keys=True)
            f.write('\n')

    def frame(self) -> pd.DataFrame:
        rows = [list(key) + [value] for key, value in sorted(self.cells.items())]
        return pd.DataFrame(rows, columns=CELL_KEYS + ['auc'])


def auc_table(df: pd.DataFrame, printers: Sequence[str] = (), devices: Sequence[str] = (),
              metrics: Sequence[str] = (), references: Sequence[str] = ()) -> AucTable:
    """AUC per cell; cells of the expected grid without both classes are reported missing"""
    table = AucTable()
    for key, s in score_sets(df).items():
        if s.positives.size and s.negatives.size:
            table.cells[key] = auc(s)

    expected = [(p, d, Metric(m).value, Reference(r).value)
                for p in printers for d in devices for m in metrics for r in references]
    table.missing = [key for key in expected if key not in table.cells]
    incomplete = [key for key in score_sets(df) if key not in table.cells and key not in table.missing]
    table.missing.extend(incomplete)
    for key in table.missing:
        logger.warning(f"AUC cell {'/'.join(key)} is missing (no originals or no fakes scored)")
    return table


def histogram_export(s: ScoreSet, n_bins: int) -> Dict:
    """Shared bin edges over the observed range, counts per class"""
    if n_bins < 2:
        raise InvalidArgumentError(f"n_bins must be >= 2, got {n_bins}")
    scores = np.concatenate([s.positives, s.negatives])
    if scores.size == 0:
        raise InvalidArgumentError(f"Histogram of an empty score set {s.cell}")
    low, high = float(scores.min()), float(scores.max())
    if low == high:
        low, high = low - 0.5, high + 0.5
    edges = np.linspace(low, high, n_bins + 1)
    return {
        'edges': edges.tolist(),
        'original': np.histogram(s.positives, bins=edges)[0].tolist(),
        'fake': np.histogram(s.negatives, bins=edges)[0].tolist(),
    }


def _save_svg(fig, path):
    plt.rcParams['svg.hashsalt'] = SVG_HASH_SALT
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)


def roc_svg(s: ScoreSet, path, title: Optional[str] = None):
    """ROC curve with diagonal reference and AUC annotation"""
    points = np.asarray(roc_curve(s))
    area = auc(s)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(points[:, 0], points[:, 1], color='tab:blue', linewidth=1.5)
    ax.plot([0, 1], [0, 1], color='grey', linestyle='--', linewidth=0.8)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel('False positive rate (fakes accepted)')
    ax.set_ylabel('True positive rate (originals accepted)')
    ax.set_title(title or ' / '.join(s.cell))
    ax.text(0.55, 0.1, f'AUC = {area:.3f}', transform=ax.transAxes)
    fig.tight_layout()
    _save_svg(fig, path)


def scatter_export(df: pd.DataFrame, printer: str, reference: str = Reference.TEMPLATE.value) -> pd.DataFrame:
    """pcorr against ssim for every probe of one printer and reference"""
    subset = df[(df['printer'] == printer) & (df['reference'] == Reference(reference).value)]
    index = ['device', 'origin', 'template_id', 'instance', 'repetition']
    wide = subset.pivot_table(index=index, columns='metric', values='score', aggfunc='first').reset_index()
    if Metric.PCORR.value not in wide.columns or Metric.SSIM.value not in wide.columns:
        raise InvalidArgumentError(f"Scatter for {printer} needs both pcorr and ssim scores")
    return wide[index + [Metric.PCORR.value, Metric.SSIM.value]]


def scatter_svg(df: pd.DataFrame, printer: str, path, reference: str = Reference.TEMPLATE.value):
    """One colour per device, one marker per origin"""
    points = scatter_export(df, printer, reference)
    fig, ax = plt.subplots(figsize=(6, 5))
    markers = {Origin.ORIGINAL.value: 'o', Origin.FAKE.value: 'x'}
    colours = plt.get_cmap('tab10')
    for index, device in enumerate(sorted(points['device'].unique())):
        for origin, marker in markers.items():
            sel = points[(points['device'] == device) & (points['origin'] == origin)]
            if sel.empty:
                continue
            ax.scatter(sel[Metric.PCORR.value], sel[Metric.SSIM.value], s=10, marker=marker,
                       color=colours(index % 10), label=f'{device} {origin}')
    ax.set_xlabel(f'pcorr(y, {reference})')
    ax.set_ylabel(f'ssim(y, {reference})')
    ax.set_title(f'{printer}: probes against {reference}')
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    _save_svg(fig, path)


@dataclass
class CriterionResult:
    name: str
    passed: bool
    detail: str


@dataclass
class AcceptanceReport:
    criteria: List[CriterionResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    def to_dict(self) -> Dict:
        return {'passed': self.passed, 'criteria': [asdict(c) for c in self.criteria]}


def acceptance_check(table: AucTable, printers: Sequence[str], ladder: Sequence[str],
                     inversion_tolerance: float = 0.01, min_gain: float = 0.05,
                     gain_below: float = 0.95) -> AcceptanceReport:
    """Enrollment baseline, synthetic improvement and resolution monotonicity"""
    pcorr = Metric.PCORR.value
    criteria = []

    # enrollment reference separates perfectly everywhere
    bad = []
    for printer in printers:
        for device in ladder:
            value = table.get(printer, device, pcorr, Reference.ENROLLED)
            if value is None or value != 1.0:
                bad.append(f"{printer}/{device}={value}")
    criteria.append(CriterionResult('enrolled_reference_auc_is_one', not bad,
                                    'all cells 1.0' if not bad else ', '.join(bad)))

    # synthetic reference at least as good as the template, clearly better where t is weak
    bad, checked = [], 0
    for printer in printers:
        for device in ladder:
            synthetic = table.get(printer, device, pcorr, Reference.SYNTHETIC)
            template = table.get(printer, device, pcorr, Reference.TEMPLATE)
            if synthetic is None or template is None:
                continue
            checked += 1
            if synthetic < template or (template < gain_below and synthetic - template < min_gain):
                bad.append(f"{printer}/{device}: xhat={synthetic:.3f} t={template:.3f}")
    if not checked:
        bad.append('no cell has both xhat and t scores')
    criteria.append(CriterionResult('synthetic_reference_improves', not bad,
                                    f'{checked} cells checked' if not bad else '; '.join(bad)))

    # AUC(pcorr, t) grows along the ladder, one small inversion allowed
    bad = []
    for printer in printers:
        values = [table.get(printer, device, pcorr, Reference.TEMPLATE) for device in ladder]
        if any(v is None for v in values):
            bad.append(f"{printer}: incomplete ladder")
            continue
        drops = [values[i] - values[i + 1] for i in range(len(values) - 1) if values[i + 1] < values[i]]
        if len(drops) > 1 or any(d > inversion_tolerance for d in drops):
            bad.append(f"{printer}: " + ', '.join(f'{v:.3f}' for v in values))
    criteria.append(CriterionResult('template_auc_monotone_in_resolution', not bad,
                                    'monotone' if not bad else '; '.join(bad)))

    for c in criteria:
        (logger.info if c.passed else logger.warning)(f"acceptance {c.name}: {'PASS' if c.passed else 'FAIL'} ({c.detail})")
    return AcceptanceReport(criteria)
