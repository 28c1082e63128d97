import json
import shutil
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from cdplab.errors import InvalidArgumentError
from cdplab.rocstat import (
    SCORE_COLUMNS, AucTable, Reference, ScoreRecord, ScoreSet, acceptance_check, auc, auc_table, histogram_export,
    mann_whitney_auc, read_scores_csv, records_frame, roc_curve, roc_svg, scatter_export, score_sets,
    write_scores_csv,
)


def pairwise_auc(positives, negatives):
    pos = np.asarray(positives)[:, None]
    neg = np.asarray(negatives)[None, :]
    return float((pos > neg).mean() + 0.5 * (pos == neg).mean())


def records(printer='HPI55', device='epson', reference='t', metric='pcorr', originals=(), fakes=()):
    out = []
    for origin, scores in (('original', originals), ('fake', fakes)):
        for index, score in enumerate(scores):
            extra = {'enrollment_template_id': index, 'enrollment_instance': 0} if reference == 'xe' else {}
            out.append(ScoreRecord(printer_id=printer, device_id=device, reference=reference, metric=metric,
                                   origin=origin, template_id=index, instance=0, repetition=1, score=score,
                                   **extra))
    return out


class AucTests(SimpleTestCase):

    def test_matches_pairwise_counting_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            positives = np.round(rng.normal(0.5, 1.0, size=rng.integers(1, 30)), 1)
            negatives = np.round(rng.normal(0.0, 1.0, size=rng.integers(1, 30)), 1)
            s = ScoreSet(positives, negatives)
            self.assertAlmostEqual(auc(s), pairwise_auc(positives, negatives), delta=1e-9)

    def test_matches_mann_whitney(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            s = ScoreSet(rng.integers(0, 10, size=25), rng.integers(0, 8, size=17))
            self.assertAlmostEqual(auc(s), mann_whitney_auc(s), delta=1e-9)

    def test_extremes(self):
        self.assertEqual(auc(ScoreSet([0.9, 0.8], [0.1, 0.2, 0.3])), 1.0)
        self.assertEqual(auc(ScoreSet([0.1, 0.2], [0.8, 0.9])), 0.0)
        self.assertEqual(auc(ScoreSet([0.5, 0.5], [0.5])), 0.5)

    def test_curve_runs_from_origin_to_corner(self):
        curve = roc_curve(ScoreSet([0.9, 0.4, 0.6], [0.3, 0.5]))
        self.assertEqual(curve[0], (0.0, 0.0))
        self.assertEqual(curve[-1], (1.0, 1.0))
        fprs, tprs = zip(*curve)
        self.assertEqual(list(fprs), sorted(fprs))
        self.assertEqual(list(tprs), sorted(tprs))
        self.assertEqual(len(curve), 6)

    def test_needs_both_classes(self):
        with self.assertRaises(InvalidArgumentError):
            auc(ScoreSet([0.1, 0.2], []))

    def test_increasing_transforms_keep_curve_and_area(self):
        rng = np.random.default_rng(2)
        transforms = [np.exp, lambda x: x ** 3, lambda x: 5.0 + np.arctan(3.0 * x)]
        for _ in range(50):
            positives = np.round(rng.normal(0.4, 1.0, size=rng.integers(1, 40)), 1)
            negatives = np.round(rng.normal(0.0, 1.0, size=rng.integers(1, 40)), 1)
            s = ScoreSet(positives, negatives)
            for transform in transforms:
                moved = ScoreSet(transform(positives), transform(negatives))
                self.assertEqual(roc_curve(moved), roc_curve(s))
                self.assertEqual(auc(moved), auc(s))


class ScoresFileTests(SimpleTestCase):

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_written_file_is_independent_of_record_order(self):
        rows = records(originals=[0.9, 0.8, 0.7], fakes=[0.2, 0.1]) + \
            records(device='xs_wide', metric='ssim', originals=[0.6], fakes=[0.4])
        write_scores_csv(rows, self.tmp / 'a.csv')
        write_scores_csv(list(reversed(rows)), self.tmp / 'b.csv')
        self.assertEqual((self.tmp / 'a.csv').read_bytes(), (self.tmp / 'b.csv').read_bytes())

        df = read_scores_csv(self.tmp / 'a.csv')
        self.assertEqual(list(df.columns), SCORE_COLUMNS)
        self.assertEqual(len(df), 7)

    def test_score_sets_group_by_cell(self):
        df = records_frame(records(originals=[0.9, 0.8], fakes=[0.1]) +
                           records(reference='xe', originals=[0.95], fakes=[0.3, 0.2]))
        sets = score_sets(df)
        self.assertEqual(set(sets), {('HPI55', 'epson', 'pcorr', 't'), ('HPI55', 'epson', 'pcorr', 'xe')})
        xe = sets[('HPI55', 'epson', 'pcorr', 'xe')]
        np.testing.assert_array_equal(xe.positives, [0.95])
        np.testing.assert_array_equal(np.sort(xe.negatives), [0.2, 0.3])

    def test_missing_file(self):
        with self.assertRaises(OSError):
            read_scores_csv(self.tmp / 'nope.csv')

    def test_enrolled_scores_record_the_enrollment(self):
        with self.assertRaises(InvalidArgumentError):
            ScoreRecord(printer_id='p', device_id='d', reference='xe', metric='pcorr', origin='original',
                        template_id=1, instance=0, repetition=1, score=0.5)
        with self.assertRaises(InvalidArgumentError):
            ScoreRecord(printer_id='p', device_id='d', reference='t', metric='pcorr', origin='original',
                        template_id=1, instance=0, repetition=1, score=float('nan'))

    def test_enrolled_scores_need_the_enrollment_template(self):
        with self.assertRaises(InvalidArgumentError):
            ScoreRecord(printer_id='p', device_id='d', reference='xe', metric='pcorr', origin='fake',
                        template_id=1, instance=0, repetition=1, score=0.5, enrollment_instance=0)
        with self.assertRaises(InvalidArgumentError):
            ScoreRecord(printer_id='p', device_id='d', reference='xe', metric='pcorr', origin='fake',
                        template_id=1, instance=0, repetition=1, score=0.5, enrollment_template_id=2,
                        enrollment_instance=0)
        record = ScoreRecord(printer_id='p', device_id='d', reference='xe', metric='pcorr', origin='fake',
                             template_id=1, instance=0, repetition=1, score=0.5, enrollment_template_id=1,
                             enrollment_instance=0)
        self.assertEqual(record.cell, ('p', 'd', 'pcorr', 'xe'))


class ExportTests(SimpleTestCase):

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_auc_table_reports_missing_cells(self):
        df = records_frame(records(originals=[0.9, 0.8], fakes=[0.1, 0.85]) +
                           records(device='xs_wide', originals=[0.7]))
        table = auc_table(df, printers=['HPI55'], devices=['epson', 'xs_wide'], metrics=['pcorr'],
                          references=['t'])
        self.assertAlmostEqual(table.get('HPI55', 'epson', 'pcorr', 't'), 0.75)
        self.assertEqual(table.missing, [('HPI55', 'xs_wide', 'pcorr', 't')])

        table.write_json(self.tmp / 'auc_table.json')
        nested = json.loads((self.tmp / 'auc_table.json').read_text())
        self.assertEqual(nested, {'HPI55': {'epson': {'pcorr': {'t': 0.75}}}})
        self.assertEqual(list(table.frame().columns), ['printer', 'device', 'metric', 'reference', 'auc'])

    def test_histogram_uses_shared_edges(self):
        s = ScoreSet([0.9, 0.8, 0.85, 0.7], [0.1, 0.3])
        histogram = histogram_export(s, 4)
        self.assertEqual(len(histogram['edges']), 5)
        self.assertAlmostEqual(histogram['edges'][0], 0.1)
        self.assertAlmostEqual(histogram['edges'][-1], 0.9)
        self.assertEqual(sum(histogram['original']), 4)
        self.assertEqual(sum(histogram['fake']), 2)
        with self.assertRaises(InvalidArgumentError):
            histogram_export(s, 1)

    def test_histogram_of_identical_scores(self):
        histogram = histogram_export(ScoreSet([0.5], [0.5]), 2)
        self.assertEqual(histogram['edges'], [0.0, 0.5, 1.0])

    def test_roc_svg(self):
        roc_svg(ScoreSet([0.9, 0.4], [0.3, 0.5], 'HPI55', 'epson', 'pcorr', 't'), self.tmp / 'roc' / 'cell.svg')
        self.assertIn('<svg', (self.tmp / 'roc' / 'cell.svg').read_text())

    def test_scatter_needs_both_metrics(self):
        both = records_frame(records(originals=[0.9], fakes=[0.2]) +
                             records(metric='ssim', originals=[0.7], fakes=[0.1]))
        points = scatter_export(both, 'HPI55')
        self.assertEqual(len(points), 2)
        self.assertEqual(list(points.columns[-2:]), ['pcorr', 'ssim'])
        with self.assertRaises(InvalidArgumentError):
            scatter_export(records_frame(records(originals=[0.9], fakes=[0.2])), 'HPI55')


class AcceptanceTests(SimpleTestCase):
    ladder = ['xs_wide', '14_macro', 'epson']

    def table(self, template_aucs, synthetic_aucs, enrolled=1.0):
        table = AucTable()
        for device, t_value, xhat_value in zip(self.ladder, template_aucs, synthetic_aucs):
            table.cells[('HPI55', device, 'pcorr', Reference.TEMPLATE.value)] = t_value
            table.cells[('HPI55', device, 'pcorr', Reference.SYNTHETIC.value)] = xhat_value
            table.cells[('HPI55', device, 'pcorr', Reference.ENROLLED.value)] = enrolled
        return table

    def test_passing_table(self):
        report = acceptance_check(self.table([0.6, 0.8, 0.97], [0.75, 0.9, 0.98]), ['HPI55'], self.ladder)
        self.assertTrue(report.passed)
        self.assertEqual([c.name for c in report.criteria], [
            'enrolled_reference_auc_is_one', 'synthetic_reference_improves', 'template_auc_monotone_in_resolution',
        ])
        self.assertTrue(report.to_dict()['passed'])

    def test_small_inversion_is_tolerated(self):
        report = acceptance_check(self.table([0.8, 0.795, 0.97], [0.9, 0.9, 0.98]), ['HPI55'], self.ladder)
        self.assertTrue(report.passed)

    def test_failures_are_reported_per_criterion(self):
        report = acceptance_check(self.table([0.8, 0.6, 0.97], [0.82, 0.7, 0.96], enrolled=0.99),
                                  ['HPI55'], self.ladder)
        self.assertFalse(report.passed)
        self.assertEqual([c.passed for c in report.criteria], [False, False, False])
