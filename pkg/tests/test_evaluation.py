import json
import unittest

import numpy as np
from scipy import ndimage

from sopseg.api import DataError, ShapeError
from sopseg.config import EvalConfig
from sopseg.evaluation import (EvalReport, InstanceMetrics, band_width, boundary_iou, build_report, evaluate,
                               format_report_table, mask_iou, mask_to_band, size_bucket)

from tests.mocks import EmptyPredictor, FixedScorePredictor, OraclePredictor, square_mask, tiny_dataset


def _instance(label: str, iou: float, biou: float, size: float = 10.0, index: int = 0) -> InstanceMetrics:
    return InstanceMetrics(instance_id=f"{label}-{index}", class_label=label, object_size=size, iou=iou, biou=biou,
                           score=0.5)


class TestMaskIou(unittest.TestCase):
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            shape = tuple(rng.integers(1, 12, size=2))
            a = rng.random(shape) < rng.random()
            b = rng.random(shape) < rng.random()
            intersection = sum(1 for i in range(shape[0]) for j in range(shape[1]) if a[i, j] and b[i, j])
            union = sum(1 for i in range(shape[0]) for j in range(shape[1]) if a[i, j] or b[i, j])
            expected = 1.0 if union == 0 else intersection / union
            self.assertAlmostEqual(expected, mask_iou(a, b), delta=1e-12)

    def test_empty_pair(self):
        empty = np.zeros((4, 4), dtype=bool)
        self.assertEqual(1.0, mask_iou(empty, empty))
        self.assertEqual(1.0, boundary_iou(empty, empty))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            mask_iou(np.zeros((4, 4)), np.zeros((4, 5)))
        with self.assertRaises(ShapeError):
            boundary_iou(np.zeros((4, 4)), np.zeros((5, 4)))


class TestBoundaryIou(unittest.TestCase):
    def test_band_width(self):
        self.assertEqual(1, band_width((64, 64), 0.005))
        self.assertEqual(7, band_width((1024, 1024), 0.005))
        self.assertEqual(2, band_width((256, 256), 0.005))

    def test_band_matches_distance_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            side = int(rng.integers(8, 40))
            mask = ndimage.binary_closing(rng.random((side, side)) < 0.6)
            d = int(rng.integers(1, 4))
            distance = ndimage.distance_transform_cdt(np.pad(mask, 1), metric='chessboard')[1:-1, 1:-1]
            expected = mask & (distance <= d)
            np.testing.assert_array_equal(expected, mask_to_band(mask, d))

    def test_identical_and_disjoint(self):
        a = square_mask(64, 10, 10, 20)
        self.assertEqual(1.0, boundary_iou(a, a))
        self.assertEqual(0.0, boundary_iou(a, square_mask(64, 40, 40, 10)))

    def test_boundary_shift_weighs_more_than_area(self):
        a = square_mask(64, 10, 10, 40)
        b = square_mask(64, 11, 10, 40)
        self.assertAlmostEqual(39 / 41, mask_iou(a, b), delta=1e-12)
        self.assertAlmostEqual(78 / 234, boundary_iou(a, b), delta=1e-12)

    def test_holes_have_a_band(self):
        b = square_mask(64, 10, 10, 30)
        b[22:28, 22:28] = False
        band = mask_to_band(b, 1)
        self.assertTrue(band[21, 25])
        self.assertFalse(band[16, 16])

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = rng.random((32, 32)) < 0.4
            b = rng.random((32, 32)) < 0.4
            self.assertEqual(mask_iou(a, b), mask_iou(b, a))
            self.assertEqual(boundary_iou(a, b), boundary_iou(b, a))

    def test_small_objects_equal_mask_iou(self):
        # both masks lie entirely inside their one-pixel bands
        a = square_mask(64, 20, 20, 2)
        b = np.zeros_like(a)
        b[20:22, 21:24] = True
        self.assertAlmostEqual(mask_iou(a, b), boundary_iou(a, b), delta=1e-12)
        self.assertAlmostEqual(2 / 8, boundary_iou(a, b), delta=1e-12)


class TestReport(unittest.TestCase):
    def test_macro_average_over_classes(self):
        instances = [_instance('ring', 1.0, 1.0, index=i) for i in range(3)] + [_instance('cross', 0.0, 0.5)]
        report = build_report(instances, EvalConfig())
        self.assertEqual(0.5, report.miou)
        self.assertEqual(0.75, report.mbiou)
        self.assertEqual(3, report.per_class['ring'].count)
        self.assertEqual(4, report.n_instances)

    def test_size_buckets(self):
        self.assertEqual('small', size_bucket(31.9, (32, 96)))
        self.assertEqual('medium', size_bucket(32, (32, 96)))
        self.assertEqual('large', size_bucket(96, (32, 96)))
        report = build_report([_instance('a', 1, 1, size=10), _instance('a', 0, 0, size=100, index=1)],
                              EvalConfig())
        self.assertEqual({'large', 'small'}, set(report.per_size))

    def test_empty(self):
        with self.assertRaises(DataError):
            build_report([], EvalConfig())

    def test_table_agrees_with_json(self):
        report = build_report([_instance('ring', 0.8, 0.6), _instance('cross', 0.4, 0.2)], EvalConfig())
        table = format_report_table(report)
        lines = table.splitlines()
        self.assertEqual(['class', 'IoU', 'BIoU', 'count'], lines[0].split())
        self.assertTrue(set(lines[1].replace(' ', '')) == {'-'})
        rows = {line.split()[0]: line.split()[1:] for line in lines[2:]}
        restored = EvalReport.model_validate(json.loads(report.model_dump_json()))
        for name, metrics in restored.per_class.items():
            self.assertEqual([f"{metrics.iou:.4f}", f"{metrics.biou:.4f}", str(metrics.count)], rows[name])
        self.assertEqual([f"{restored.miou:.4f}", f"{restored.mbiou:.4f}", '2'], rows['mean'])


class TestEvaluate(unittest.TestCase):
    def test_oracle_is_perfect(self):
        report = evaluate(OraclePredictor(), tiny_dataset(), EvalConfig(batch_size=3))
        self.assertEqual(1.0, report.miou)
        self.assertEqual(1.0, report.mbiou)
        self.assertEqual(len(tiny_dataset()), report.n_instances)

    def test_empty_predictor_scores_zero(self):
        report = evaluate(EmptyPredictor(), tiny_dataset(), EvalConfig(batch_size=3))
        self.assertEqual(0.0, report.miou)
        self.assertEqual(0.0, report.mbiou)

    def test_scores_are_recorded(self):
        report = evaluate(FixedScorePredictor([0.25, 0.75]), tiny_dataset(), EvalConfig(batch_size=2))
        self.assertEqual(0.25, report.instances[0].score)
        self.assertEqual(0.75, report.instances[1].score)

    def test_empty_dataset(self):
        with self.assertRaises(DataError):
            evaluate(OraclePredictor(), tiny_dataset(n_images=0))


if __name__ == '__main__':
    unittest.main()
