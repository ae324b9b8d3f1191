import json
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
from PIL import Image

from sopseg.api import DataError, DomainError
from sopseg.checkpoint import save_model
from sopseg.cli_lib import (cmd_ablate, cmd_annotate, cmd_eval, cmd_infer, cmd_synth, cmd_train, cmd_visualize,
                            needs_review, parse_obb)
from sopseg.data import load_annotations, load_manifest
from sopseg.utils import load_yaml

from tests.mocks import micro_model, micro_run_config, resolved


class PipelineTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.data = self.root / 'data'
        self.resolved = resolved(micro_run_config(data_root=str(self.data), epochs=1))

    def tearDown(self):
        self.tmp.cleanup()

    def checkpoint(self) -> Path:
        return save_model(micro_model(seed=1), self.root / 'model.ckpt')


class TestSynth(PipelineTestCase):
    def test_deterministic_and_disjoint(self):
        first = cmd_synth(self.resolved)
        second = cmd_synth(self.resolved, self.root / 'again')
        self.assertEqual(first.checksums, second.checksums)
        self.assertEqual({'train': 3, 'val': 2}, first.images)
        self.assertTrue((self.data / 'run_config.yaml').exists())

        train_ids = {r.image_id for r in load_annotations(first.annotations['train'])}
        val_ids = {r.image_id for r in load_annotations(first.annotations['val'])}
        self.assertTrue(train_ids)
        self.assertFalse(train_ids & val_ids)
        self.assertNotEqual(first.checksums['train'], first.checksums['val'])


class TestTrainAndEvaluate(PipelineTestCase):
    def test_train_then_eval(self):
        cmd_synth(self.resolved)
        run_dir = self.root / 'run'
        fit_result = cmd_train(self.resolved, run_dir)
        self.assertTrue((run_dir / 'run_config.yaml').exists())
        self.assertTrue(Path(fit_result.best_checkpoint).exists())
        self.assertEqual(1, len(fit_result.history))

        result = cmd_eval(self.resolved, fit_result.best_checkpoint, self.root / 'eval')
        stored = json.loads(Path(result.report_json).read_text())
        self.assertAlmostEqual(result.report.miou, stored['miou'], delta=1e-12)
        self.assertIn(f"{result.report.miou:.4f}", Path(result.report_table).read_text())
        self.assertEqual(len(load_annotations(self.resolved.config.data.val_annotations)), stored['n_instances'])

    def test_ablation_layout(self):
        cmd_synth(self.resolved)
        result = cmd_ablate(self.resolved, self.root / 'ablation', seeds=[3])
        self.assertEqual([(True, 3), (False, 3)], [(r.edge_supervision, r.seed) for r in result.runs])
        stored = json.loads(Path(result.path).read_text())
        self.assertEqual({'edge_on', 'edge_off'}, set(stored['mean']))
        for run in result.runs:
            self.assertTrue((Path(run.run_dir) / 'run_config.yaml').exists())
            self.assertTrue((Path(run.run_dir) / 'best.ckpt').exists())
        off = load_yaml(str(Path(result.runs[1].run_dir) / 'run_config.yaml'))
        self.assertFalse(off['config']['train']['loss']['edge_supervision'])
        self.assertEqual('flag', off['provenance']['train.loss.edge_supervision'])
        with self.assertRaises(DomainError):
            cmd_ablate(self.resolved, self.root / 'ablation', seeds=[])

    def test_eval_needs_masks(self):
        cmd_synth(self.resolved)
        boxes = self.data / 'boxes.json'
        raw = json.loads(Path(self.resolved.config.data.val_annotations).read_text())
        for instance in raw['instances']:
            instance.pop('mask')
        boxes.write_text(json.dumps(raw))
        with self.assertRaises(DataError):
            cmd_eval(self.resolved, self.checkpoint(), self.root / 'eval', annotations=str(boxes))


class TestInfer(PipelineTestCase):
    def test_single_instance(self):
        cmd_synth(self.resolved)
        record = load_annotations(self.resolved.config.data.val_annotations)[0]
        result = cmd_infer(self.resolved, self.checkpoint(), record.image_ref,
                           record.obox.corners().reshape(-1).tolist(), self.root / 'infer')
        with Image.open(result.mask_path) as img:
            mask = np.asarray(img)
        w, h = record.image_size
        self.assertEqual((h, w), mask.shape)
        self.assertEqual(result.mask_pixels, int((mask > 127).sum()))
        self.assertTrue(0.0 <= result.score <= 1.0)

        again = cmd_infer(self.resolved, self.checkpoint(), record.image_ref,
                          record.obox.corners().reshape(-1).tolist(), self.root / 'infer-again')
        with Image.open(again.mask_path) as img:
            np.testing.assert_array_equal(mask, np.asarray(img))
        self.assertEqual(result.score, again.score)

    def test_parse_obb(self):
        box = parse_obb([50, 50, 10, 20, 0])
        self.assertEqual((20, 10), (box.len_long, box.len_short))
        self.assertEqual(40, parse_obb([0, 0, 40, 0, 40, 10, 0, 10]).len_long)
        with self.assertRaises(DomainError):
            parse_obb([1, 2, 3])

    def test_degenerate_box(self):
        cmd_synth(self.resolved)
        image = str(self.data / 'images' / 'val_00000.png')
        with self.assertRaises(DataError):
            cmd_infer(self.resolved, self.checkpoint(), image, [5, 5, 0.5, 0.3, 0], self.root / 'infer')


class TestAnnotate(PipelineTestCase):
    def setUp(self):
        super().setUp()
        cmd_synth(self.resolved)
        raw = json.loads(Path(self.resolved.config.data.val_annotations).read_text())
        for instance in raw['instances']:
            instance.pop('mask')
        raw['instances'].append({'id': 'broken', 'image_id': raw['images'][0]['id'], 'class': 'x', 'obb': [1, 2]})
        self.n_valid = len(raw['instances']) - 1
        self.boxes = self.data / 'boxes.json'
        self.boxes.write_text(json.dumps(raw, indent=1))

    def test_tau_zero_flags_nothing(self):
        original = self.boxes.read_bytes()
        result = cmd_annotate(self.resolved, self.checkpoint(), self.boxes, self.root / 'ann', tau=0.0)
        self.assertEqual(original, self.boxes.read_bytes())
        self.assertEqual(self.n_valid + 1, result.n_input)
        self.assertEqual(self.n_valid, result.n_instances)
        self.assertEqual(0, result.n_flagged)
        self.assertEqual(['broken'], [s.id for s in result.review.skipped])
        self.assertIsNotNone(result.review.skipped[0].line)

        exported = load_manifest(result.manifest)
        self.assertEqual(self.n_valid, len(exported))
        for entry, mask in exported:
            self.assertEqual(tuple(entry.size), mask.shape)

    def test_missing_image_is_skipped(self):
        raw = json.loads(self.boxes.read_text())
        raw['images'].append({'id': 'ghost', 'path': 'images/ghost.png', 'w': 96, 'h': 96})
        raw['instances'].append({'id': 'ghost_0', 'image_id': 'ghost', 'class': 'rectangle',
                                 'obb': [30, 30, 50, 30, 50, 40, 30, 40]})
        self.boxes.write_text(json.dumps(raw, indent=1))

        result = cmd_annotate(self.resolved, self.checkpoint(), self.boxes, self.root / 'ann', tau=0.0)
        self.assertEqual(self.n_valid + 2, result.n_input)
        self.assertEqual(self.n_valid, result.n_instances)
        reasons = {s.id: s.reason for s in result.review.skipped}
        self.assertEqual({'broken', 'ghost_0'}, set(reasons))
        self.assertIn("missing image", reasons['ghost_0'])
        self.assertEqual(self.n_valid, len(load_manifest(result.manifest)))
        self.assertTrue(Path(result.review_list).exists())

    def test_tau_one_flags_everything(self):
        result = cmd_annotate(self.resolved, self.checkpoint(), self.boxes, self.root / 'ann', tau=1.0)
        self.assertEqual(self.n_valid, result.n_flagged)
        review = json.loads(Path(result.review_list).read_text())
        self.assertEqual(1.0, review['tau'])
        for flagged in result.review.flagged:
            self.assertTrue(Path(flagged.overlay).exists())

    def test_rle_export(self):
        config = self.resolved.config.model_copy(deep=True)
        config.annotate.mask_format = 'rle'
        result = cmd_annotate(resolved(config), self.checkpoint(), self.boxes, self.root / 'ann', tau=0.5)
        manifest = json.loads(Path(result.manifest).read_text())
        self.assertEqual('rle', manifest['format'])
        self.assertTrue(all(entry['rle'] is not None for entry in manifest['instances']))

    def test_tau_out_of_range(self):
        with self.assertRaises(DomainError):
            cmd_annotate(self.resolved, self.checkpoint(), self.boxes, self.root / 'ann', tau=1.5)

    def test_visualize_manifest(self):
        result = cmd_annotate(self.resolved, self.checkpoint(), self.boxes, self.root / 'ann', tau=0.0)
        out_dir = self.root / 'overlays'
        overlays = cmd_visualize(self.resolved, result.manifest, out_dir).overlays
        self.assertTrue((out_dir / 'run_config.yaml').exists())
        image_ids = {entry.image_id for entry, _ in load_manifest(result.manifest)}
        self.assertEqual(len(image_ids), len(overlays))
        for path in overlays:
            with Image.open(path) as img:
                self.assertEqual('RGB', img.mode)


class TestNeedsReview(unittest.TestCase):
    def test_threshold(self):
        self.assertFalse(needs_review(0.0, 0.0))
        self.assertTrue(needs_review(0.49, 0.5))
        self.assertFalse(needs_review(0.5, 0.5))
        self.assertTrue(needs_review(1.0, 1.0))


class TestCommandLine(PipelineTestCase):
    def setUp(self):
        super().setUp()
        self.original_cwd = os.getcwd()
        os.chdir(self.root)

    def tearDown(self):
        os.chdir(self.original_cwd)
        super().tearDown()

    def _main(self, *argv: str) -> int:
        from sopseg_tools.cli_main import main
        with patch.object(sys, 'argv', ['sopseg-cli', *argv]):
            try:
                main()
            except SystemExit as e:
                return e.code
        return 0

    def test_synth(self):
        code = self._main('synth', '--set', 'synth.train_images=1', '--set', 'synth.val_images=1',
                          '--set', 'synth.image_side=64',
                          '--set', 'synth.size_range=[8, 16]', '--out', str(self.root / 'cli-data'))
        self.assertEqual(0, code)
        self.assertTrue((self.root / 'cli-data' / 'train.json').exists())

    def test_config_error_exit_code(self):
        self.assertEqual(2, self._main('train', '--run-dir', 'run', '--set', 'train.unknown=1'))

    def test_data_error_exit_code(self):
        code = self._main('eval', '--device', 'cpu', '--checkpoint', str(self.checkpoint()),
                          '--annotations', 'missing.json', '--run-dir', 'eval')
        self.assertEqual(3, code)


if __name__ == '__main__':
    unittest.main()
