import json
import math
import tempfile
import unittest
from pathlib import Path

import torch

from sopseg.api import DataError, NumericalError, TrainingObserver
from sopseg.checkpoint import load_model
from sopseg.config import EvalConfig, LossConfig, TrainConfig
from sopseg.data import collate_patches
from sopseg.training import (BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE, EpochRecord, build_optimizer,
                             build_scheduler, fit, steps_per_epoch, train_step)
from sopseg.utils import state_checksum

from tests.mocks import micro_model, tiny_dataset


def _train_config(**overrides) -> TrainConfig:
    values = dict(epochs=2, batch_size=4, lr_encoder=1e-3, lr_decoder=1e-3, lr_refine=1e-3, hflip=False)
    values.update(overrides)
    return TrainConfig(**values)


class RecordingObserver(TrainingObserver):
    def __init__(self):
        self.started = None
        self.steps = []
        self.epochs = []
        self.result = None

    def on_train_start(self, total_steps: int, start_step: int) -> None:
        self.started = (total_steps, start_step)

    def on_step(self, step: int, loss: float) -> None:
        self.steps.append(step)

    def on_epoch_end(self, record: EpochRecord) -> None:
        self.epochs.append(record.epoch)

    def on_train_end(self, result) -> None:
        self.result = result


class TestOptimizer(unittest.TestCase):
    def test_groups_and_learning_rates(self):
        cfg = _train_config(lr_encoder=1e-4, lr_decoder=2e-4, lr_refine=3e-4)
        optimizer = build_optimizer(micro_model(), cfg)
        lrs = {group['name']: group['lr'] for group in optimizer.param_groups}
        self.assertEqual({'encoder': 1e-4, 'prompt': 1e-4, 'decoder': 2e-4, 'refine': 3e-4}, lrs)
        self.assertTrue(all(group['weight_decay'] == 0.01 for group in optimizer.param_groups))

    def test_frozen_encoder_is_left_out(self):
        optimizer = build_optimizer(micro_model(freeze=True), _train_config())
        self.assertEqual({'decoder', 'refine'}, {group['name'] for group in optimizer.param_groups})

    def test_scheduler_endpoints(self):
        cfg = _train_config(lr_decoder=1e-3, eta_min=1e-5)
        optimizer = build_optimizer(micro_model(), cfg)
        scheduler = build_scheduler(optimizer, 10, cfg)
        decoder = next(g for g in optimizer.param_groups if g['name'] == 'decoder')
        self.assertAlmostEqual(1e-3, decoder['lr'], delta=1e-12)
        for _ in range(5):
            optimizer.step()
            scheduler.step()
        self.assertAlmostEqual(1e-5 + (1e-3 - 1e-5) / 2, decoder['lr'], delta=1e-9)
        for _ in range(5):
            optimizer.step()
            scheduler.step()
        self.assertAlmostEqual(1e-5, decoder['lr'], delta=1e-9)

    def test_steps_per_epoch(self):
        self.assertEqual(3, steps_per_epoch(9, 4))
        self.assertEqual(2, steps_per_epoch(8, 4))


class TestTrainStep(unittest.TestCase):
    def test_same_seed_same_loss(self):
        batch = collate_patches([tiny_dataset()[i] for i in range(3)])
        losses = []
        for _ in range(2):
            model = micro_model(seed=7)
            optimizer = build_optimizer(model, _train_config())
            losses.append(float(train_step(model, optimizer, batch, LossConfig()).total))
        self.assertEqual(losses[0], losses[1])
        self.assertTrue(math.isfinite(losses[0]))

    def test_non_finite_loss_stops_before_update(self):
        model = micro_model()
        with torch.no_grad():
            model.refiner.heads[-1].bias.fill_(float('nan'))
        optimizer = build_optimizer(model, _train_config())
        before = state_checksum(model)
        batch = collate_patches([tiny_dataset()[0]])
        with self.assertRaises(NumericalError) as context:
            train_step(model, optimizer, batch, LossConfig())
        self.assertEqual(4, context.exception.exit_code)
        self.assertIn('losses', context.exception.diagnostics)
        self.assertEqual(before, state_checksum(model))

    def test_needs_masks(self):
        sample = tiny_dataset()[0]
        sample.gt_mask_patch = None
        model = micro_model()
        with self.assertRaises(DataError):
            train_step(model, build_optimizer(model, _train_config()), collate_patches([sample]), LossConfig())


class TestFit(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.run_dir = Path(self.tmp.name) / 'run'

    def tearDown(self):
        self.tmp.cleanup()

    def test_logs_and_checkpoints(self):
        train_set = tiny_dataset(mode='train', seed=1)
        val_set = tiny_dataset(seed=2, n_images=1)
        observer = RecordingObserver()
        result = fit(micro_model(), train_set, _train_config(), self.run_dir, val_set=val_set,
                     eval_cfg=EvalConfig(batch_size=4), observer=observer)

        per_epoch = steps_per_epoch(len(train_set), 4)
        self.assertEqual(2 * per_epoch, result.global_step)
        self.assertEqual((2 * per_epoch, 0), observer.started)
        self.assertEqual(list(range(1, 2 * per_epoch + 1)), observer.steps)
        self.assertEqual([0, 1], observer.epochs)
        self.assertIs(result, observer.result)

        lines = (self.run_dir / METRICS_FILE).read_text().splitlines()
        self.assertEqual(2, len(lines))
        records = [EpochRecord.model_validate(json.loads(line)) for line in lines]
        self.assertEqual([per_epoch, 2 * per_epoch], [r.step for r in records])
        for record in records:
            self.assertTrue(0.0 <= record.val_miou <= 1.0)
            self.assertIn('edge_4', record.losses)
        self.assertTrue((self.run_dir / BEST_CHECKPOINT).exists())
        self.assertTrue((self.run_dir / LAST_CHECKPOINT).exists())
        best = max(records, key=lambda r: r.val_miou)
        self.assertEqual(best.epoch, result.best_epoch)
        self.assertEqual(load_model(self.run_dir / BEST_CHECKPOINT).s_in, 64)

    def test_frozen_encoder_is_unchanged(self):
        model = micro_model(freeze=True)
        encoder_before = state_checksum(model.image_encoder)
        prompt_before = state_checksum(model.prompt_encoder)
        decoder_before = state_checksum(model.mask_decoder)
        fit(model, tiny_dataset(mode='train'), _train_config(epochs=1), self.run_dir)
        self.assertEqual(encoder_before, state_checksum(model.image_encoder))
        self.assertEqual(prompt_before, state_checksum(model.prompt_encoder))
        self.assertNotEqual(decoder_before, state_checksum(model.mask_decoder))

    def test_same_seed_same_history(self):
        losses = []
        for attempt in range(2):
            result = fit(micro_model(seed=3), tiny_dataset(mode='train'), _train_config(epochs=1),
                         self.run_dir / str(attempt), seed=5)
            losses.append(result.history[0].train_loss)
        self.assertAlmostEqual(losses[0], losses[1], delta=1e-6)

    def test_resume_continues_counting(self):
        train_set = tiny_dataset(mode='train')
        per_epoch = steps_per_epoch(len(train_set), 4)
        fit(micro_model(), train_set, _train_config(epochs=2), self.run_dir)

        finished = fit(micro_model(seed=9), train_set, _train_config(epochs=2), self.run_dir, resume=True)
        self.assertEqual(2 * per_epoch, finished.global_step)
        self.assertEqual(2, len(finished.history))

        extended = fit(micro_model(seed=9), train_set, _train_config(epochs=3), self.run_dir, resume=True)
        self.assertEqual(3 * per_epoch, extended.global_step)
        self.assertEqual([0, 1, 2], [r.epoch for r in extended.history])
        self.assertEqual(3, len((self.run_dir / METRICS_FILE).read_text().splitlines()))

    def test_fresh_run_truncates_metrics(self):
        train_set = tiny_dataset(mode='train')
        fit(micro_model(), train_set, _train_config(epochs=1), self.run_dir)
        fit(micro_model(), train_set, _train_config(epochs=1), self.run_dir)
        self.assertEqual(1, len((self.run_dir / METRICS_FILE).read_text().splitlines()))

    def test_non_finite_loss_reports_position(self):
        model = micro_model()
        with torch.no_grad():
            model.refiner.heads[-1].bias.fill_(float('nan'))
        with self.assertRaises(NumericalError) as context:
            fit(model, tiny_dataset(mode='train'), _train_config(), self.run_dir)
        diagnostics = context.exception.diagnostics
        self.assertEqual(0, diagnostics['epoch'])
        self.assertEqual(0, diagnostics['step'])
        self.assertTrue(diagnostics['instances'])

    def test_empty_train_set(self):
        with self.assertRaises(DataError):
            fit(micro_model(), tiny_dataset(n_images=0), _train_config(), self.run_dir)

    def test_loss_decreases_when_overfitting(self):
        result = fit(micro_model(), tiny_dataset(mode='eval', n_images=1), _train_config(epochs=12, batch_size=8),
                     self.run_dir)
        first, last = result.history[0].train_loss, result.history[-1].train_loss
        self.assertLess(last, first)


if __name__ == '__main__':
    unittest.main()
