"""Desk-scale training runs. They take minutes on a GPU and much longer on a CPU, so they only run
with SOPSEG_SLOW_TESTS=1."""
import os
import tempfile
import unittest
from pathlib import Path

from sopseg.cli_lib import cmd_ablate, cmd_synth, cmd_train
from sopseg.config import resolve_config

SLOW = os.environ.get('SOPSEG_SLOW_TESTS') == '1'


@unittest.skipUnless(SLOW, "set SOPSEG_SLOW_TESTS=1 to run desk-scale training")
class TestDeskScale(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        data = self.root / 'data'
        self.overrides = [f"data.root={data}", f"data.train_annotations={data}/train.json",
                          f"data.val_annotations={data}/val.json"]

    def tearDown(self):
        self.tmp.cleanup()

    def test_reaches_target_miou(self):
        resolved = resolve_config('sopseg:desk-config.yaml', self.overrides)
        synth = cmd_synth(resolved)
        self.assertGreaterEqual(synth.instances['train'], 400)
        result = cmd_train(resolved, self.root / 'run')
        self.assertGreaterEqual(result.best_miou, 0.85)

    def test_edge_supervision_helps_boundaries(self):
        resolved = resolve_config('sopseg:desk-config.yaml', self.overrides + ['train.epochs=15'])
        cmd_synth(resolved)
        result = cmd_ablate(resolved, self.root / 'ablation', seeds=[0, 1, 2])
        self.assertEqual(6, len(result.runs))
        self.assertGreaterEqual(result.mean['edge_on']['mbiou'], result.mean['edge_off']['mbiou'])


if __name__ == '__main__':
    unittest.main()
