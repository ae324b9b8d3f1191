import tempfile
import unittest
from pathlib import Path

from sopseg.api import ConfigError
from sopseg.config import RunConfig, parse_override, resolve_config, write_run_config


class TestResolveConfig(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _config_file(self, text: str) -> str:
        path = self.root / 'config.yaml'
        path.write_text(text)
        return str(path)

    def test_defaults(self):
        resolved = resolve_config(environ={})
        self.assertEqual(RunConfig(), resolved.config)
        self.assertEqual({'default'}, set(resolved.provenance.values()))

    def test_precedence(self):
        path = self._config_file("device: cuda\ntrain:\n  epochs: 5\n  batch_size: 2\n")
        resolved = resolve_config(path, ['train.epochs=7'], environ={'SOPSEG_DEVICE': 'cpu',
                                                                     'SOPSEG_NUM_WORKERS': '2'})
        config = resolved.config
        self.assertEqual('cuda', config.device)
        self.assertEqual(7, config.train.epochs)
        self.assertEqual(2, config.train.batch_size)
        self.assertEqual(2, config.train.num_workers)
        self.assertEqual('file', resolved.provenance['device'])
        self.assertEqual('flag', resolved.provenance['train.epochs'])
        self.assertEqual('file', resolved.provenance['train.batch_size'])
        self.assertEqual('env', resolved.provenance['train.num_workers'])
        self.assertEqual('default', resolved.provenance['ram.m'])

    def test_env_beats_defaults(self):
        resolved = resolve_config(environ={'SOPSEG_DEVICE': 'cpu'})
        self.assertEqual('cpu', resolved.config.device)
        self.assertEqual('env', resolved.provenance['device'])

    def test_override_values_are_yaml(self):
        self.assertEqual(('train.lr_decoder', 1e-3), parse_override('train.lr_decoder=1e-3'))
        self.assertEqual(('train.loss.edge_supervision', False), parse_override('train.loss.edge_supervision=false'))
        self.assertEqual(('train.jitter', [0.4, 0.6]), parse_override('train.jitter=[0.4, 0.6]'))
        resolved = resolve_config(overrides=['train.jitter=[0.4, 0.6]', 'model.prompt.mode=box'], environ={})
        self.assertEqual((0.4, 0.6), resolved.config.train.jitter)
        self.assertEqual('box', resolved.config.model.prompt.mode)

    def test_invalid(self):
        for overrides in (['train.epochs'], ['=3'], ['train.unknown=1'], ['ram.k0=1.0'], ['ram.s_in=100'],
                          ['model.encoder.out_chans=60']):
            with self.assertRaises(ConfigError, msg=str(overrides)):
                resolve_config(overrides=overrides, environ={})
        with self.assertRaises(ConfigError):
            resolve_config(str(self.root / 'missing.yaml'), environ={})
        with self.assertRaises(ConfigError):
            resolve_config(self._config_file("- just\n- a list\n"), environ={})

    def test_run_config_round_trip(self):
        resolved = resolve_config(overrides=['seed=11', 'train.epochs=3'], environ={})
        path = write_run_config(resolved, self.root / 'run')
        self.assertEqual(self.root / 'run' / 'run_config.yaml', path)
        again = resolve_config(str(path), environ={})
        self.assertEqual(resolved.config, again.config)
        self.assertEqual('file', again.provenance['seed'])

    def test_shipped_configs(self):
        desk = resolve_config('sopseg:desk-config.yaml', environ={}).config
        self.assertEqual('tiny', desk.model.encoder.backend)
        self.assertEqual(125, desk.synth.train_images)
        large = resolve_config('sopseg:large-config.yaml', environ={}).config
        self.assertEqual('pretrained', large.model.encoder.backend)
        self.assertTrue(large.model.encoder.freeze)
        self.assertEqual(1024, large.model.encoder.embed_dim)
        self.assertEqual(5.0, large.train.loss.lambda_iou)

    def test_train_seed_falls_back(self):
        self.assertEqual(4, RunConfig(seed=4).train_seed)
        self.assertEqual(9, RunConfig(seed=4, train={'seed': 9}).train_seed)


if __name__ == '__main__':
    unittest.main()
