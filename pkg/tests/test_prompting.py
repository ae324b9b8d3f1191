import unittest

import numpy as np
import torch

from sopseg.api import DomainError, ShapeError
from sopseg.geometry import HBox, PromptPoints
from sopseg.prompting import BOX_ROLES, ORIENTED_ROLES, PromptEncoder, PromptRole


class TestPromptEncoder(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.encoder = PromptEncoder(embed_dim=16, s_in=64)
        self.box = HBox(10, 20, 30, 12)
        self.points = PromptPoints((15.0, 26.0), (25.0, 26.0), (35.0, 26.0))

    def test_oriented_token_order(self):
        prompt = self.encoder.assemble_prompt(self.box, self.points)
        self.assertEqual((1, 5, 16), tuple(prompt.tokens.shape))
        self.assertEqual(ORIENTED_ROLES, prompt.roles)
        box_tokens = self.encoder.encode_box(self.box)
        point_tokens = self.encoder.encode_points(self.points)
        self.assertTrue(torch.equal(prompt.tokens[:, :2], box_tokens))
        self.assertTrue(torch.equal(prompt.tokens[:, 2:], point_tokens))

    def test_swapping_end_points_changes_only_their_tokens(self):
        prompt = self.encoder.assemble_prompt(self.box, self.points)
        swapped = self.encoder.assemble_prompt(self.box, PromptPoints(self.points.p2, self.points.c, self.points.p1))
        for index in (0, 1, 3):
            self.assertTrue(torch.equal(prompt.tokens[:, index], swapped.tokens[:, index]))
        self.assertFalse(torch.equal(prompt.tokens[:, 2], swapped.tokens[:, 2]))
        self.assertTrue(torch.equal(prompt.tokens[:, 2], swapped.tokens[:, 4]))
        self.assertTrue(torch.equal(prompt.tokens[:, 4], swapped.tokens[:, 2]))

    def test_points_share_foreground_role(self):
        self.assertEqual({PromptRole.POINT_FG}, set(ORIENTED_ROLES[2:]))
        # identical coordinates give identical tokens for every point
        same = np.array([[32.0, 32.0]] * 3)
        tokens = self.encoder.encode_points(same)
        self.assertTrue(torch.equal(tokens[0, 0], tokens[0, 1]))
        self.assertTrue(torch.equal(tokens[0, 1], tokens[0, 2]))

    def test_box_mode(self):
        encoder = PromptEncoder(embed_dim=16, s_in=64, mode='box')
        prompt = encoder.assemble_prompt(self.box)
        self.assertEqual(2, prompt.n_tokens)
        self.assertEqual(BOX_ROLES, prompt.roles)

    def test_oriented_mode_needs_points(self):
        with self.assertRaises(DomainError):
            self.encoder.assemble_prompt(self.box)

    def test_forward_batches(self):
        coords = torch.tensor(np.stack([np.concatenate([self.box.to_array(), self.points.to_array()])] * 3),
                              dtype=torch.float32)
        prompt = self.encoder(coords)
        self.assertEqual((3, 5, 16), tuple(prompt.tokens.shape))
        self.assertTrue(torch.allclose(prompt.tokens[0], prompt.tokens[2]))

    def test_rejects_out_of_range(self):
        with self.assertRaises(DomainError):
            self.encoder.encode_points(np.array([[-1.0, 5.0], [5.0, 5.0], [10.0, 5.0]]))
        with self.assertRaises(DomainError):
            self.encoder.encode_points(np.array([[1.0, 65.0], [5.0, 5.0], [10.0, 5.0]]))
        with self.assertRaises(DomainError):
            self.encoder.encode_points(np.array([[float('nan'), 5.0], [5.0, 5.0], [10.0, 5.0]]))

    def test_rejects_bad_shape(self):
        with self.assertRaises(ShapeError):
            self.encoder.encode_points(np.zeros((4, 2)))
        with self.assertRaises(ShapeError):
            self.encoder(torch.zeros(2, 4, 2))

    def test_dense_pe_shape(self):
        self.assertEqual((1, 16, 4, 4), tuple(self.encoder.dense_pe(4).shape))


if __name__ == '__main__':
    unittest.main()
