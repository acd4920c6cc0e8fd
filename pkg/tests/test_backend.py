import unittest

import numpy as np
import torch
from torch.testing import assert_close

from attention import AttentionControl, AttentionTensors, sr_attn
from backend import PAD_TOKEN, BackendConfig, ToyBackend, token_id
from errors import DimensionMismatch, ShapeMismatch
from scalar_reference import ScalarToyModel, to_lists
from scheduler import LatentState


def small_backend(seed=0, **overrides):
    params = dict(seed=seed, channels=4, latent_size=(4, 4), patch_size=2,
                  block_resolutions=((4, 4), (2, 2), (4, 4)), heads=2, head_dim=2, text_dim=6, seq_len=4)
    params.update(overrides)
    return ToyBackend(BackendConfig(**params))


class TestTextEmbedding(unittest.TestCase):
    def test_empty_prompt_is_all_pad(self):
        backend = small_backend()
        embedding = backend.embed_text("")
        self.assertEqual(embedding.tokens, (PAD_TOKEN,) * 4)
        self.assertTrue(torch.equal(embedding.vectors, backend.embed_text("").vectors))

    def test_per_token_rows(self):
        backend = small_backend()
        cat, dog = backend.embed_text("a cat"), backend.embed_text("a dog")
        differs = [not torch.equal(a, b) for a, b in zip(cat.vectors, dog.vectors)]
        self.assertEqual(differs, [False, True, False, False])
        self.assertEqual(cat.words, ("a", "cat"))

    def test_truncation_and_token_ids(self):
        embedding = small_backend().embed_text("one two three four five")
        self.assertEqual(len(embedding.tokens), 4)
        self.assertEqual(embedding.tokens[0], token_id("one"))
        self.assertNotEqual(token_id("cat"), PAD_TOKEN)


class TestCodec(unittest.TestCase):
    def test_constant_image_round_trip(self):
        backend = small_backend()
        image = np.full((8, 8, 3), 77, dtype=np.uint8)
        latent = backend.encode_image(image)
        self.assertTrue(torch.allclose(latent.data, latent.data[:, :1, :1].expand_as(latent.data)))
        self.assertTrue(np.array_equal(backend.decode_latent(latent), image))

    def test_patch_means(self):
        backend = small_backend()
        image = np.zeros((8, 8, 3), dtype=np.uint8)
        image[::2, ::2] = 255  # one white pixel per 2x2 patch
        pooled = torch.full((3,), (255 / 127.5 - 1.0 + 3 * -1.0) / 4)
        latent = backend.encode_image(image).data
        assert_close(latent[:, 1, 2], backend.mixing @ pooled)

    def test_zero_latent_is_mid_gray(self):
        backend = small_backend()
        image = backend.decode_latent(LatentState(torch.zeros(4, 4, 4), 0))
        self.assertTrue(np.all(image == 128))

    def test_decode_matches_per_pixel_loop(self):
        backend = small_backend()
        latent = torch.randn(4, 4, 4, generator=torch.Generator().manual_seed(5)) * 0.5
        image = backend.decode_latent(LatentState(latent, 0))
        mixing = to_lists(backend.mixing)
        lat = to_lists(latent)
        for y in range(8):
            for x in range(8):
                for k in range(3):
                    value = sum(mixing[c][k] * lat[c][y // 2][x // 2] for c in range(4))
                    expected = min(255, max(0, round((value + 1.0) * 127.5)))
                    self.assertLessEqual(abs(int(image[y, x, k]) - expected), 1)

    def test_wrong_size_rejected(self):
        with self.assertRaises(DimensionMismatch):
            small_backend().encode_image(np.zeros((6, 8, 3), dtype=np.uint8))
        with self.assertRaises(ShapeMismatch):
            BackendConfig(seed=0, channels=2)


class TestPredictNoise(unittest.TestCase):
    def test_deterministic(self):
        latent = torch.randn(4, 4, 4, generator=torch.Generator().manual_seed(2))
        a, b = small_backend(seed=3), small_backend(seed=3)
        embedding = a.embed_text("a cat")
        self.assertTrue(torch.equal(a(latent, embedding, 7), b(latent, embedding, 7)))
        self.assertFalse(torch.equal(a(latent, embedding, 7), small_backend(seed=4)(latent, embedding, 7)))

    def test_zero_target_mask_matches_plain(self):
        backend = small_backend()
        latent = torch.randn(4, 4, 4, generator=torch.Generator().manual_seed(2))
        embedding = backend.embed_text("a cat")

        class ZeroMix(AttentionControl):
            def self_attention(self, site, q, k, v):
                return sr_attn(AttentionTensors(q, k, v), k, v, torch.ones(site.tokens),
                               torch.zeros(site.tokens), site.head_count)

        self.assertTrue(torch.equal(backend(latent, embedding, 3, ZeroMix()), backend(latent, embedding, 3)))

    def test_zero_gain_is_zero_predictor(self):
        backend = small_backend(output_gain=0.0)
        out = backend(torch.randn(4, 4, 4), backend.embed_text("x"), 1)
        self.assertTrue(torch.equal(out, torch.zeros(4, 4, 4)))

    def test_outputs_finite_for_large_inputs(self):
        backend = small_backend(seed=5)
        gen = torch.Generator().manual_seed(9)
        for scale in (1.0, 10.0, 100.0):
            for t in (0, 1, 500, 999):
                latent = scale * torch.randn(4, 4, 4, generator=gen)
                out = backend(latent, backend.embed_text("a photo of a cat"), t)
                self.assertTrue(bool(torch.isfinite(out).all()), (scale, t))
            image = backend.decode_latent(LatentState(scale * torch.randn(4, 4, 4, generator=gen), 0))
            self.assertEqual(image.dtype, np.uint8)

    def test_single_block_matches_scalar_forward(self):
        backend = ToyBackend(BackendConfig(seed=9, channels=3, latent_size=(2, 2), patch_size=1,
                                           block_resolutions=((2, 2),), heads=1, head_dim=2,
                                           text_dim=3, seq_len=2))
        latent = torch.randn(3, 2, 2, generator=torch.Generator().manual_seed(8))
        embedding = backend.embed_text("red")
        expected = ScalarToyModel.from_backend(backend).forward(to_lists(latent), to_lists(embedding.vectors), 4)
        assert_close(backend(latent, embedding, 4).double(), torch.tensor(expected, dtype=torch.float64),
                     rtol=1e-5, atol=1e-5)

    def test_shape_checked(self):
        backend = small_backend()
        with self.assertRaises(ShapeMismatch):
            backend(torch.zeros(3, 4, 4), backend.embed_text(""), 1)

    def test_sites(self):
        sites = small_backend().sites
        self.assertEqual([s.layer_index for s in sites], [1, 2, 3])
        self.assertEqual([s.resolution for s in sites], [(4, 4), (2, 2), (4, 4)])


if __name__ == "__main__":
    unittest.main()
