import unittest

import numpy as np
import torch

from attention import AttentionSite
from errors import DimensionMismatch, DuplicateEntry, EmptyMask, MissingRecords, ShapeMismatch
from masks import (
    CrossAttnRecord, SourceMask, TargetMask, any_coverage_pool, binarize, canonical_resolution,
    compute_blend_mask, load_source_mask, normalize_map, resample_grid, update_target_mask,
)

SITES = [
    AttentionSite(1, (4, 4), 1, 2),
    AttentionSite(2, (2, 2), 1, 2),
    AttentionSite(3, (1, 1), 1, 2),
]


def probs_for(maps, seq_len=3):
    """[N_q] word maps for token 0 -> single-head probs [1, N_q, seq_len]."""
    maps = torch.tensor(maps, dtype=torch.float32)
    out = torch.zeros(1, maps.numel(), seq_len)
    out[0, :, 0] = maps
    return out


class TestSourceMask(unittest.TestCase):
    def test_all_white_is_all_ones(self):
        mask = load_source_mask(np.full((8, 8), 255, dtype=np.uint8), (4, 4), SITES)
        for site in SITES:
            self.assertTrue(torch.equal(mask.for_site(site), torch.ones(site.tokens)))

    def test_single_pixel_survives_pooling(self):
        pixels = np.zeros((8, 8), dtype=np.uint8)
        pixels[5, 2] = 200
        mask = load_source_mask(pixels, (4, 4), SITES)
        for site in SITES:
            self.assertEqual(int(mask.for_site(site).sum()), 1)

    def test_top_left_block_pools_to_one_cell(self):
        grid = torch.zeros(4, 4)
        grid[:2, :2] = 1.0
        self.assertEqual(any_coverage_pool(grid, (2, 2)).flatten().tolist(), [1.0, 0.0, 0.0, 0.0])

    def test_threshold_is_strict(self):
        pixels = np.full((4, 4), 127, dtype=np.uint8)
        with self.assertRaises(EmptyMask):
            load_source_mask(pixels, (4, 4), SITES)
        pixels[0, 0] = 128
        self.assertEqual(int(load_source_mask(pixels, (4, 4), SITES).full_res.sum()), 1)

    def test_dimension_errors(self):
        with self.assertRaises(DimensionMismatch):
            load_source_mask(np.full((8, 6), 255, dtype=np.uint8), (4, 4), SITES)
        with self.assertRaises(DimensionMismatch):
            load_source_mask(np.full((8, 8, 3), 255, dtype=np.uint8), (4, 4), SITES)
        mask = SourceMask.from_grid(torch.ones(4, 4), SITES[:1])
        with self.assertRaises(DimensionMismatch):
            mask.for_site(SITES[1])


class TestPoolingInvariants(unittest.TestCase):
    uneven = [AttentionSite(l, (r, r), 1, 2) for l, r in enumerate((16, 7, 5, 3, 2, 1), start=1)]

    def random_grid(self, gen, density):
        return (torch.rand(16, 16, generator=gen) < density).float()

    def test_single_pixel_in_non_multiple_mask_image(self):
        pixels = np.zeros((24, 24), dtype=np.uint8)
        pixels[7, 7] = 255
        sites = [AttentionSite(1, (16, 16), 1, 2), AttentionSite(2, (8, 8), 1, 2)]
        mask = load_source_mask(pixels, (16, 16), sites)
        self.assertEqual(int(mask.full_res.sum()), 1)
        for site in sites:
            self.assertEqual(int(mask.for_site(site).sum()), 1)

    def test_single_pixel_at_uneven_resolutions(self):
        grid = torch.zeros(16, 16)
        grid[5, 5] = 1.0
        mask = SourceMask.from_grid(grid, self.uneven)
        for site in self.uneven:
            self.assertEqual(int(mask.for_site(site).sum()), 1, site.resolution)

    def test_coarser_sites_never_have_more_cells(self):
        gen = torch.Generator().manual_seed(4)
        for _ in range(100):
            grid = self.random_grid(gen, float(torch.rand(1, generator=gen)) * 0.3)
            grid[int(torch.randint(0, 16, (1,), generator=gen)), 3] = 1.0
            mask = SourceMask.from_grid(grid, self.uneven)
            counts = [int(mask.for_site(site).sum()) for site in self.uneven]
            self.assertEqual(counts, sorted(counts, reverse=True))
            self.assertLessEqual(counts[0], int(grid.sum()))

    def test_enlarging_the_mask_never_shrinks_a_site(self):
        gen = torch.Generator().manual_seed(5)
        for _ in range(100):
            small = self.random_grid(gen, 0.1)
            small[0, 0] = 1.0
            large = torch.maximum(small, self.random_grid(gen, 0.1))
            before = SourceMask.from_grid(small, self.uneven)
            after = SourceMask.from_grid(large, self.uneven)
            for site in self.uneven:
                self.assertTrue(torch.all(after.for_site(site) >= before.for_site(site)))

    def test_resample_partitions_rows_and_columns(self):
        grid = torch.zeros(5, 5)
        grid[2, 4] = 1.0
        self.assertEqual(resample_grid(grid, (3, 3)).nonzero().tolist(), [[1, 2]])
        # nearest neighbour when growing
        self.assertEqual(int(resample_grid(torch.eye(2), (5, 5)).sum()), 13)
        with self.assertRaises(DimensionMismatch):
            any_coverage_pool(grid, (6, 3))

    def test_rebinarization_is_idempotent(self):
        gen = torch.Generator().manual_seed(6)
        values = torch.rand(64, generator=gen)
        for threshold in (0.0, 0.3, 0.5, 0.99):
            once = binarize(values, threshold)
            self.assertTrue(torch.equal(binarize(once, threshold), once))

    def test_target_mask_stays_in_unit_range(self):
        gen = torch.Generator().manual_seed(7)
        sites = [AttentionSite(1, (5, 5), 1, 2), AttentionSite(2, (3, 3), 1, 2), AttentionSite(3, (7, 7), 1, 2)]
        for soft in (False, True):
            for _ in range(20):
                record = CrossAttnRecord()
                for site in sites:
                    scale = float(torch.rand(1, generator=gen)) * 50.0
                    record.add_probs(2, site.layer_index, site.resolution,
                                     scale * torch.rand(1, site.tokens, 3, generator=gen))
                mask = update_target_mask(record, 1, 2, 0.3, sites, final_step=2, soft=soft)
                for site in sites:
                    values = mask.for_site(site)
                    self.assertEqual(values.numel(), site.tokens)
                    self.assertTrue(bool(((values >= 0) & (values <= 1)).all()))
                    if not soft:
                        self.assertTrue(bool(((values == 0) | (values == 1)).all()))



class TestNormalization(unittest.TestCase):
    def test_flat_map_is_all_active(self):
        self.assertTrue(torch.equal(normalize_map(torch.full((4,), 0.25)), torch.ones(4)))

    def test_canonical_is_coarsest(self):
        self.assertEqual(canonical_resolution([(4, 4), (2, 2), (8, 8)]), (2, 2))


class TestCrossAttnRecord(unittest.TestCase):
    def test_duplicate_and_validation(self):
        record = CrossAttnRecord()
        record.add_probs(1, 1, (1, 2), probs_for([0.5, 0.5]))
        with self.assertRaises(DuplicateEntry):
            record.add_probs(1, 1, (1, 2), probs_for([0.5, 0.5]))
        with self.assertRaises(ShapeMismatch):
            record.add_probs(1, 2, (2, 2), probs_for([0.5, 0.5]))
        with self.assertRaises(ShapeMismatch):
            record.add_probs(2, 1, (1, 2), probs_for([-0.1, 0.5]))
        with self.assertRaises(MissingRecords):
            record.probs(5, 1)

    def test_word_map_is_head_mean(self):
        record = CrossAttnRecord()
        probs = torch.zeros(2, 2, 1)
        probs[0, :, 0] = torch.tensor([0.2, 0.4])
        probs[1, :, 0] = torch.tensor([0.6, 0.0])
        record.add_probs(1, 1, (1, 2), probs)
        self.assertTrue(torch.allclose(record.map(1, 1, 0), torch.tensor([0.4, 0.2])))
        self.assertEqual(record.map_count(), 1)


class TestTargetMask(unittest.TestCase):
    sites = [AttentionSite(1, (1, 2), 1, 2), AttentionSite(2, (1, 2), 1, 2)]

    def test_two_layer_aggregation(self):
        record = CrossAttnRecord()
        record.add_probs(3, 1, (1, 2), probs_for([0.1, 0.9]))
        record.add_probs(3, 2, (1, 2), probs_for([0.3, 0.7]))
        mask = update_target_mask(record, 0, 2, 0.3, self.sites, final_step=3)
        self.assertEqual(mask.timestep, 2)
        self.assertEqual(mask.for_site(self.sites[0]).tolist(), [0.0, 1.0])

    def test_single_peak_is_one_hot(self):
        record = CrossAttnRecord()
        record.add_probs(4, 1, (2, 2), probs_for([0.0, 0.0, 0.97, 0.01]))
        sites = [AttentionSite(1, (2, 2), 1, 2), AttentionSite(2, (4, 4), 1, 2)]
        mask = update_target_mask(record, 0, 4, 0.3, sites, final_step=4)
        self.assertEqual(mask.for_site(sites[0]).tolist(), [0.0, 0.0, 1.0, 0.0])
        # nearest upsampling to the finer site
        self.assertEqual(int(mask.for_site(sites[1]).sum()), 4)

    def test_final_step_reads_its_own_maps(self):
        record = CrossAttnRecord()
        record.add_probs(2, 1, (1, 2), probs_for([0.9, 0.1]))
        record.add_probs(2, 2, (1, 2), probs_for([0.9, 0.1]))
        mask = update_target_mask(record, 0, 2, 0.3, self.sites, final_step=2)
        self.assertEqual(mask.for_site(self.sites[1]).tolist(), [1.0, 0.0])

    def test_soft_mask_keeps_values(self):
        record = CrossAttnRecord()
        record.add_probs(2, 1, (1, 2), probs_for([0.2, 0.6]))
        mask = update_target_mask(record, 0, 2, 0.3, self.sites[:1], final_step=2, soft=True)
        self.assertTrue(torch.allclose(mask.for_site(self.sites[0]), torch.tensor([0.0, 1.0])))

    def test_uniform_map_selects_everything(self):
        record = CrossAttnRecord()
        record.add_probs(2, 1, (1, 2), probs_for([0.5, 0.5]))
        mask = update_target_mask(record, 0, 1, 0.3, self.sites[:1], final_step=2)
        self.assertEqual(mask.coverage(), 1.0)

    def test_missing_step(self):
        with self.assertRaises(MissingRecords):
            update_target_mask(CrossAttnRecord(), 0, 1, 0.3, self.sites, final_step=3)

    def test_all_active(self):
        self.assertEqual(TargetMask.all_active(self.sites, 1).coverage(), 1.0)


class TestBlendMask(unittest.TestCase):
    def test_union_of_tokens(self):
        record = CrossAttnRecord()
        probs = torch.zeros(1, 2, 2)
        probs[0, :, 0] = torch.tensor([0.2, 0.8])
        probs[0, :, 1] = torch.tensor([0.9, 0.1])
        record.add_probs(1, 1, (1, 2), probs)
        mask = compute_blend_mask(record, [0, 1], 1, 0.5, (1, 2))
        self.assertEqual(mask.tolist(), [[True, True]])

    def test_single_token_matches_target_mask(self):
        record = CrossAttnRecord()
        record.add_probs(2, 1, (1, 2), probs_for([0.1, 0.9]))
        blend = compute_blend_mask(record, [0], 2, 0.3, (1, 2))
        target = update_target_mask(record, 0, 2, 0.3, [AttentionSite(1, (1, 2), 1, 2)], final_step=2)
        self.assertEqual(blend.flatten().float().tolist(), target.for_site(AttentionSite(1, (1, 2), 1, 2)).tolist())

    def test_disjoint_one_hot_maps(self):
        record = CrossAttnRecord()
        probs = torch.zeros(1, 4, 2)
        probs[0, 0, 0] = 1.0
        probs[0, 3, 1] = 1.0
        record.add_probs(1, 1, (2, 2), probs)
        mask = compute_blend_mask(record, [0, 1], 1, 0.3, (4, 4))
        self.assertEqual(int(mask.sum()), 8)
        self.assertTrue(bool(mask[0, 0]) and bool(mask[3, 3]))


if __name__ == "__main__":
    unittest.main()
