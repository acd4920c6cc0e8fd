import contextlib
import io
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch
from torch.testing import assert_close

import main
from backend import ToyBackend
from config import parse_config
from storage import read_kv_cache, read_ppm, read_trajectory, write_pgm, write_ppm

TINY = """
seed = 5
train_steps = 30
sample_steps = 3
beta_min = 0.001
beta_max = 0.05
gate_t_start = 3
gate_t_end = 1
gate_l_start = 3
gate_l_end = 4
mt_threshold = 0.3
blend_threshold = 0.3
mt_soft = false
p2p_inject = false
backend_latent_size = 4
backend_patch_size = 2
backend_resolutions = 4,2,2,4
backend_heads = 2
backend_head_dim = 2
backend_text_dim = 4
backend_seq_len = 6
"""


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self._tmp.name)
        gen = np.random.default_rng(0)
        write_ppm(self.dir / "source.ppm", gen.integers(0, 256, (8, 8, 3), dtype=np.uint8))
        write_ppm(self.dir / "reference.ppm", gen.integers(0, 256, (8, 8, 3), dtype=np.uint8))
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[2:6, 2:6] = 255
        write_pgm(self.dir / "mask.pgm", mask)
        self.config = self.write_config("run.cfg", TINY)

    def tearDown(self):
        self._tmp.cleanup()

    def write_config(self, name, text):
        path = self.dir / name
        path.write_text(text)
        return str(path)

    def run_main(self, *argv):
        out = io.StringIO()
        with contextlib.redirect_stdout(out):
            code = main.main([str(a) for a in argv])
        return code, out.getvalue()

    def invert(self, config=None, prefix="src"):
        return self.run_main("invert", "--image", self.dir / "source.ppm", "--prompt", "a photo of a cat",
                             "--config", config or self.config,
                             "--out-traj", self.dir / f"{prefix}.traj", "--out-maps", self.dir / f"{prefix}.maps")

    def extract(self, config=None, out="ref.kv"):
        return self.run_main("extract-ref", "--image", self.dir / "reference.ppm", "--prompt", "",
                             "--config", config or self.config, "--out-kv", self.dir / out)

    def edit(self, config=None, target="a photo of a dog", traj="src.traj", maps="src.maps", kv="ref.kv"):
        return self.run_main("edit", "--src-traj", self.dir / traj, "--src-maps", self.dir / maps,
                             "--ref-kv", self.dir / kv, "--source-prompt", "a photo of a cat",
                             "--target-prompt", target, "--edit-token", 4, "--source-token", 4,
                             "--mask", self.dir / "mask.pgm", "--config", config or self.config,
                             "--out", self.dir / "out.ppm")


class TestInvertCommand(CliTestCase):
    def test_outputs_and_checksum(self):
        code, out = self.invert()
        self.assertEqual(code, 0)
        self.assertIn("final latent sha256", out)
        self.assertRegex(out, r"\([0-9A-F]{4}-[0-9A-F]{4}-[0-9A-F]{4}-[0-9A-F]{4}\)")
        self.assertEqual(read_trajectory(self.dir / "src.traj").final_step, 3)

    def test_byte_identical_reruns(self):
        self.invert(prefix="a")
        self.invert(prefix="b")
        for suffix in ("traj", "maps"):
            self.assertEqual((self.dir / f"a.{suffix}").read_bytes(), (self.dir / f"b.{suffix}").read_bytes())

    def test_zero_predictor_endpoint(self):
        config = self.write_config("zero.cfg", TINY + "backend_output_gain = 0.0\n")
        self.assertEqual(self.invert(config=config)[0], 0)
        run = parse_config(TINY + "backend_output_gain = 0.0\n")
        z0 = ToyBackend(run.backend_config()).encode_image(read_ppm(self.dir / "source.ppm")).data
        trajectory = read_trajectory(self.dir / "src.traj")
        assert_close(trajectory.latent(3).data, math.sqrt(run.schedule().alpha(3)) * z0, rtol=0, atol=1e-6)

    def test_missing_config_key(self):
        config = self.write_config("bad.cfg", TINY.replace("seed = 5\n", ""))
        self.assertEqual(self.invert(config=config)[0], 10)

    def test_missing_image(self):
        code, _ = self.run_main("invert", "--image", self.dir / "nope.ppm", "--prompt", "x", "--config", self.config,
                                "--out-traj", self.dir / "t", "--out-maps", self.dir / "m")
        self.assertEqual(code, 50)


class TestExtractRefCommand(CliTestCase):
    def test_entry_count_and_determinism(self):
        self.assertEqual(self.extract(out="a.kv")[0], 0)
        self.assertEqual(self.extract(out="b.kv")[0], 0)
        self.assertEqual(len(read_kv_cache(self.dir / "a.kv")), 3 * 4)
        self.assertEqual((self.dir / "a.kv").read_bytes(), (self.dir / "b.kv").read_bytes())


class TestEditCommand(CliTestCase):
    def test_degenerate_config_reproduces_source(self):
        config = self.write_config("degenerate.cfg", TINY + "ablation = no_reference\nblend_mode = empty\n")
        self.invert(config=config)
        self.extract(config=config)
        code, out = self.edit(config=config, target="a photo of a cat")
        self.assertEqual(code, 0)
        run = parse_config(TINY)
        backend = ToyBackend(run.backend_config())
        expected = backend.decode_latent(read_trajectory(self.dir / "src.traj").latent(0))
        self.assertTrue(np.array_equal(read_ppm(self.dir / "out.ppm"), expected))
        self.assertIn("edited image sha256", out)

    def test_full_edit_with_dump(self):
        dump = self.dir / "dump"
        config = self.write_config("dump.cfg", TINY + f"dump_dir = {dump}\n")
        self.invert(config=config)
        self.extract(config=config)
        self.assertEqual(self.edit(config=config)[0], 0)
        first = (self.dir / "out.ppm").read_bytes()
        for t in (1, 2, 3):
            for name in (f"latent_t{t:03d}.sprf", f"target_mask_t{t:03d}.sprf", f"blend_mask_t{t:03d}.pgm"):
                self.assertTrue((dump / name).exists(), name)
        for name in ("steps.csv", "coverage.png", "run.cfg"):
            self.assertTrue((dump / name).exists(), name)
        self.assertEqual(len((dump / "steps.csv").read_text().strip().splitlines()), 4)

        self.assertEqual(self.edit(config=config)[0], 0)
        self.assertEqual((self.dir / "out.ppm").read_bytes(), first)

    def test_mismatched_steps(self):
        self.invert()
        longer = self.write_config("longer.cfg", TINY.replace("sample_steps = 3", "sample_steps = 4")
                                   .replace("gate_t_start = 3", "gate_t_start = 4"))
        self.extract(config=longer)
        code, _ = self.edit()
        self.assertEqual(code, 41)


class TestSelftestCommand(CliTestCase):
    def test_passes(self):
        code, out = self.run_main("selftest", "--config", self.config)
        self.assertEqual(code, 0, out)
        self.assertIn("miniature_loop_oracle", out)
        self.assertNotIn("FAIL", out)

    def test_single_step_schedule(self):
        config = self.write_config("one.cfg", TINY.replace("sample_steps = 3", "sample_steps = 1")
                                   .replace("gate_t_start = 3", "gate_t_start = 1"))
        self.assertEqual(self.run_main("selftest", "--config", config)[0], 0)

    def test_corrupted_sentinel_is_reported(self):
        code, out = self.run_main("selftest", "--config", self.config, "--sentinel", "-1.0")
        self.assertEqual(code, 60)
        failed = [line for line in out.splitlines() if "FAIL" in line]
        self.assertTrue(any("masked_key_nullity" in line for line in failed))


if __name__ == "__main__":
    unittest.main()
