import tempfile
import unittest
from pathlib import Path

from config import DEFAULT_CONFIG_PATH, load_config, parse_config, save_config
from editor import GatingPolicy
from errors import InvalidScheduleConfig, IoError

BASE = """
seed = 3
train_steps = 100
sample_steps = 10
beta_min = 0.001
beta_max = 0.02
gate_t_start = 10
gate_t_end = 2
gate_l_start = 3
gate_l_end = 4
mt_threshold = 0.3
blend_threshold = 0.3
mt_soft = no
p2p_inject = 1
"""


class TestParseConfig(unittest.TestCase):
    def test_bundled_default(self):
        config = load_config(DEFAULT_CONFIG_PATH)
        self.assertEqual(config.sample_steps, 50)
        self.assertEqual(config.gating(), GatingPolicy.default(50, config.layer_count))
        self.assertEqual(config.backend_config().image_size, (64, 64))
        self.assertEqual(load_config(), config)

    def test_values_and_defaults(self):
        config = parse_config(BASE)
        self.assertFalse(config.mt_soft)
        self.assertTrue(config.p2p_inject)
        self.assertIsNone(config.dump_dir)
        self.assertEqual(config.backend_resolutions, (16, 8, 8, 16))
        self.assertEqual(config.schedule().sample_steps, 10)
        self.assertEqual(config.edit_options().blend_mode, "union")

    def test_comments_and_blank_lines(self):
        config = parse_config("# header\n\n" + BASE + "\n# trailing\nblend_mode = empty\n")
        self.assertEqual(config.blend_mode, "empty")

    def test_rejections(self):
        cases = [
            BASE + "colour = blue\n",
            BASE + "seed = 4\n",
            BASE.replace("p2p_inject = 1\n", ""),
            BASE.replace("mt_soft = no", "mt_soft = maybe"),
            BASE.replace("seed = 3", "seed = three"),
            BASE.replace("gate_t_start = 10", "gate_t_start = 11"),
            BASE.replace("gate_l_end = 4", "gate_l_end = 5"),
            BASE.replace("sample_steps = 10", "sample_steps = 200"),
            BASE + "ablation = everything\n",
            BASE.replace("mt_threshold = 0.3", "mt_threshold = 5"),
            BASE.replace("blend_threshold = 0.3", "blend_threshold = -2"),
            BASE + "not a pair\n",
        ]
        for text in cases:
            with self.assertRaises(InvalidScheduleConfig):
                parse_config(text)

    def test_save_load_round_trip(self):
        config = parse_config(BASE + "dump_dir = out/dump\nbackend_resolutions = 4,2,2,4\n")
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.cfg"
            save_config(config, path)
            self.assertEqual(load_config(path), config)
            text = path.read_text()
        keys = [line.split(" = ")[0] for line in text.splitlines()]
        self.assertEqual(keys, sorted(keys))

    def test_missing_file(self):
        with self.assertRaises(IoError):
            load_config("/nonexistent/run.cfg")


if __name__ == "__main__":
    unittest.main()
