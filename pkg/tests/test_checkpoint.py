import json
from pathlib import Path
import tempfile
import unittest

import numpy as np

from plasticity_lab.checkpoint import (
    Checkpoint, decode_tensor, dumps_checkpoint, encode_tensor, load_checkpoint, loads_checkpoint, read_checkpoint,
    save_checkpoint,
)
from plasticity_lab.harness import LossConfig, train_step
from plasticity_lab.network import init_network, mlp_spec
from plasticity_lab.optimizers import OptimizerConfig, RegularizerConfig
from plasticity_lab.utils import CheckpointError, ConfigError, substream


def trained():
    net = init_network(mlp_spec(3, 2, 6, 2, norm="batch"), 0)
    state = OptimizerConfig(lr=0.01).new_state()
    rng = substream(0, "train")
    for step in range(3):
        x = rng.normal(size=(8, 3))
        train_step(net, state, x, rng.integers(0, 2, size=8), LossConfig(), RegularizerConfig(), 2, step)
    return net, state


class TestTensors(unittest.TestCase):
    def test_exact(self):
        values = np.array([[0.1, 1 / 3], [np.pi * 1e-300, -2.5e17]])
        np.testing.assert_array_equal(decode_tensor(encode_tensor(values)), values)
        self.assertEqual(decode_tensor(encode_tensor(np.zeros((0, 4)))).shape, (0, 4))

    def test_wrong_size(self):
        with self.assertRaises(CheckpointError):
            decode_tensor({"shape": [2, 2], "values": "1 2 3"})
        with self.assertRaises(CheckpointError):
            decode_tensor({"shape": [1], "values": "one"})


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.net, self.state = trained()

    def test_save_load_save_is_identical(self):
        with tempfile.TemporaryDirectory() as tmp:
            first = save_checkpoint(Path(tmp) / "a.json", self.net, self.state, seed=4, step=3, extra={"note": "x"})
            ckpt = read_checkpoint(first)
            second = save_checkpoint(
                Path(tmp) / "b.json", ckpt.network, ckpt.optimizer, seed=ckpt.seed, step=ckpt.step, extra=ckpt.extra,
            )
            self.assertEqual(first.read_bytes(), second.read_bytes())
            net, state = load_checkpoint(first)
            for name, value in self.net.params.items():
                np.testing.assert_array_equal(net.params[name], value)
            for name, value in self.net.buffers.items():
                np.testing.assert_array_equal(net.buffers[name], value)
            self.assertEqual(state.t, 3)
            np.testing.assert_array_equal(state.v["0.weight"], self.state.v["0.weight"])
            self.assertEqual(net.init_layer_norms, self.net.init_layer_norms)

    def test_no_overwrite_without_force(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / "c.json", self.net, self.state)
            with self.assertRaises(ConfigError):
                save_checkpoint(path, self.net, self.state)
            save_checkpoint(path, self.net, self.state, force=True)

    def test_truncated(self):
        text = dumps_checkpoint(Checkpoint(self.net, self.state))
        cut = text[:len(text) // 2]
        with self.assertRaises(CheckpointError) as cm:
            loads_checkpoint(cut)
        self.assertIsNotNone(cm.exception.offset)
        self.assertLessEqual(cm.exception.offset, len(cut))
        self.assertIn("byte offset", str(cm.exception))

    def test_spec_hash_mismatch(self):
        doc = json.loads(dumps_checkpoint(Checkpoint(self.net, self.state)))
        doc["network"]["layers"][0]["out_features"] = 7
        with self.assertRaises(CheckpointError):
            loads_checkpoint(json.dumps(doc))

    def test_params_must_fit_spec(self):
        doc = json.loads(dumps_checkpoint(Checkpoint(self.net, self.state)))
        doc["params"]["0.weight"] = encode_tensor(np.zeros((5, 3)))
        with self.assertRaises(CheckpointError):
            loads_checkpoint(json.dumps(doc))

    def test_version(self):
        doc = json.loads(dumps_checkpoint(Checkpoint(self.net, self.state)))
        doc["schema_version"] = 99
        with self.assertRaises(CheckpointError):
            loads_checkpoint(json.dumps(doc))
        with self.assertRaises(CheckpointError):
            loads_checkpoint("[]")

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            read_checkpoint(Path("/nonexistent/checkpoint.json"))


if __name__ == "__main__":
    unittest.main()
