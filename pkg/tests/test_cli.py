import contextlib
import io
import json
from pathlib import Path
import tempfile
import unittest

from plasticity_lab.cli import EXIT_DIVERGED, EXIT_INVALID, EXIT_OK, main
from plasticity_lab.records import CHECKPOINT_FILE, DOSE_FILE, DOSE_HEADER, METRICS_FILE, read_metrics

SMALL_RUN = {
    "schema_version": 1,
    "network": {"width": 8, "depth": 1},
    "task": {"dataset": {"num_classes": 3, "input_dim": 4, "n_per_class": 20}, "steps_per_task": 10, "num_tasks": 2},
    "training": {"batch_size": 8, "cadence": 5, "eval_size": 40, "probe_size": 32},
}

DIVERGING_RUN = {
    "schema_version": 1,
    "network": {"width": 8, "depth": 1},
    "task": {
        "dataset": {"num_classes": 2, "input_dim": 4, "n_per_class": 20}, "mode": "stationary",
        "target": {"frequency": 10}, "steps_per_task": 100, "num_tasks": 1,
    },
    "loss": {"kind": "mse"},
    "optimizer": {"algorithm": "sgd", "lr": 1e8},
    "training": {"batch_size": 16, "cadence": 50, "eval_size": 40, "probe_size": 32},
}


def quiet_main(argv: list[str]) -> tuple[int, str]:
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([*argv, "-q"] if argv and argv[0] != "--help" else argv)
    return code, out.getvalue()


class CLITestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def write_config(self, doc: dict, name: str = "config.json") -> str:
        path = self.tmp / name
        path.write_text(json.dumps(doc), encoding="utf-8")
        return str(path)


class TestUsage(CLITestCase):
    def test_unknown_command(self):
        self.assertEqual(quiet_main(["nope"])[0], EXIT_INVALID)

    def test_missing_option(self):
        self.assertEqual(quiet_main(["run", "--out", str(self.tmp)])[0], EXIT_INVALID)

    def test_help(self):
        self.assertEqual(quiet_main(["--help"])[0], EXIT_OK)

    def test_invalid_config(self):
        config = self.write_config(SMALL_RUN | {"optimizer": {"lr": -1}})
        self.assertEqual(quiet_main(["run", "--config", config, "--out", str(self.tmp / "a")])[0], EXIT_INVALID)
        self.assertFalse((self.tmp / "a" / METRICS_FILE).exists())

    def test_invalid_switch(self):
        config = self.write_config(SMALL_RUN)
        code, _ = quiet_main(["microscope", "--config", config, "--out", str(self.tmp), "--reset-optimizer", "maybe"])
        self.assertEqual(code, EXIT_INVALID)


class TestRun(CLITestCase):
    def test_runs_are_reproducible(self):
        config = self.write_config(SMALL_RUN)
        for name in ("a", "b"):
            self.assertEqual(quiet_main(["run", "--config", config, "--out", str(self.tmp / name)])[0], EXIT_OK)
        a, b = (self.tmp / name / METRICS_FILE for name in ("a", "b"))
        self.assertEqual(a.read_bytes(), b.read_bytes())
        self.assertEqual([r.step for r in read_metrics(a)], [0, 5, 10, 10, 15, 20])

        # existing outputs are kept unless --force is given
        self.assertEqual(quiet_main(["run", "--config", config, "--out", str(self.tmp / "a")])[0], EXIT_INVALID)
        self.assertEqual(quiet_main(["run", "--config", config, "--out", str(self.tmp / "a"), "--force"])[0], EXIT_OK)
        self.assertEqual(a.read_bytes(), b.read_bytes())

    def test_several_seeds(self):
        config = self.write_config(SMALL_RUN | {"seeds": [0, 1]})
        self.assertEqual(quiet_main(["run", "--config", config, "--out", str(self.tmp / "grid")])[0], EXIT_OK)
        self.assertTrue((self.tmp / "grid" / "run000" / "seed1" / METRICS_FILE).exists())

    def test_divergence_exit_code(self):
        config = self.write_config(DIVERGING_RUN)
        self.assertEqual(quiet_main(["run", "--config", config, "--out", str(self.tmp / "d")])[0], EXIT_DIVERGED)
        self.assertTrue(read_metrics(self.tmp / "d" / METRICS_FILE)[-1].diverged)

    def test_checkpoint_commands(self):
        config = self.write_config(SMALL_RUN)
        run = self.tmp / "run"
        self.assertEqual(quiet_main(["run", "--config", config, "--out", str(run)])[0], EXIT_OK)
        checkpoint = str(run / CHECKPOINT_FILE)

        code, _ = quiet_main(["probe", "--checkpoint", checkpoint, "--steps", "4", "--rho", "1/2", "--out", str(run / "probe.json")])
        self.assertEqual(code, EXIT_OK)
        probe = json.loads((run / "probe.json").read_text())
        self.assertEqual([s for s, _ in probe["curve"]], [0, 1, 2, 4])
        self.assertAlmostEqual(probe["curve"][0][1], 0.25)

        self.assertEqual(quiet_main(["diagnose", "--checkpoint", checkpoint, "--batch", "40", "--out", str(run / "diag.jsonl")])[0], EXIT_OK)
        line = json.loads((run / "diag.jsonl").read_text())
        self.assertEqual(line["step"], 20)
        self.assertIn("census", line["payload"])

        code, out = quiet_main(["export-plot", str(run)])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(out.splitlines()), 2)


class TestExperiments(CLITestCase):
    def test_microscope(self):
        config = self.write_config(SMALL_RUN)
        code, _ = quiet_main(["microscope", "--config", config, "--out", str(self.tmp / "m"), "--steps", "2", "--reset-optimizer", "on"])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(read_metrics(self.tmp / "m" / "reset" / METRICS_FILE)), 3)
        self.assertFalse((self.tmp / "m" / "stale").exists())

    def test_bandit(self):
        out = self.tmp / "bandit"
        code, _ = quiet_main([
            "bandit", "--steps", "20", "--classes", "3", "--input-dim", "4", "--target-period", "5",
            "--gamma", "0.5", "--loss", "two_hot", "--probe-steps", "2", "--out", str(out),
        ])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual([r.step for r in read_metrics(out / METRICS_FILE)], [20])
        self.assertTrue((out / CHECKPOINT_FILE).exists())
        self.assertTrue((out / "probe.json").exists())

    def test_bandit_bound_too_small(self):
        code, _ = quiet_main(["bandit", "--steps", "5", "--gamma", "0.9", "--loss", "two_hot", "--bound", "3", "--out", str(self.tmp / "b")])
        self.assertEqual(code, EXIT_INVALID)

    def test_bandit_refuses_existing_outputs_before_training(self):
        out = self.tmp / "bandit"
        out.mkdir()
        (out / CHECKPOINT_FILE).write_text("{}")
        code, _ = quiet_main(["bandit", "--steps", "5", "--classes", "3", "--input-dim", "4", "--out", str(out)])
        self.assertEqual(code, EXIT_INVALID)
        self.assertFalse((out / METRICS_FILE).exists())
        self.assertEqual((out / CHECKPOINT_FILE).read_text(), "{}")

    def test_dose_seeds_must_be_integers(self):
        out = self.tmp / "dose"
        code, _ = quiet_main(["dose", "--offsets", "0", "--seeds", "1.5", "--steps", "3", "--out", str(out)])
        self.assertEqual(code, EXIT_INVALID)
        self.assertFalse((out / DOSE_FILE).exists())

    def test_dose(self):
        out = self.tmp / "dose"
        code, _ = quiet_main([
            "dose", "--offsets", "0,8", "--seeds", "0", "--steps", "3", "--frequency", "10",
            "--width", "8", "--depth", "1", "--batch-size", "16", "--out", str(out),
        ])
        self.assertEqual(code, EXIT_OK)
        lines = (out / DOSE_FILE).read_text().splitlines()
        self.assertEqual(lines[0], ",".join(DOSE_HEADER))
        self.assertEqual(len(lines), 3)

    def test_gradcheck(self):
        code, out = quiet_main(["gradcheck", "--cases", "12"])
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(out.startswith("12 cases"))


if __name__ == "__main__":
    unittest.main()
