#!/usr/bin/env python3
"""
Tests for the command-line stages
"""

import io
import json
import shutil
import sys
import tempfile
import unittest
from contextlib import redirect_stdout
from pathlib import Path
from unittest import mock

sys.path.insert(0, str(Path(__file__).parent))

from cli import build_parser, dispatch, main
from config import load_config

CONFIGS = Path(__file__).parent / "configs"
MICRO = str(CONFIGS / "micro.json")


def run(argv):
    out = io.StringIO()
    with redirect_stdout(out):
        code = main(argv)
    return code, out.getvalue()


class TestCli(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def manifest(self):
        with open(self.tmp / "manifest.json", "r") as f:
            return json.load(f)

    def test_parser_rejects_unknown_command(self):
        with self.assertRaises(SystemExit):
            with redirect_stdout(io.StringIO()), mock.patch("sys.stderr", io.StringIO()):
                build_parser().parse_args(["optimize"])

    def test_bad_config_exit_code(self):
        path = self.tmp / "bad.json"
        path.write_text(json.dumps({"horizon": {"timesteps": 1}}))
        code, output = run(["inspect", "--config", str(path), "--out", str(self.tmp)])
        self.assertEqual(code, 2)
        self.assertIn("horizon.timesteps", output)

    def test_inspect_network(self):
        code, output = run(["inspect", "--config", MICRO, "--out", str(self.tmp)])
        self.assertEqual(code, 0)
        self.assertIn("radial: True", output)
        self.assertEqual(self.manifest()["command"], "inspect")

    def test_gen_data_writes_instances(self):
        code, _ = run(["gen-data", "--config", MICRO, "--out", str(self.tmp), "--seed", "4"])
        self.assertEqual(code, 0)
        self.assertEqual(len(list((self.tmp / "instances").glob("*.json"))), 6)
        manifest = self.manifest()
        self.assertEqual(manifest["seeds"]["seed"], 4)
        self.assertEqual(len(manifest["artifacts"]), 6)
        self.assertTrue(all(a["name"].startswith("instances/") for a in manifest["artifacts"]))

    def test_solve_single_instance(self):
        code, output = run(["solve", "--config", MICRO, "--out", str(self.tmp), "--evs", "1", "--gap", "0"])
        self.assertEqual(code, 0)
        self.assertIn("Feasibility check: pass", output)
        self.assertTrue((self.tmp / "solution.json").exists())

    def test_missing_dataset_fails(self):
        code, output = run(["train", "--config", MICRO, "--out", str(self.tmp),
                            "--dataset", str(self.tmp / "none.npz")])
        self.assertEqual(code, 1)
        self.assertIn("Error:", output)

    def test_dispatch_unknown_stage(self):
        cfg = load_config(MICRO, {"out_dir": str(self.tmp)}, env={})
        self.assertFalse(dispatch("optimize", cfg)["success"])

    def test_failed_stage_still_writes_manifest(self):
        cfg = load_config(MICRO, {"out_dir": str(self.tmp)}, env={})

        def broken(cfg, args):
            raise RuntimeError("solver crashed")

        with mock.patch.dict("cli.HANDLERS", {"train": broken}):
            result = dispatch("train", cfg)
        self.assertFalse(result["success"])
        self.assertIn("solver crashed", result["error"])
        manifest = self.manifest()
        self.assertEqual(manifest["command"], "train")
        self.assertEqual(manifest["status"], "failed")
        self.assertIn("RuntimeError: solver crashed", manifest["error"])
        self.assertEqual(manifest["artifacts"], [])

    def test_successful_stage_records_status(self):
        code, _ = run(["inspect", "--config", MICRO, "--out", str(self.tmp)])
        self.assertEqual(code, 0)
        self.assertEqual(self.manifest()["status"], "success")
        self.assertIsNone(self.manifest()["error"])

    def test_interval_study_stage(self):
        code, output = run(["interval-study", "--config", MICRO, "--out", str(self.tmp)])
        self.assertEqual(code, 0, output)
        self.assertIn("CNN_1", output)
        for name in ("intervals.csv", "intervals.xlsx", "intervals.pdf", "summary.json", "runtimes.png"):
            self.assertTrue((self.tmp / "interval_study" / name).exists(), name)
        self.assertEqual(self.manifest()["command"], "interval-study")

    def test_full_workflow(self):
        base = ["--config", MICRO, "--out", str(self.tmp)]
        for command in ("label", "train", "calibrate", "gen-data", "solve-assisted", "benchmark"):
            code, output = run([command] + base)
            self.assertEqual(code, 0, f"{command}: {output}")
            self.assertEqual(self.manifest()["command"], command)
        for name in ("dataset.npz", "model.pt", "thresholds.json", "solution_assisted.json",
                     "benchmark/report.csv", "benchmark/report.xlsx", "benchmark/report.pdf"):
            self.assertTrue((self.tmp / name).exists(), name)
        with open(self.tmp / "labelling.json", "r") as f:
            labelling = json.load(f)
        self.assertEqual(sorted(labelling["measured_seconds_per_count"]), ["1", "2", "3", "4"])
        self.assertEqual(labelling["padding_ablation"]["non_padding_models"], 4)
        code, output = run(["inspect", "--target", "report"] + base)
        self.assertEqual(code, 0)
        self.assertIn("r_bar", output)


if __name__ == "__main__":
    unittest.main()
