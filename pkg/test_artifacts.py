#!/usr/bin/env python3
"""
Tests for artifact hashing and run manifests
"""

import json
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from artifacts import (append_hash_suffix, describe_artifact, read_version, sha256_bytes, sha256_file, write_json,
                       write_manifest)

ABC_SHA256 = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


class TestHashing(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_known_digest(self):
        self.assertEqual(sha256_bytes(b"abc"), ABC_SHA256)
        path = self.tmp / "abc.bin"
        path.write_bytes(b"abc")
        self.assertEqual(sha256_file(path, chunk_size=1), ABC_SHA256)

    def test_hash_suffix(self):
        self.assertEqual(append_hash_suffix("report.pdf", ABC_SHA256), "report_sha256_ba7816bf8f01.pdf")
        self.assertEqual(append_hash_suffix("report.pdf", None), "report.pdf")

    def test_describe_artifact(self):
        nested = self.tmp / "benchmark" / "summary.json"
        nested.parent.mkdir()
        nested.write_text("{}")
        entry = describe_artifact(nested, "benchmark-summary", self.tmp)
        self.assertEqual(entry["name"], "benchmark/summary.json")
        self.assertEqual(entry["bytes"], 2)
        self.assertEqual(entry["category"], "benchmark-summary")
        elsewhere = Path(tempfile.mkdtemp())
        try:
            outside = elsewhere / "model.pt"
            outside.write_bytes(b"abc")
            entry = describe_artifact(outside, "model!", self.tmp)
            self.assertEqual(entry["name"], "model.pt")
            self.assertEqual(entry["category"], "model")
            self.assertEqual(entry["sha256"], ABC_SHA256)
        finally:
            shutil.rmtree(elsewhere, ignore_errors=True)


class TestManifest(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_write_json_handles_arrays(self):
        path = write_json(self.tmp / "out" / "values.json", {"b": np.arange(3), "a": Path("x/y")})
        text = path.read_text()
        self.assertLess(text.index('"a"'), text.index('"b"'))
        self.assertEqual(json.loads(text), {"a": "x/y", "b": [0, 1, 2]})

    def test_manifest_is_reproducible(self):
        (self.tmp / "b.json").write_text("1")
        (self.tmp / "a.json").write_text("2")
        artifacts = [describe_artifact(self.tmp / n, "data", self.tmp) for n in ("b.json", "a.json")]
        first = write_manifest(self.tmp, "label", "deadbeef", {"seed": 3}, artifacts).read_bytes()
        second = write_manifest(self.tmp, "label", "deadbeef", {"seed": 3}, list(reversed(artifacts))).read_bytes()
        self.assertEqual(first, second)
        manifest = json.loads(first)
        self.assertEqual([a["name"] for a in manifest["artifacts"]], ["a.json", "b.json"])
        self.assertEqual(manifest["seeds"], {"seed": 3})
        self.assertIn("numpy", manifest["packages"])

    def test_read_version(self):
        path = self.tmp / "version.json"
        path.write_text(json.dumps({"version": "1.4.0"}))
        self.assertEqual(read_version(path), "1.4.0")
        self.assertEqual(read_version(self.tmp / "missing.json"), "0.0.0")


if __name__ == "__main__":
    unittest.main()
