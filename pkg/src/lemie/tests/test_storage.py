"""
Tests for CSV/JSON persistence of draws, weights and run artefacts.
"""

import json
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", ".."))

from lemie.errors import InvalidArgument  # noqa: E402
from lemie.laplace import build_laplace  # noqa: E402
from lemie.mie import ProposalSet, Scheme, mie2_estimate  # noqa: E402
from lemie.model import DrawSource, ParamDraws, SourceKind  # noqa: E402
from lemie.storage import (  # noqa: E402
    read_draws,
    read_laplace,
    read_observations,
    read_weighted,
    sidecar_path,
    write_columns,
    write_draws,
    write_laplace,
    write_observations,
    write_partition_manifest,
    write_transcript,
    write_weighted,
)
from lemie.tests.fixtures import DataFixtures, ProtocolFixtures  # noqa: E402


class TestStorage(unittest.TestCase):
    """Test cases for the file formats."""

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_pooled_draws_keep_origins(self):
        """Pooled draws are written with one source label per row."""
        pooled = ParamDraws.pool(
            [
                ParamDraws(np.array([[0.1, 0.2], [0.3, 0.4]]), DrawSource.local(0)),
                ParamDraws(np.array([[0.5, 0.6]]), DrawSource.laplace(2)),
            ]
        )
        path = self.tmp / "draws.csv"
        write_draws(path, pooled, seed=7)
        header = path.read_text().splitlines()[0]
        self.assertEqual(header, "theta_0,theta_1,source")
        back = read_draws(path)
        np.testing.assert_array_equal(back.draws, pooled.draws)
        self.assertEqual(back.origins.tolist(), [0, 0, -2])
        self.assertEqual(json.loads(sidecar_path(path).read_text())["seed"], 7)

    def test_local_draws_keep_source(self):
        """Single-source draws read back with their source and no origins."""
        draws = ParamDraws(np.array([0.25, 0.75]), DrawSource(SourceKind.LOCAL, 3))
        path = self.tmp / "local.csv"
        write_draws(path, draws, part_id=3)
        back = read_draws(path)
        self.assertEqual(back.source, DrawSource.local(3))
        self.assertIsNone(back.origins)

    def test_weighted_file(self):
        """Weighted sets keep scheme, mixture weights and c-hat in the sidecar."""
        model, result = ProtocolFixtures.beta_round(M=2, N=50, seed=1)
        ws = mie2_estimate(ProposalSet.build(result.pooled, result.loglik, model)).weights
        path = self.tmp / "weights.csv"
        write_weighted(path, ws)
        back = read_weighted(path)
        self.assertIs(back.scheme, Scheme.MIE2)
        self.assertEqual(set(back.component_weights), {0, 1})
        np.testing.assert_allclose(back.norm_weights, ws.norm_weights)
        self.assertAlmostEqual(back.chat[1], ws.chat[1])

    def test_weighted_file_needs_weight_columns(self):
        """A plain draws file is not a weighted-sample file."""
        path = self.tmp / "plain.csv"
        write_draws(path, ParamDraws(np.array([0.5]), DrawSource.local(0)))
        with self.assertRaises(InvalidArgument):
            read_weighted(path)

    def test_laplace_json(self):
        """Approximations are stored as JSON."""
        _, _, _, main = ProtocolFixtures.gaussian_round(M=2, N=100)
        approx = build_laplace(main.pooled, [2])[2]
        path = self.tmp / "laplace_type2.json"
        write_laplace(path, approx)
        self.assertEqual(json.loads(path.read_text())["type"], 2)
        np.testing.assert_allclose(read_laplace(path).mu, approx.mu)

    def test_observations_and_manifest(self):
        """Observation blocks and partition manifests are written to disk."""
        block = DataFixtures.bernoulli(n=20, successes=5)
        path = self.tmp / "obs.csv"
        write_observations(path, block)
        self.assertEqual(read_observations(path).column("x").sum(), 5.0)
        manifest = self.tmp / "partition.json"
        write_partition_manifest(manifest, DataFixtures.split(block, 4))
        self.assertTrue(json.loads(manifest.read_text()))

    def test_transcript_lines(self):
        """One JSON line per protocol message."""
        _, result = ProtocolFixtures.beta_round(M=2, N=10, seed=2)
        path = self.tmp / "transcript.jsonl"
        write_transcript(path, result.transcript)
        self.assertEqual(len(path.read_text().splitlines()), 6)

    def test_plot_columns(self):
        """Plot data starts with a commented header."""
        path = self.tmp / "plots" / "density_mie2.txt"
        write_columns(path, ["x", "density"], [[0.0, 1.0], [0.5, 0.25]])
        lines = path.read_text().splitlines()
        self.assertEqual(lines[0], "# x density")
        self.assertEqual(lines[2], "1.0 0.25")


if __name__ == "__main__":
    unittest.main()
