"""
Tests for scenario configs and the experiment runner.
"""

import json
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", ".."))

from lemie.errors import ConfigError, InvalidArgument  # noqa: E402
from lemie.experiments import (  # noqa: E402
    Method,
    ResultRow,
    ScenarioConfig,
    build_scenario,
    build_truth,
    error_2norm,
    group_rows,
    read_results,
    run_scenario,
    sweep,
    sweep_configs,
    truth_summary,
)
from lemie.model import observations  # noqa: E402
from lemie.settings import RuntimeSettings  # noqa: E402


def _beta_config(**overrides) -> ScenarioConfig:
    raw = {
        "scenario": "beta_small",
        "model": "beta_bernoulli",
        "n": 200,
        "M": 2,
        "data": {"design": "heterogeneous"},
        "N_per_worker": 400,
        "methods": ["naive", "vanilla", "mie2", "cmc1"],
        "seed": 3,
        "truth": {"draws": 2000},
    }
    raw.update(overrides)
    return ScenarioConfig.model_validate(raw)


class TestErrorNorm(unittest.TestCase):
    """Test cases for error_2norm."""

    def test_examples(self):
        """Distances for a few known vectors."""
        self.assertEqual(error_2norm([1, 2], [1, 2]), 0.0)
        self.assertEqual(error_2norm([3, 0], [0, 4]), 5.0)

    def test_length_mismatch(self):
        """Vectors of different length are rejected."""
        with self.assertRaises(InvalidArgument):
            error_2norm([1, 2, 3], [1, 2])


class TestScenarioConfig(unittest.TestCase):
    """Test cases for config validation."""

    def test_unknown_field_rejected(self):
        """Typos in a config are errors, not silently ignored."""
        with self.assertRaises(ValueError):
            _beta_config(N_per_workr=10)

    def test_lemie_needs_laplace_types(self):
        """LEMIE methods without Laplace types are rejected."""
        with self.assertRaises(ValueError):
            _beta_config(methods=["lemie2"])

    def test_too_many_parts(self):
        """M may not exceed n."""
        with self.assertRaises(ValueError):
            _beta_config(M=500)

    def test_bad_laplace_type(self):
        """Only Laplace types 1-3 exist."""
        with self.assertRaises(ValueError):
            _beta_config(laplace={"types": [4]})

    def test_from_file_errors(self):
        """Missing and invalid files raise ConfigError."""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                ScenarioConfig.from_file(Path(tmp) / "missing.json")
            bad = Path(tmp) / "bad.json"
            bad.write_text(json.dumps({"scenario": "x"}))
            with self.assertRaises(ConfigError):
                ScenarioConfig.from_file(bad)

    def test_parameter_dimensions(self):
        """NIW parameters stack the mean with vech(Sigma)."""
        config = ScenarioConfig.model_validate(
            {
                "scenario": "niw",
                "model": "mvn_niw",
                "n": 100,
                "d": 3,
                "M": 2,
                "data": {"design": "gaussian"},
                "N_per_worker": 10,
            }
        )
        self.assertEqual(config.parameter_dim, 9)
        self.assertEqual(config.data_dim, 3)

    def test_hash_is_stable(self):
        """Equal configs hash equally."""
        self.assertEqual(_beta_config().sha256(), _beta_config().sha256())
        self.assertNotEqual(_beta_config().sha256(), _beta_config(seed=4).sha256())

    def test_sweep_grid(self):
        """Sweeps expand into one config per M, named after the grid point."""
        configs = sweep_configs(_beta_config(sweep_M=[1, 2, 4]))
        self.assertEqual([c.M for c in configs], [1, 2, 4])
        self.assertEqual(configs[2].scenario, "beta_small/M4")
        grid = sweep_configs(_beta_config(sweep_M=[2], sweep_N=[100, 200]))
        self.assertEqual([c.scenario for c in grid], ["beta_small/M2_N100", "beta_small/M2_N200"])

    def test_method_families(self):
        """Consensus and density-product methods use fractionated priors."""
        self.assertTrue(Method.CMC2.fractionated)
        self.assertFalse(Method.MIE2.fractionated)

    def test_result_row_metric_checked(self):
        """Rows with unknown metrics are rejected."""
        with self.assertRaises(InvalidArgument):
            ResultRow("s", "mie2", 2, "accuracy", 1.0).validate()


class TestScenarioData(unittest.TestCase):
    """Test cases for data generation and reference posteriors."""

    def test_group_rows(self):
        """Identical predictor rows collapse into counts and successes."""
        block = observations(
            ["x_0", "x_1", "c", "y"],
            np.array([[1, 0, 1, 1], [1, 1, 1, 0], [1, 0, 1, 0], [1, 0, 1, 1]], dtype=float),
        )
        grouped = group_rows(block)
        self.assertEqual(grouped.n, 2)
        np.testing.assert_array_equal(grouped.column("c"), [3.0, 1.0])
        np.testing.assert_array_equal(grouped.column("y"), [2.0, 0.0])

    def test_heterogeneous_partition_by_label(self):
        """Splitting by label puts successes and failures in separate parts."""
        scenario = build_scenario(_beta_config(partition="by_label"))
        sums = sorted(float(p.column("x").sum()) for p in scenario.parts.parts)
        self.assertEqual(sums, [0.0, 100.0])

    def test_beta_truth_is_conjugate(self):
        """The beta reference posterior is Beta(a + s, b + n - s)."""
        truth = build_truth(build_scenario(_beta_config()))
        self.assertAlmostEqual(float(truth.mean[0]), 101 / 202)
        self.assertIsNotNone(truth.entropy)

    def test_data_seed_separate_from_seed(self):
        """The data seed fixes the observations while the run seed varies."""
        a = build_scenario(_beta_config(data={"design": "single_success"}, data_seed=9, seed=1))
        b = build_scenario(_beta_config(data={"design": "single_success"}, data_seed=9, seed=2))
        np.testing.assert_array_equal(a.data.values, b.data.values)


class TestRunScenario(unittest.TestCase):
    """Test cases for run_scenario and sweep."""

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.settings = RuntimeSettings(workers=2, chunk_size=256)

    def tearDown(self):
        self._tmp.cleanup()

    def test_small_beta_run(self):
        """A small run writes results, manifest, transcript and plot data."""
        outcome = run_scenario(_beta_config(), self.tmp, self.settings)
        out = self.tmp / "beta_small"
        for name in ("results.csv", "manifest.json", "transcript.jsonl", "partition.json"):
            self.assertTrue((out / name).exists(), name)
        self.assertTrue((out / "density_mie2.txt").exists())
        self.assertTrue((out / "weights_mie2.csv").exists())
        self.assertEqual(outcome.failed, [])

        rows = read_results(out / "results.csv")
        methods = {r.method for r in rows}
        self.assertEqual(methods, {"protocol", "naive", "vanilla", "mie2", "cmc1"})
        mie2 = {r.metric: r.value for r in rows if r.method == "mie2"}
        self.assertLess(mie2["err_mean"], 0.02)
        self.assertIn("ess", mie2)
        self.assertIn("kl", mie2)
        naive = {r.metric for r in rows if r.method == "naive"}
        self.assertNotIn("ess", naive)
        messages = [r for r in rows if r.metric == "protocol_messages"]
        self.assertEqual(messages[0].value, 6.0)

        manifest = json.loads((out / "manifest.json").read_text())
        self.assertEqual(manifest["config_sha256"], _beta_config().sha256())
        self.assertEqual(manifest["protocol"]["main"]["messages"], 6)

    def test_results_are_reproducible(self):
        """Two runs with the same seed write byte-identical result tables."""
        config = _beta_config(methods=["mie1", "mie3"])
        run_scenario(config, self.tmp / "a", self.settings, plots=False)
        run_scenario(config, self.tmp / "b", self.settings, plots=False)
        first = (self.tmp / "a" / "beta_small" / "results.csv").read_bytes()
        self.assertEqual(first, (self.tmp / "b" / "beta_small" / "results.csv").read_bytes())

    def test_propriety_violation_is_a_failed_row(self):
        """Too little data per part for a fractionated prior fails that method only."""
        config = _beta_config(n=8, M=4, methods=["mie2", "cmc2"])
        outcome = run_scenario(config, self.tmp, self.settings, plots=False)
        self.assertEqual([r.method for r in outcome.failed], ["cmc2"])
        self.assertIn("cmc2", outcome.manifest.failed)
        self.assertTrue(any(r.method == "mie2" and r.metric == "err_mean" for r in outcome.rows))

    def test_improper_local_posteriors_fail_every_method(self):
        """One observation per part under a vague NIW prior fails each method but still writes outputs."""
        config = ScenarioConfig.model_validate(
            {
                "scenario": "niw_tiny",
                "model": "mvn_niw",
                "n": 8,
                "d": 2,
                "M": 8,
                "prior": {"kappa": 0.0, "nu": 0.0, "psi_scale": 0.0},
                "data": {"design": "gaussian"},
                "N_per_worker": 50,
                "methods": ["naive", "mie2"],
                "seed": 1,
                "truth": {"draws": 200},
            }
        )
        outcome = run_scenario(config, self.tmp, self.settings, plots=False)
        self.assertEqual([r.method for r in outcome.failed], ["naive", "mie2"])
        self.assertTrue(all("propriety" in r.note for r in outcome.failed))
        self.assertEqual(set(outcome.manifest.failed), {"naive", "mie2"})
        out = self.tmp / "niw_tiny"
        self.assertTrue((out / "results.csv").exists())
        self.assertTrue((out / "manifest.json").exists())

    def test_sweep_survives_improper_grid_point(self):
        """A grid point with improper local posteriors leaves the rest of the sweep intact."""
        config = ScenarioConfig.model_validate(
            {
                "scenario": "niw_grid",
                "model": "mvn_niw",
                "n": 8,
                "d": 2,
                "M": 2,
                "prior": {"kappa": 0.0, "nu": 0.0, "psi_scale": 0.0},
                "data": {"design": "gaussian"},
                "N_per_worker": 50,
                "methods": ["naive"],
                "seed": 1,
                "truth": {"draws": 200},
                "sweep_M": [2, 8],
            }
        )
        outcome = sweep(config, self.tmp, self.settings)
        failed = {r.M for r in outcome.rows if r.metric == "failed"}
        self.assertEqual(failed, {8})
        self.assertTrue(any(r.M == 2 and r.metric == "err_mean" for r in outcome.rows))

    def test_no_methods_writes_manifest_only(self):
        """An empty method list still writes an (empty) table and a manifest."""
        outcome = run_scenario(_beta_config(methods=[]), self.tmp, self.settings)
        self.assertEqual(outcome.rows, [])
        self.assertTrue((self.tmp / "beta_small" / "manifest.json").exists())
        self.assertFalse((self.tmp / "beta_small" / "transcript.jsonl").exists())

    def test_runtime_rows_on_request(self):
        """Runtime rows appear only when requested."""
        outcome = run_scenario(
            _beta_config(methods=["naive"], record_runtime=True), self.tmp, self.settings, plots=False
        )
        self.assertTrue(any(r.metric == "runtime_s" for r in outcome.rows))

    def test_sweep_writes_curves(self):
        """A sweep writes one combined table and a curve per metric."""
        config = _beta_config(methods=["naive", "mie2"], sweep_M=[1, 2], N_per_worker=200)
        outcome = sweep(config, self.tmp, self.settings)
        top = self.tmp / "beta_small"
        self.assertTrue((top / "results.csv").exists())
        self.assertTrue((top / "curve_err_mean.txt").exists())
        self.assertTrue((top / "M2" / "results.csv").exists())
        self.assertEqual({r.M for r in outcome.rows}, {1, 2})

    def test_truth_summary(self):
        """The truth command writes reference draws and their summary."""
        summary = truth_summary(_beta_config(), self.tmp)
        self.assertEqual(summary["N"], 2000)
        self.assertTrue((self.tmp / "beta_small" / "truth_draws.csv").exists())


if __name__ == "__main__":
    unittest.main()
