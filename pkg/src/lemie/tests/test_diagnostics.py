"""
Unit tests for weight diagnostics, scores and the weighted KDE.
"""

import os
import sys
import unittest

import numpy as np
from scipy import integrate, stats

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", ".."))

from lemie.diagnostics import (  # noqa: E402
    WeightedKde,
    cross_entropy,
    default_tail_size,
    diagnose,
    ess,
    ess_from_weights,
    fit_gpd_khat,
    kl_divergence,
    marginal,
    silverman_bandwidth,
)
from lemie.errors import InvalidArgument  # noqa: E402
from lemie.mie import ProposalSet, Scheme, WeightedSampleSet, mie2_estimate, uniform_weights  # noqa: E402
from lemie.model import DrawSource, ParamDraws, SourceKind  # noqa: E402
from lemie.tests.fixtures import ProtocolFixtures  # noqa: E402


def _weighted(draws: np.ndarray, weights: np.ndarray) -> WeightedSampleSet:
    w = np.asarray(weights, dtype=float)
    with np.errstate(divide="ignore"):
        lw = np.log(w)
    return WeightedSampleSet(ParamDraws(draws, DrawSource(SourceKind.POOLED)), lw, w / w.sum(), Scheme.MIE2)


class TestEffectiveSampleSize(unittest.TestCase):
    """Test cases for the Kish effective sample size."""

    def test_uniform_weights(self):
        """Equal weights give ESS = N."""
        self.assertAlmostEqual(ess_from_weights(np.full(50, 0.02)), 50.0)

    def test_degenerate_weights(self):
        """A single non-zero weight gives ESS = 1."""
        self.assertAlmostEqual(ess_from_weights(np.array([1.0, 0.0, 0.0])), 1.0)

    def test_unequal_weights(self):
        """Weights (0.5, 0.25, 0.25) give ESS = 8/3."""
        ws = _weighted(np.arange(3.0), [0.5, 0.25, 0.25])
        self.assertAlmostEqual(ess(ws), 8 / 3)

    def test_mie2_ess_matches_stored_weights(self):
        """ESS of MIE2 weights is 1 / sum of squared stored weights."""
        model, result = ProtocolFixtures.beta_round(M=3, N=500, seed=4)
        ws = mie2_estimate(ProposalSet.build(result.pooled, result.loglik, model)).weights
        self.assertAlmostEqual(ess(ws), 1.0 / np.sum(ws.norm_weights**2), delta=1e-12 * ws.N)


class TestParetoShape(unittest.TestCase):
    """Test cases for the generalized Pareto tail fit."""

    def test_default_tail_size(self):
        """The tail is ceil(min(0.2 N, 3 sqrt N))."""
        self.assertEqual(default_tail_size(100), 20)
        self.assertEqual(default_tail_size(10_000), 300)

    def test_heavy_tail_recovered(self):
        """Pareto weights with tail index 1/0.8 give k-hat near 0.8."""
        u = np.random.default_rng(0).random(20_000)
        fit = fit_gpd_khat(-0.8 * np.log(u))
        self.assertTrue(fit.fitted)
        self.assertAlmostEqual(fit.khat, 0.8, delta=0.2)
        self.assertIn("khat>0.5", fit.flags)

    def test_light_tail_is_small(self):
        """Log-normal weights with a small spread have k-hat below 0.5."""
        lw = 0.3 * np.random.default_rng(1).standard_normal(5_000)
        fit = fit_gpd_khat(lw)
        self.assertLess(fit.khat, 0.5)
        self.assertEqual(fit.flags, [])

    def test_offset_invariance(self):
        """Shifting every log-weight leaves k-hat unchanged."""
        lw = np.random.default_rng(2).standard_normal(2_000)
        self.assertAlmostEqual(fit_gpd_khat(lw).khat, fit_gpd_khat(lw + 250.0).khat, places=10)

    def test_explicit_tail_size(self):
        """An explicit tail size is used as given."""
        lw = np.random.default_rng(3).standard_normal(400)
        self.assertEqual(fit_gpd_khat(lw, tail_size=399).tail_count, 399)

    def test_no_fit_cases(self):
        """Too few draws or a constant tail give a no-fit result."""
        self.assertFalse(fit_gpd_khat(np.zeros(10)).fitted)
        constant = fit_gpd_khat(np.zeros(1_000))
        self.assertFalse(constant.fitted)
        self.assertEqual(constant.flags, ["no_fit"])
        self.assertTrue(np.isnan(constant.khat))

    def test_diagnose_report(self):
        """The report carries ESS, k-hat and the scheme name."""
        lw = np.random.default_rng(4).standard_normal(500)
        w = np.exp(lw - lw.max())
        ws = WeightedSampleSet(
            ParamDraws(np.zeros(500), DrawSource(SourceKind.POOLED)), lw, w / w.sum(), Scheme.MIE1
        )
        report = diagnose(ws).as_dict()
        self.assertEqual(report["scheme"], "mie1")
        self.assertEqual(report["N"], 500)
        self.assertLess(report["ess"], 500)


class TestScores(unittest.TestCase):
    """Test cases for cross entropy and KL scores."""

    def setUp(self):
        self.truth = np.random.default_rng(5).standard_normal((4_000, 1))

    def test_cross_entropy_of_truth_is_entropy(self):
        """Scoring the truth density recovers its entropy."""
        score = cross_entropy(self.truth, lambda x: stats.norm.logpdf(x[:, 0]))
        entropy = 0.5 * np.log(2 * np.pi * np.e)
        self.assertLess(abs(score.value - entropy), 4 * score.std_error)

    def test_kl_with_closed_form_entropy(self):
        """KL against a wider normal is positive and near its closed form."""
        score = kl_divergence(
            self.truth, lambda x: stats.norm.logpdf(x[:, 0], scale=2.0), entropy_of_truth=0.5 * np.log(2 * np.pi * np.e)
        )
        expected = np.log(2.0) + 1 / 8 - 0.5
        self.assertAlmostEqual(score.value, expected, delta=0.05)

    def test_kl_of_identical_densities(self):
        """Pointwise log ratios of a density with itself are zero."""
        logpdf = lambda x: stats.norm.logpdf(x[:, 0])  # noqa: E731
        score = kl_divergence(self.truth, logpdf, truth_log_density=logpdf)
        self.assertEqual(score.value, 0.0)

    def test_infinite_score_flagged(self):
        """A zero density at a truth draw gives an infinite score."""
        score = cross_entropy(self.truth, lambda x: np.where(x[:, 0] > 0, 0.0, -np.inf))
        self.assertTrue(score.infinite)
        self.assertEqual(score.value, float("inf"))

    def test_kl_needs_a_reference(self):
        """KL without the truth entropy or density is rejected."""
        with self.assertRaises(InvalidArgument):
            kl_divergence(self.truth, lambda x: x[:, 0])


class TestWeightedKde(unittest.TestCase):
    """Test cases for the Silverman bandwidth and the KDE wrapper."""

    def test_silverman_one_coordinate(self):
        """Standard normal draws get 0.9 n^(-1/5)."""
        draws = ParamDraws(np.random.default_rng(6).standard_normal(10_000), DrawSource(SourceKind.POOLED))
        bw = silverman_bandwidth(uniform_weights(draws))
        self.assertAlmostEqual(float(bw[0]), 0.9 * 10_000 ** (-0.2), delta=0.01)

    def test_kde_integrates_to_one(self):
        """The weighted KDE is a density."""
        draws = np.random.default_rng(7).standard_normal(500)
        kde = WeightedKde(_weighted(draws, np.linspace(1.0, 2.0, 500)))
        grid = np.linspace(-8, 8, 3001)
        self.assertAlmostEqual(float(integrate.trapezoid(kde.density(grid[:, None]), grid)), 1.0, places=3)

    def test_marginal_keeps_weights(self):
        """Marginalising keeps the weights and drops coordinates."""
        ws = _weighted(np.arange(12.0).reshape(4, 3), [1.0, 2.0, 3.0, 4.0])
        sub = marginal(ws, [2])
        self.assertEqual(sub.draws.p, 1)
        np.testing.assert_array_equal(sub.norm_weights, ws.norm_weights)
        kde = WeightedKde(ws, bandwidth=0.5, coordinates=[0, 1])
        self.assertEqual(kde.bandwidth.shape, (2,))

    def test_bandwidth_must_be_positive(self):
        """A non-positive bandwidth is rejected."""
        with self.assertRaises(InvalidArgument):
            WeightedKde(_weighted(np.arange(3.0), [1.0, 1.0, 1.0]), bandwidth=0.0)


if __name__ == "__main__":
    unittest.main()
