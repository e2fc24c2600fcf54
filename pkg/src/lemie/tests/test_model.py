"""
Unit tests for the model abstraction, draw containers and partitioning.
"""

import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", ".."))

from lemie.errors import ContractViolation, InvalidArgument  # noqa: E402
from lemie.linalg import unvech, vech  # noqa: E402
from lemie.model import (  # noqa: E402
    DrawSource,
    ParamDraws,
    beta_bernoulli_model,
    log_unnorm_posterior,
    logistic_model,
    mvn_known_sigma_model,
    mvn_niw_model,
    observations,
    partition_data,
    with_prior,
)
from lemie.priors import BetaParams, MvnPrior, NIWParams  # noqa: E402
from lemie.tests.fixtures import DataFixtures  # noqa: E402


class TestPartitioning(unittest.TestCase):
    """Test cases for partition_data."""

    def test_random_partition_covers_every_row_once(self):
        """Random parts are disjoint, cover all rows and differ in size by at most one."""
        block = DataFixtures.bernoulli(n=103)
        parts = partition_data(block, 10, "random", seed=4)
        rows = np.concatenate([p.row_indices for p in parts.parts])
        self.assertEqual(sorted(rows.tolist()), list(range(103)))
        sizes = parts.part_sizes
        self.assertLessEqual(max(sizes) - min(sizes), 1)

    def test_block_partition_keeps_order(self):
        """Block partitioning slices contiguous runs of rows."""
        block = DataFixtures.bernoulli(n=12)
        parts = partition_data(block, 3, "block")
        self.assertEqual(parts.parts[1].row_indices.tolist(), [4, 5, 6, 7])

    def test_by_label_parts_are_homogeneous(self):
        """Each by-label part holds a single label value."""
        block = DataFixtures.bernoulli(n=100, successes=50)
        parts = partition_data(block, 4, "by_label", seed=0, label_column="x")
        for part in parts.parts:
            self.assertEqual(len(np.unique(part.column("x"))), 1)
        self.assertEqual(parts.n, 100)

    def test_too_many_parts_rejected(self):
        """M larger than n is an invalid argument."""
        with self.assertRaises(InvalidArgument):
            partition_data(DataFixtures.bernoulli(n=5, successes=1), 6)

    def test_partition_is_seeded(self):
        """The same seed reproduces the same split."""
        block = DataFixtures.bernoulli()
        a = partition_data(block, 5, "random", seed=9).manifest()
        b = partition_data(block, 5, "random", seed=9).manifest()
        self.assertEqual(a, b)

    def test_merged_restores_original_order(self):
        """Merging the parts gives back the original block."""
        block = DataFixtures.bernoulli(n=40)
        parts = partition_data(block, 3, "random", seed=2)
        np.testing.assert_array_equal(parts.merged().values, block.values)


class TestParamDraws(unittest.TestCase):
    """Test cases for ParamDraws."""

    def test_pool_records_origins(self):
        """Pooling keeps one component code per row."""
        a = ParamDraws(np.zeros((3, 2)), DrawSource.local(0))
        b = ParamDraws(np.ones((2, 2)), DrawSource.laplace(2))
        pooled = ParamDraws.pool([a, b])
        self.assertEqual(pooled.N, 5)
        self.assertEqual(pooled.origins.tolist(), [0, 0, 0, -2, -2])

    def test_non_finite_draws_rejected(self):
        """NaN coordinates break the draw contract."""
        with self.assertRaises(ContractViolation):
            ParamDraws(np.array([[0.1], [np.nan]]), DrawSource.local(0))

    def test_pool_dimension_mismatch(self):
        """Draw sets of different dimensions cannot be pooled."""
        a = ParamDraws(np.zeros((3, 2)), DrawSource.local(0))
        b = ParamDraws(np.zeros((3, 1)), DrawSource.local(1))
        with self.assertRaises(InvalidArgument):
            ParamDraws.pool([a, b])

    def test_source_labels_round_trip(self):
        """Source labels parse back to the same source."""
        for source in (DrawSource.local(3), DrawSource.laplace(1)):
            self.assertEqual(DrawSource.parse(source.label), source)

    def test_draws_are_read_only(self):
        """The draw matrix cannot be modified in place."""
        draws = ParamDraws(np.zeros((2, 1)), DrawSource.local(0))
        with self.assertRaises(ValueError):
            draws.draws[0, 0] = 1.0


class TestModels(unittest.TestCase):
    """Test cases for the model factories."""

    def test_beta_bernoulli_support(self):
        """Log-likelihood and prior are -inf outside (0, 1)."""
        model = beta_bernoulli_model(BetaParams(2.0, 3.0))
        block = DataFixtures.bernoulli(n=10, successes=3)
        theta = np.array([[-0.1], [0.0], [0.3], [1.0]])
        ll = model.block_log_lik(block, theta)
        self.assertTrue(np.isneginf(ll[[0, 1, 3]]).all())
        self.assertAlmostEqual(ll[2], 3 * np.log(0.3) + 7 * np.log(0.7))
        self.assertTrue(np.isneginf(model.log_prior(theta[:1]))[0])

    def test_log_unnorm_posterior_adds_prior(self):
        """Unnormalised posterior is likelihood plus prior, -inf off support."""
        model = beta_bernoulli_model(BetaParams(2.0, 1.0))
        out = log_unnorm_posterior(model, np.array([-1.0, -1.0]), np.array([[0.5], [1.5]]))
        self.assertAlmostEqual(out[0], -1.0 + np.log(0.5))
        self.assertTrue(np.isneginf(out[1]))

    def test_gaussian_likelihood_matches_direct_sum(self):
        """Known-covariance likelihood equals the sum of row log-densities."""
        block, Sigma = DataFixtures.gaussian(n=20)
        model = mvn_known_sigma_model(Sigma)
        theta = np.array([[1.0, 2.0], [0.5, 1.5]])
        X = block.columns_matching("x_")
        from scipy import stats

        expected = [stats.multivariate_normal(t, Sigma).logpdf(X).sum() for t in theta]
        np.testing.assert_allclose(model.block_log_lik(block, theta), expected, rtol=1e-10)

    def test_niw_non_pd_sigma_is_outside_support(self):
        """A covariance that is not positive definite has log-density -inf."""
        model = mvn_niw_model(NIWParams.uninformative(2))
        good = np.concatenate([[0.0, 0.0], vech(np.eye(2))])
        bad = np.concatenate([[0.0, 0.0], vech(np.array([[1.0, 2.0], [2.0, 1.0]]))])
        theta = np.vstack([good, bad])
        block, _ = DataFixtures.gaussian(n=5)
        ll = model.block_log_lik(block, theta)
        self.assertTrue(np.isfinite(ll[0]))
        self.assertTrue(np.isneginf(ll[1]))
        self.assertTrue(np.isneginf(model.log_prior(theta)[1]))

    def test_vech_round_trip(self):
        """vech followed by unvech restores a symmetric matrix."""
        S = np.array([[2.0, 0.3, 0.1], [0.3, 1.0, -0.2], [0.1, -0.2, 0.5]])
        np.testing.assert_array_equal(unvech(vech(S), 3), S)

    def test_logistic_needs_proper_prior(self):
        """A flat prior is rejected for logistic regression."""
        with self.assertRaises(InvalidArgument):
            logistic_model(MvnPrior.flat(2))

    def test_logistic_grouped_equals_ungrouped(self):
        """Grouped rows give the ungrouped likelihood up to the binomial constant."""
        model = logistic_model(MvnPrior.isotropic(2, 2.5))
        rows = observations(
            ["x_0", "x_1", "c", "y"],
            np.array([[1.0, 0.0, 1.0, 1.0], [1.0, 0.0, 1.0, 0.0], [1.0, 1.0, 1.0, 1.0]]),
        )
        grouped = observations(
            ["x_0", "x_1", "c", "y"], np.array([[1.0, 0.0, 2.0, 1.0], [1.0, 1.0, 1.0, 1.0]])
        )
        theta = np.array([[0.2, -0.4]])
        diff = model.block_log_lik(grouped, theta) - model.block_log_lik(rows, theta)
        self.assertAlmostEqual(float(diff[0]), np.log(2.0))

    def test_with_prior_checks_family(self):
        """Swapping in a prior of another family is rejected."""
        model = beta_bernoulli_model()
        self.assertEqual(with_prior(model, BetaParams(0.5, 0.5)).prior, BetaParams(0.5, 0.5))
        with self.assertRaises(InvalidArgument):
            with_prior(model, MvnPrior.flat(1))

    def test_wrong_dimension_rejected(self):
        """Parameter vectors of the wrong dimension are rejected."""
        block, Sigma = DataFixtures.gaussian(n=5)
        with self.assertRaises(InvalidArgument):
            mvn_known_sigma_model(Sigma).block_log_lik(block, np.zeros((2, 3)))


if __name__ == "__main__":
    unittest.main()
