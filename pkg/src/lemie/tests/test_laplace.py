"""
Unit tests for the Gaussian approximations and the LEMIE estimators.
"""

import os
import sys
import unittest
from unittest.mock import patch

import numpy as np
from scipy import stats

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", ".."))

from lemie.errors import InvalidArgument, LaplaceConstructionError  # noqa: E402
from lemie.federation import Federation, LogLikMatrix  # noqa: E402
from lemie.laplace import (  # noqa: E402
    LaplaceApprox,
    build_laplace,
    laplace_draws,
    laplace_type1,
    laplace_type2,
    laplace_type3,
    lemie_estimate,
    split_local_sets,
    type1_pooled_draws,
)
from lemie.mie import ProposalSet, Scheme, kl_hat_local, mie2_estimate  # noqa: E402
from lemie.model import DrawSource, ParamDraws, SourceKind  # noqa: E402
from lemie.tests.fixtures import ProtocolFixtures, local_sets_from  # noqa: E402


def _gaussian_sets(seed: int = 0):
    rng = np.random.default_rng(seed)
    a = ParamDraws(rng.normal([0.0, 1.0], [1.0, 0.5], size=(4000, 2)), DrawSource.local(0))
    b = ParamDraws(rng.normal([2.0, 1.0], [1.0, 0.5], size=(4000, 2)), DrawSource.local(1))
    return [a, b]


class TestApproximations(unittest.TestCase):
    """Test cases for the three Gaussian constructions."""

    def test_type1_precision_weighting(self):
        """Equal covariances give the average of the part means and half the covariance."""
        approx = laplace_type1(_gaussian_sets())
        np.testing.assert_allclose(approx.mu, [1.0, 1.0], atol=0.05)
        np.testing.assert_allclose(np.diag(approx.Sigma), [0.5, 0.125], rtol=0.1)

    def test_type2_pooled_moments(self):
        """Type 2 uses the mean and covariance of all pooled draws."""
        pooled = ParamDraws.pool(_gaussian_sets())
        approx = laplace_type2(pooled)
        np.testing.assert_allclose(approx.mu, pooled.draws.mean(axis=0))
        np.testing.assert_allclose(approx.Sigma, np.cov(pooled.draws, rowvar=False), rtol=1e-10)

    def test_type3_uses_within_part_scatter(self):
        """Type 3 ignores the spread between part means."""
        pooled = ParamDraws.pool(_gaussian_sets())
        approx = laplace_type3(pooled)
        self.assertLess(approx.Sigma[0, 0], 1.1)
        self.assertGreater(laplace_type2(pooled).Sigma[0, 0], 1.8)

    def test_type3_denominator_must_be_positive(self):
        """Too few draws for the inverse-Wishart regulariser is rejected."""
        pooled = ParamDraws(np.zeros((1, 3)), DrawSource.local(0))
        with self.assertRaises(InvalidArgument):
            laplace_type3(pooled, nu=0.0)

    def test_diagonal_fallback(self):
        """An indefinite covariance falls back to its diagonal and is flagged."""
        approx = LaplaceApprox.from_moments(2, np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
        self.assertTrue(approx.fallback_used)
        np.testing.assert_allclose(approx.Sigma, np.eye(2))

    def test_zero_variance_raises(self):
        """A zero-variance coordinate cannot be repaired."""
        with self.assertRaises(LaplaceConstructionError):
            LaplaceApprox.from_moments(2, np.zeros(2), np.array([[1.0, 0.0], [0.0, 0.0]]))

    def test_json_round_trip(self):
        """Approximations serialise to JSON and back."""
        approx = laplace_type1(_gaussian_sets())
        back = LaplaceApprox.from_json(approx.to_json())
        np.testing.assert_allclose(back.Sigma, approx.Sigma)
        self.assertEqual(back.type_tag, 1)

    def test_samples_are_labelled(self):
        """Draws carry the Laplace source and are seeded per type."""
        approx = laplace_type2(ParamDraws.pool(_gaussian_sets()))
        a, b = approx.sample(50, seed=3), approx.sample(50, seed=3)
        np.testing.assert_array_equal(a.draws, b.draws)
        self.assertEqual(a.source, DrawSource.laplace(2))

    def test_pooled_type1_draws(self):
        """Pooled type-1 draws are precision-weighted averages over min N_j rows."""
        sets = _gaussian_sets()
        draws = type1_pooled_draws(sets)
        self.assertEqual(draws.N, 4000)
        self.assertEqual(draws.source.component, -1)
        np.testing.assert_allclose(draws.draws.mean(axis=0), [1.0, 1.0], atol=0.05)

    def test_split_recovers_parts(self):
        """Local sets are recovered from a pooled set in part order."""
        pooled = ParamDraws.pool(list(reversed(_gaussian_sets())))
        parts = split_local_sets(pooled)
        self.assertEqual([p.source.component for p in parts], [0, 1])

    def test_build_rejects_unknown_type(self):
        """Only types 1, 2 and 3 exist."""
        with self.assertRaises(InvalidArgument):
            build_laplace(ParamDraws.pool(_gaussian_sets()), [4])

    def test_zero_count_gives_no_draws(self):
        """A zero draw count leaves the proposal set untouched."""
        approx = build_laplace(ParamDraws.pool(_gaussian_sets()), [1, 2])
        self.assertEqual(laplace_draws(approx, 0), [])


class TestLemie(unittest.TestCase):
    """Test cases for the LEMIE estimators on a Gaussian problem."""

    @classmethod
    def setUpClass(cls):
        cls.model, cls.parts, cls.Sigma, cls.main = ProtocolFixtures.gaussian_round(M=4, N=300)
        cls.laplace = build_laplace(cls.main.pooled, [1, 2, 3])
        extra = laplace_draws(cls.laplace, 300, seed=2)
        federation = Federation(cls.model, cls.parts, ProtocolFixtures.settings())
        cls.extended = federation.extend_with_proposal_draws(cls.main.pooled, cls.main.loglik, extra)
        X = np.vstack([p.columns_matching("x_") for p in cls.parts.parts])
        cls.truth_mean = X.mean(axis=0)

    def test_lemie_variants_recover_mean(self):
        """LEMIE1-3 recover the flat-prior posterior mean."""
        for variant in (1, 2, 3):
            est = lemie_estimate(variant, self.extended.pooled, self.extended.loglik, self.model, self.laplace, seed=1)
            self.assertIs(est.weights.scheme, Scheme(f"lemie{variant}"))
            np.testing.assert_allclose(est.value, self.truth_mean, atol=0.1)

    def test_laplace_components_in_mixture(self):
        """The mixture includes every Laplace type that contributed draws."""
        est = lemie_estimate(2, self.extended.pooled, self.extended.loglik, self.model, self.laplace)
        self.assertEqual(set(est.weights.component_weights), {0, 1, 2, 3, -1, -2, -3})

    def test_type1_kl_is_small(self):
        """The type-1 approximation is close to the Gaussian posterior."""
        ps = ProposalSet.build(self.extended.pooled, self.extended.loglik, self.model, self.laplace)
        self.assertLess(kl_hat_local(ps, -1), 0.1)
        self.assertGreater(kl_hat_local(ps, 0), kl_hat_local(ps, -1))

    def test_missing_approximation_rejected(self):
        """Laplace draws without their approximation cannot be weighted."""
        with self.assertRaises(InvalidArgument):
            ProposalSet.build(self.extended.pooled, self.extended.loglik, self.model, {1: self.laplace[1]})

    def test_unknown_variant(self):
        """Variants other than 1-3 are rejected."""
        with self.assertRaises(InvalidArgument):
            lemie_estimate(4, self.extended.pooled, self.extended.loglik, self.model, self.laplace)

    def test_zero_laplace_draws_reduce_to_mie(self):
        """Without Laplace draws LEMIE2 equals MIE2."""
        est = lemie_estimate(2, self.main.pooled, self.main.loglik, self.model, self.laplace)
        plain = mie2_estimate(ProposalSet.build(self.main.pooled, self.main.loglik, self.model))
        np.testing.assert_allclose(est.value, plain.value, atol=1e-12)
        self.assertIs(est.weights.scheme, Scheme.MIE2)

    def test_local_sets_helper(self):
        """Local sets recovered from the round have one entry per part."""
        self.assertEqual(len(local_sets_from(self.main)), 4)


class TestLaplaceKL(unittest.TestCase):
    """Test cases for KL-hat of a Gaussian component under a proper prior."""

    @staticmethod
    def _prior_only_set(scale: float) -> ProposalSet:
        """A N(0, scale^2) component against a N(0, 1) prior with a flat likelihood."""
        approx = LaplaceApprox.from_moments(1, np.zeros(1), np.array([[scale**2]]))
        draws = approx.sample(20_000, seed=5)
        codes = draws.component_codes()
        log_prior = stats.norm.logpdf(draws.draws[:, 0])
        loglik = LogLikMatrix(np.zeros((1, draws.N)), codes)
        return ProposalSet(draws, loglik, log_prior, {1: approx})

    def test_exact_approximation_has_zero_kl(self):
        """A component equal to the posterior has KL-hat near zero."""
        self.assertAlmostEqual(kl_hat_local(self._prior_only_set(1.0), -1), 0.0, delta=0.03)

    def test_wide_approximation_matches_closed_form(self):
        """KL-hat of N(0, 4) against N(0, 1) matches the Gaussian formula."""
        expected = 0.5 * (4.0 - 1.0 - np.log(4.0))
        self.assertAlmostEqual(kl_hat_local(self._prior_only_set(2.0), -1), expected, delta=0.08)


class TestFallbackLogging(unittest.TestCase):
    """Test cases for warnings raised while building approximations."""

    def test_fallback_is_logged(self):
        """Building with a diagonal fallback logs a warning."""
        x = np.arange(10.0)
        flat = ParamDraws(np.column_stack([x, x]), DrawSource(SourceKind.LOCAL, 0))
        Psi = np.array([[1.0, 2.0], [2.0, 1.0]])
        with patch("lemie.laplace.logger") as mock_logger:
            approx = build_laplace(flat, [3], Psi=Psi)
        self.assertTrue(approx[3].fallback_used)
        mock_logger.warning.assert_called_once()


if __name__ == "__main__":
    unittest.main()
