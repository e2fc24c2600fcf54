"""
Local-posterior samplers.

Supports:
- Conjugate Beta posteriors for Bernoulli data
- Conjugate MVN posteriors for Gaussian data with known covariance
- Conjugate normal-inverse-Wishart posteriors (Bartlett-decomposition draws)
- Polya-Gamma Gibbs sampling for binomial logistic regression

Every sampler is a pure function of its inputs and its seed (or generator).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy import linalg

from .errors import InvalidArgument, ProprietyError
from .linalg import cholesky, cholesky_or_none, vech
from .model import DrawSource, ModelSpec, ObservationBlock, ParamDraws, SourceKind
from .polya_gamma import polya_gamma_draw, polya_gamma_sums
from .priors import BetaParams, MvnPrior, NIWParams
from .rng import SeedLike, as_generator, seed_trace

logger = logging.getLogger(__name__)

__all__ = [
    "BetaParams",
    "NIWParams",
    "PolyaGammaState",
    "sample_beta_posterior",
    "sample_mvn_known_sigma_posterior",
    "sample_niw_posterior",
    "polya_gamma_draw",
    "logistic_gibbs",
    "sample_local_posterior",
]


def _source(part_id: Optional[int], truth: bool = False) -> DrawSource:
    if truth or part_id is None:
        return DrawSource(SourceKind.TRUTH)
    return DrawSource.local(part_id)


def _check_N(N: int) -> None:
    if N < 1:
        raise InvalidArgument(f"number of draws must be positive, got {N}")


def sample_beta_posterior(
    prior: BetaParams,
    successes: int,
    trials: int,
    N: int,
    seed: SeedLike = None,
    part_id: Optional[int] = None,
) -> ParamDraws:
    """N iid draws from Beta(a + s, b + n - s)."""
    if not 0 <= successes <= trials:
        raise InvalidArgument(f"need 0 <= successes <= trials, got {successes}/{trials}")
    _check_N(N)
    rng = as_generator(seed, "beta_posterior")
    draws = rng.beta(prior.a + successes, prior.b + trials - successes, size=N)
    return ParamDraws(draws[:, None], _source(part_id), seed_trace(seed, part_id, "beta"))


def _rows(data_part: Union[ObservationBlock, np.ndarray], d: int) -> np.ndarray:
    if isinstance(data_part, ObservationBlock):
        X = data_part.columns_matching("x_")
    else:
        X = np.asarray(data_part, dtype=float).reshape(-1, d)
    if X.shape[1] != d:
        raise InvalidArgument(f"data has {X.shape[1]} columns, expected {d}")
    return X


def mvn_known_sigma_posterior(
    prior: MvnPrior, Sigma_known: np.ndarray, X: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance of a Gaussian mean with known covariance."""
    Sigma_known = np.atleast_2d(np.asarray(Sigma_known, dtype=float))
    L = cholesky(Sigma_known, "known covariance")
    n = X.shape[0]
    if prior.is_flat:
        if n == 0:
            raise ProprietyError("at least one observation under a flat prior")
        return X.mean(axis=0), Sigma_known / n
    Sinv = linalg.cho_solve((L, True), np.eye(L.shape[0]))
    P0 = np.linalg.inv(prior.Sigma0)
    precision = P0 + n * Sinv
    rhs = P0 @ prior.mu0 + (Sinv @ X.sum(axis=0) if n else 0.0)
    cov = np.linalg.inv(precision)
    return cov @ rhs, 0.5 * (cov + cov.T)


def sample_mvn_known_sigma_posterior(
    prior: MvnPrior,
    Sigma_known: np.ndarray,
    data_part: Union[ObservationBlock, np.ndarray],
    N: int,
    seed: SeedLike = None,
    part_id: Optional[int] = None,
) -> ParamDraws:
    """Exact conjugate draws of the mean; flat prior gives N(xbar, Sigma / n)."""
    _check_N(N)
    X = _rows(data_part, prior.dim)
    mean, cov = mvn_known_sigma_posterior(prior, Sigma_known, X)
    rng = as_generator(seed, "mvn_posterior")
    L = cholesky(cov, "posterior covariance")
    draws = mean + rng.standard_normal((N, prior.dim)) @ L.T
    return ParamDraws(draws, _source(part_id), seed_trace(seed, part_id, "mvn"))


def niw_posterior(prior: NIWParams, X: np.ndarray) -> NIWParams:
    """Conjugate update of NIW hyperparameters; raises if the result is improper."""
    d = prior.dim
    n = X.shape[0]
    xbar = X.mean(axis=0) if n else np.zeros(d)
    centred = X - xbar
    S = centred.T @ centred
    kappa_n = prior.kappa + n
    nu_n = prior.nu + n
    if nu_n <= d - 1:
        raise ProprietyError(f"n_part + nu > d - 1 ({n} + {prior.nu:g} <= {d - 1})")
    if kappa_n <= 0:
        raise ProprietyError("kappa + n_part > 0")
    mu_n = (prior.kappa * prior.mu0 + n * xbar) / kappa_n
    diff = (xbar - prior.mu0)[:, None]
    Psi_n = prior.Psi + S + (prior.kappa * n / kappa_n) * (diff @ diff.T)
    Psi_n = 0.5 * (Psi_n + Psi_n.T)
    if cholesky_or_none(Psi_n) is None:
        raise ProprietyError("a positive definite posterior scale matrix Psi_n")
    return NIWParams(mu0=mu_n, kappa=kappa_n, Psi=Psi_n, nu=nu_n)


def sample_inverse_wishart(
    Psi: np.ndarray, nu: float, N: int, rng: np.random.Generator
) -> np.ndarray:
    """``N`` draws of IW(Psi, nu) as an ``(N, d, d)`` stack.

    With ``W = A A^T`` the Bartlett factorisation of a Wishart(I, nu) draw and
    ``Psi = U U^T``, the draw is ``B^T B`` where ``B = A^{-1} U^T`` is found by
    forward substitution.
    """
    d = Psi.shape[0]
    U = cholesky(Psi, "inverse-Wishart scale")
    A = np.zeros((N, d, d))
    rows, cols = np.tril_indices(d, -1)
    A[:, rows, cols] = rng.standard_normal((N, rows.size))
    diag = np.arange(d)
    A[:, diag, diag] = np.sqrt(rng.chisquare(nu - diag, size=(N, d)))

    Ut = U.T
    B = np.zeros((N, d, d))
    for i in range(d):
        acc = Ut[i][None, :] - np.einsum("nk,nkj->nj", A[:, i, :i], B[:, :i, :])
        B[:, i, :] = acc / A[:, i, i][:, None]
    Sigma = np.einsum("nki,nkj->nij", B, B)
    return 0.5 * (Sigma + np.swapaxes(Sigma, 1, 2))


def sample_niw_posterior(
    prior: NIWParams,
    data_part: Union[ObservationBlock, np.ndarray],
    N: int,
    seed: SeedLike = None,
    part_id: Optional[int] = None,
    truth: bool = False,
) -> ParamDraws:
    """Exact draws of ``(mu, vech Sigma)``: Sigma ~ IW, then mu | Sigma ~ MVN."""
    _check_N(N)
    post = niw_posterior(prior, _rows(data_part, prior.dim))
    rng = as_generator(seed, "niw_posterior")
    Sigmas = sample_inverse_wishart(post.Psi, post.nu, N, rng)
    L = np.linalg.cholesky(Sigmas)
    z = rng.standard_normal((N, prior.dim))
    mu = post.mu0 + np.einsum("nij,nj->ni", L, z) / np.sqrt(post.kappa)
    draws = np.hstack([mu, vech(Sigmas)])
    return ParamDraws(draws, _source(part_id, truth), seed_trace(seed, part_id, "niw"))


# ---------------------------------------------------------------------------
# Polya-Gamma Gibbs sampler
# ---------------------------------------------------------------------------


@dataclass
class PolyaGammaState:
    omega: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        if np.any(self.omega <= 0):
            raise InvalidArgument("Polya-Gamma auxiliaries must be positive")


def _logistic_arrays(data: ObservationBlock):
    X = data.columns_matching("x_")
    c = data.column("c")
    y = data.column("y")
    if np.any(y > c) or np.any(y < 0):
        raise InvalidArgument("logistic data needs 0 <= y_i <= c_i")
    if not np.allclose(c, np.round(c)) or np.any(c < 1):
        raise InvalidArgument("trial counts c_i must be positive integers")
    return X, np.round(c).astype(np.int64), y


def _gibbs_sweep(
    state: PolyaGammaState,
    X: np.ndarray,
    counts: np.ndarray,
    rhs: np.ndarray,
    B_inv: np.ndarray,
    rng: np.random.Generator,
) -> PolyaGammaState:
    omega = polya_gamma_sums(counts, X @ state.theta, rng)
    precision = X.T @ (omega[:, None] * X) + B_inv
    L = cholesky(precision, "Gibbs precision X^T Omega X + B^-1")
    mean = linalg.cho_solve((L, True), rhs)
    z = rng.standard_normal(mean.shape[0])
    theta = mean + linalg.solve_triangular(L.T, z, lower=False)
    return PolyaGammaState(omega=omega, theta=theta)


def logistic_gibbs(
    data: ObservationBlock,
    prior: MvnPrior,
    iters: int,
    burnin: Optional[int] = None,
    seed: SeedLike = None,
    init: Optional[np.ndarray] = None,
    part_id: Optional[int] = None,
    truth: bool = False,
) -> ParamDraws:
    """Polya-Gamma Gibbs chain for binomial logistic regression.

    Alternates ``omega_i ~ PG(c_i, x_i^T theta)`` and
    ``theta ~ N(V (X^T kappa + B^-1 b), V)`` with ``V = (X^T Omega X + B^-1)^-1``
    and ``kappa_i = y_i - c_i / 2``. Returns the ``iters - burnin`` retained
    draws; burn-in defaults to half the chain. A non-PD precision aborts the
    chain with ``DecompositionError``.
    """
    if prior.is_flat:
        raise InvalidArgument("logistic_gibbs needs a proper Gaussian prior")
    burnin = iters // 2 if burnin is None else burnin
    if not 0 <= burnin < iters:
        raise InvalidArgument(f"need 0 <= burnin < iters, got {burnin} and {iters}")
    X, counts, y = _logistic_arrays(data)
    p = prior.dim
    B_chol = cholesky(prior.Sigma0, "prior covariance B")
    B_inv = linalg.cho_solve((B_chol, True), np.eye(p))
    rhs = X.T @ (y - 0.5 * counts) + B_inv @ prior.mu0

    rng = as_generator(seed, "logistic_gibbs")
    theta0 = np.zeros(p) if init is None else np.array(init, dtype=float)
    state = PolyaGammaState(omega=np.full(X.shape[0], 0.25), theta=theta0)
    kept = np.empty((iters - burnin, p))
    for it in range(iters):
        state = _gibbs_sweep(state, X, counts, rhs, B_inv, rng)
        if it >= burnin:
            kept[it - burnin] = state.theta
    logger.debug(f"Gibbs chain finished: {iters} sweeps, {iters - burnin} kept")
    return ParamDraws(kept, _source(part_id, truth), seed_trace(seed, part_id, "gibbs"))


def sample_local_posterior(
    model: ModelSpec,
    block: ObservationBlock,
    N: int,
    seed: SeedLike,
    part_id: Optional[int] = None,
    burnin_fraction: float = 0.5,
    Sigma_known: Optional[np.ndarray] = None,
    truth: bool = False,
) -> ParamDraws:
    """Draw N local-posterior samples with the sampler matching ``model``."""
    prior = model.prior
    if isinstance(prior, BetaParams):
        x = block.column("x")
        draws = sample_beta_posterior(prior, int(x.sum()), x.size, N, seed, part_id)
    elif isinstance(prior, NIWParams):
        return sample_niw_posterior(prior, block, N, seed, part_id, truth)
    elif model.name == "logistic" and isinstance(prior, MvnPrior):
        iters = int(round(N / (1.0 - burnin_fraction)))
        return logistic_gibbs(
            block, prior, iters, iters - N, seed, part_id=part_id, truth=truth
        )
    elif isinstance(prior, MvnPrior):
        if Sigma_known is None:
            raise InvalidArgument("mvn_known_sigma sampling needs Sigma_known")
        draws = sample_mvn_known_sigma_posterior(
            prior, Sigma_known, block, N, seed, part_id
        )
    else:
        raise InvalidArgument(f"no sampler for model {model.name}")
    return ParamDraws(draws.draws, _source(part_id, truth), draws.seed_trace)
