"""
Comparison methods for combining local posteriors.

- fractionated priors and their propriety gate
- consensus Monte Carlo (uniform and precision-weighted pooling)
- nonparametric and semiparametric density product estimators, sampled with
  an independent Metropolis-within-Gibbs chain over the mixture indices,
  optionally applied pairwise and recursively
- naive pooling
"""

import asyncio
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidArgument, ProprietyError
from .laplace import type1_pooled_draws
from .linalg import (
    LOG_2PI,
    chol_inverse,
    cholesky,
    covariance_with_fallback,
    mvn_logpdf,
    symmetrize,
)
from .mie import Estimate, Scheme, Statistic, uniform_weights, weighted_average
from .model import DrawSource, ParamDraws, SourceKind, split_niw_theta
from .priors import BetaParams, MvnPrior, NIWParams, PriorFamily
from .rng import as_generator, substream

logger = logging.getLogger(__name__)

Prior = Union[BetaParams, MvnPrior, NIWParams]


# ---------------------------------------------------------------------------
# Fractionated priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FractionatedPrior:
    """A prior raised to the power 1/M, expressed in its own family."""

    family: PriorFamily
    params: Prior
    M: int


def fractionated_nu(nu: float, d: int, M: int) -> float:
    return nu / M - (M - 1) / M * d - (M - 1) / M


def fractionate_prior(prior: Prior, M: int) -> FractionatedPrior:
    if M < 1:
        raise InvalidArgument(f"M must be >= 1, got {M}")
    if isinstance(prior, BetaParams):
        params: Prior = BetaParams((prior.a - 1.0) / M + 1.0, (prior.b - 1.0) / M + 1.0)
        return FractionatedPrior(PriorFamily.BETA, params, M)
    if isinstance(prior, MvnPrior):
        if prior.is_flat:
            return FractionatedPrior(PriorFamily.MVN, prior, M)
        return FractionatedPrior(PriorFamily.MVN, MvnPrior(prior.mu0, prior.Sigma0 * M), M)
    if isinstance(prior, NIWParams):
        if M > 1 and np.any(prior.Psi != 0):
            logger.warning("⚠️  NIW fractionation keeps Psi unchanged; the result is not exact")
        params = NIWParams(prior.mu0, prior.kappa / M, prior.Psi, fractionated_nu(prior.nu, prior.dim, M))
        return FractionatedPrior(PriorFamily.NIW, params, M)
    raise InvalidArgument(f"cannot fractionate a {type(prior).__name__} prior")


def prior_log_kernel(prior: Prior, theta: np.ndarray) -> np.ndarray:
    """Unnormalised log prior density used to check fractionation pointwise.

    For NIW this is the kernel of the covariance marginal,
    ``-(nu + d + 1)/2 log|Sigma| - tr(Psi Sigma^-1)/2``, on the ``vech Sigma``
    part of ``theta``.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if isinstance(prior, BetaParams):
        lam = theta[:, 0]
        return (prior.a - 1.0) * np.log(lam) + (prior.b - 1.0) * np.log1p(-lam)
    if isinstance(prior, MvnPrior):
        if prior.is_flat:
            return np.zeros(theta.shape[0])
        return mvn_logpdf(theta, prior.mu0, cholesky(prior.Sigma0, "prior covariance"))
    if isinstance(prior, NIWParams):
        d = prior.dim
        _, Sigmas = split_niw_theta(theta, d)
        sign, logdet = np.linalg.slogdet(Sigmas)
        safe = np.where((sign > 0)[:, None, None], Sigmas, np.eye(d))
        trace = np.einsum("ij,nji->n", prior.Psi, np.linalg.inv(safe))
        val = -0.5 * (prior.nu + d + 1.0) * logdet - 0.5 * trace
        return np.where(sign > 0, val, -np.inf)
    raise InvalidArgument(f"unsupported prior {type(prior).__name__}")


def check_fractionated_propriety(d: int, n: int, M: int) -> bool:
    """True when evenly split data keeps every fractionated local posterior proper."""
    return n // M > 2 * d


def require_fractionated_propriety(d: int, n: int, M: int) -> None:
    if not check_fractionated_propriety(d, n, M):
        raise ProprietyError(f"floor(n/M) > 2d (n={n}, M={M}, d={d})")


# ---------------------------------------------------------------------------
# Consensus Monte Carlo
# ---------------------------------------------------------------------------


class CmcVariant(str, Enum):
    CMC1 = "cmc1"
    CMC2 = "cmc2"


def _common_length(local_sets: Sequence[ParamDraws]) -> int:
    if not local_sets:
        raise InvalidArgument("no local draw sets")
    if len({s.p for s in local_sets}) != 1:
        raise InvalidArgument("local draw sets differ in dimension")
    n_bar = min(s.N for s in local_sets)
    if any(s.N > n_bar for s in local_sets):
        logger.debug(f"Discarding draws beyond N={n_bar} for consensus pooling")
    return n_bar


def cmc_pool(
    local_sets: Sequence[ParamDraws], variant: Union[CmcVariant, str] = CmcVariant.CMC2
) -> ParamDraws:
    """Combine the h-th draws of every part into one consensus draw."""
    variant = CmcVariant(variant)
    n_bar = _common_length(local_sets)
    if variant is CmcVariant.CMC1:
        stacked = np.mean([s.draws[:n_bar] for s in local_sets], axis=0)
    else:
        stacked = type1_pooled_draws([s.head(n_bar) for s in local_sets]).draws
    return ParamDraws(stacked, DrawSource(SourceKind.POOLED), f"{variant.value}")


def consensus_moments(local_sets: Sequence[ParamDraws]):
    """Per-part normal approximations and their precision-weighted consensus.

    Returns ``(mu_star, Sigma_star, means, chols)``.
    """
    means, chols, precisions = [], [], []
    for j, s in enumerate(local_sets):
        mean = s.draws.mean(axis=0)
        cov = np.atleast_2d(np.cov(s.draws, rowvar=False, ddof=1))
        _, L, _ = covariance_with_fallback(cov, f"part {j} covariance")
        means.append(mean)
        chols.append(L)
        precisions.append(chol_inverse(L))
    Sigma_star = chol_inverse(cholesky(symmetrize(sum(precisions)), "consensus precision"))
    mu_star = Sigma_star @ sum(P @ m for P, m in zip(precisions, means))
    return mu_star, Sigma_star, means, chols


# ---------------------------------------------------------------------------
# Density product estimators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DpeResult:
    draws: ParamDraws
    acceptance_rate: float
    out_of_support: int
    stages: int

    def report(self) -> dict:
        return {
            "acceptance_rate": self.acceptance_rate,
            "out_of_support": self.out_of_support,
            "stages": self.stages,
            "N": self.draws.N,
        }


class _SdpeTerms:
    """Per-run constants of the semiparametric mixture."""

    def __init__(self, local_sets: Sequence[np.ndarray]):
        sets = [ParamDraws(a, DrawSource(SourceKind.POOLED)) for a in local_sets]
        mu_star, Sigma_star, means, chols = consensus_moments(sets)
        self.mu_star = mu_star
        self.eigvals, self.eigvecs = np.linalg.eigh(Sigma_star)
        self.P_star = chol_inverse(cholesky(Sigma_star, "consensus covariance"))
        self.P_mu = self.P_star @ mu_star
        self.log_norm = -0.5 * (len(mu_star) * LOG_2PI + float(np.sum(np.log(self.eigvals))))
        # g[j, h] = log N(theta_{j,h} | mu_j, Sigma_j)
        self.g = np.vstack([mvn_logpdf(a, m, L) for a, m, L in zip(local_sets, means, chols)])

    def log_consensus(self, theta_bar: np.ndarray) -> float:
        diff = theta_bar - self.mu_star
        return self.log_norm - 0.5 * float(diff @ self.P_star @ diff)

    def draw(self, theta_bar: np.ndarray, M: int, kernel_var: float, rng) -> np.ndarray:
        inv_var = M / kernel_var + 1.0 / self.eigvals
        mean = self.eigvecs @ ((self.eigvecs.T @ (M / kernel_var * theta_bar + self.P_mu)) / inv_var)
        z = rng.standard_normal(len(theta_bar))
        return mean + self.eigvecs @ (z / np.sqrt(inv_var))


def _dpe_chain(
    sets: Sequence[np.ndarray],
    iters: int,
    rng: np.random.Generator,
    semiparametric: bool,
    bandwidth_power: float,
) -> Tuple[np.ndarray, int, int]:
    """Run one chain; returns (draws, accepted, proposed)."""
    thetas = np.stack(sets)
    M, n_bar, p = thetas.shape
    terms = _SdpeTerms(sets) if semiparametric else None
    h = rng.integers(n_bar, size=M)
    out = np.empty((iters, p))
    accepted = 0

    def log_weight(S, Q, g_sum, var):
        spread = -(Q - float(S @ S) / M) / (2.0 * var)
        if terms is None:
            return spread
        return spread + terms.log_consensus(S / M) - g_sum

    for i in range(1, iters + 1):
        b = i ** (-1.0 / (p + 4))
        var = b**bandwidth_power if terms is not None else b * b
        current = thetas[np.arange(M), h]
        S = current.sum(axis=0)
        Q = float(np.sum(current * current))
        g_sum = float(terms.g[np.arange(M), h].sum()) if terms is not None else 0.0
        log_w = log_weight(S, Q, g_sum, var)
        proposals = rng.integers(n_bar, size=M)
        log_u = np.log(rng.random(M))
        for j in range(M):
            old, new = thetas[j, h[j]], thetas[j, proposals[j]]
            S_new = S - old + new
            Q_new = Q - float(old @ old) + float(new @ new)
            g_new = g_sum - terms.g[j, h[j]] + terms.g[j, proposals[j]] if terms is not None else 0.0
            log_w_new = log_weight(S_new, Q_new, g_new, var)
            if log_u[j] < log_w_new - log_w:
                h[j] = proposals[j]
                S, Q, g_sum, log_w = S_new, Q_new, g_new, log_w_new
                accepted += 1
        if terms is None:
            out[i - 1] = S / M + b * rng.standard_normal(p)
        else:
            out[i - 1] = terms.draw(S / M, M, var, rng)
    return out, accepted, iters * M


async def _recursive_stages(
    sets: List[np.ndarray],
    iters: int,
    seed: int,
    method: str,
    semiparametric: bool,
    bandwidth_power: float,
):
    stage, accepted, proposed = 0, 0, 0
    while len(sets) > 1:
        pairs = [sets[i : i + 2] for i in range(0, len(sets) - 1, 2)]
        carried = [sets[-1]] if len(sets) % 2 else []
        runs = await asyncio.gather(
            *(
                asyncio.to_thread(
                    _dpe_chain,
                    pair,
                    iters,
                    substream(seed, k, f"{method}_stage{stage}"),
                    semiparametric,
                    bandwidth_power,
                )
                for k, pair in enumerate(pairs)
            )
        )
        for _, a, n in runs:
            accepted += a
            proposed += n
        logger.debug(f"{method} stage {stage}: {len(sets)} -> {len(pairs) + len(carried)} sets")
        sets = [draws for draws, _, _ in runs] + carried
        stage += 1
    return sets[0], accepted, proposed, stage


def _dpe_sample(
    method: str,
    local_sets: Sequence[ParamDraws],
    iters: Optional[int],
    seed: int,
    recursive: bool,
    in_support: Optional[Callable[[np.ndarray], np.ndarray]],
    clamp_bounds: Optional[Tuple[float, float]],
    semiparametric: bool,
    bandwidth_power: float = 1.0,
) -> DpeResult:
    n_bar = _common_length(local_sets)
    iters = iters or n_bar
    sets = [s.draws[:n_bar] for s in local_sets]
    if recursive and len(sets) > 1:
        draws, accepted, proposed, stages = asyncio.run(
            _recursive_stages(sets, iters, seed, method, semiparametric, bandwidth_power)
        )
    else:
        draws, accepted, proposed = _dpe_chain(
            sets, iters, as_generator(seed, method), semiparametric, bandwidth_power
        )
        stages = 1

    out_of_support = 0
    if in_support is not None:
        out_of_support = int(np.sum(~in_support(draws)))
        if out_of_support:
            logger.warning(f"⚠️  {method}: {out_of_support} of {iters} draws outside the support")
    if clamp_bounds is not None:
        lo, hi = clamp_bounds
        eps = 1e-12 * max(1.0, hi - lo)
        draws = np.clip(draws, lo + eps, hi - eps)

    rate = accepted / proposed if proposed else 1.0
    logger.info(f"✅ {method} finished: acceptance rate {rate:.3f} over {stages} stage(s)")
    result = ParamDraws(draws, DrawSource(SourceKind.POOLED), f"seed={seed}/{method}")
    return DpeResult(result, rate, out_of_support, stages)


def ndpe_sample(
    local_sets: Sequence[ParamDraws],
    iters: Optional[int] = None,
    seed: int = 0,
    recursive: bool = False,
    in_support: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    clamp_bounds: Optional[Tuple[float, float]] = None,
) -> DpeResult:
    """Sample the product of per-part Gaussian KDEs (bandwidth ``i^(-1/(p+4))``)."""
    return _dpe_sample("ndpe", local_sets, iters, seed, recursive, in_support, clamp_bounds, False)


def sdpe_sample(
    local_sets: Sequence[ParamDraws],
    iters: Optional[int] = None,
    seed: int = 0,
    recursive: bool = False,
    in_support: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    clamp_bounds: Optional[Tuple[float, float]] = None,
    bandwidth_power: float = 1.0,
) -> DpeResult:
    """Semiparametric variant: KDEs of each part's correction to its normal fit.

    The kernel variance is ``b ** bandwidth_power``.
    """
    return _dpe_sample(
        "sdpe", local_sets, iters, seed, recursive, in_support, clamp_bounds, True, bandwidth_power
    )


# ---------------------------------------------------------------------------
# Naive pooling
# ---------------------------------------------------------------------------


def naive_estimate(pooled: ParamDraws, f: Optional[Statistic] = None) -> Estimate:
    """Unweighted average over every pooled local draw."""
    ws = uniform_weights(pooled, Scheme.NAIVE)
    return Estimate(weighted_average(ws, f), ws)
