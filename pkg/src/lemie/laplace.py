"""
Moment-based Gaussian approximations built from local-posterior draws.

Three constructions are available:
- type 1: precision-weighted combination of the per-part means and covariances
- type 2: mean and covariance of all pooled draws
- type 3: per-part centred scatter regularised by an inverse-Wishart prior

Draws from these approximations are added to the proposal set as extra
mixture components and scored by the LEMIE estimators.
"""

import json
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from .errors import InvalidArgument
from .federation import LogLikMatrix
from .linalg import (
    chol_inverse,
    cholesky,
    covariance_with_fallback,
    mvn_entropy,
    mvn_logpdf,
    precision_with_fallback,
    symmetrize,
)
from .mie import Estimate, ProposalSet, Statistic, mie1_estimate, mie2_estimate, mie3_estimate
from .model import DrawSource, ModelSpec, ParamDraws
from .rng import SeedLike, as_generator, seed_trace

logger = logging.getLogger(__name__)

LAPLACE_TYPES = (1, 2, 3)
DEFAULT_COUNT = 1_000


class LaplaceRecord(BaseModel):
    """JSON form of a :class:`LaplaceApprox`."""

    model_config = ConfigDict(extra="forbid")

    type: int
    mu: List[float]
    Sigma: List[List[float]]
    fallback: bool = False


@dataclass(frozen=True)
class LaplaceApprox:
    type_tag: int
    mu: np.ndarray
    Sigma: np.ndarray
    chol: np.ndarray
    fallback_used: bool = False

    def __post_init__(self):
        if self.type_tag not in LAPLACE_TYPES:
            raise InvalidArgument(f"Laplace type must be one of {LAPLACE_TYPES}, got {self.type_tag}")
        for name in ("mu", "Sigma", "chol"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def from_moments(
        cls, type_tag: int, mu: np.ndarray, Sigma: np.ndarray, fallback_used: bool = False
    ) -> "LaplaceApprox":
        Sigma, chol, fallback = covariance_with_fallback(Sigma, f"type-{type_tag} covariance")
        return cls(type_tag, np.asarray(mu, dtype=float), Sigma, chol, fallback_used or fallback)

    @property
    def p(self) -> int:
        return int(self.mu.shape[0])

    def log_pdf(self, theta: np.ndarray) -> np.ndarray:
        """Normalised MVN log-density at each row of ``theta``."""
        return mvn_logpdf(np.asarray(theta, dtype=float).reshape(-1, self.p), self.mu, self.chol)

    def entropy(self) -> float:
        return mvn_entropy(self.chol)

    def sample(self, N: int, seed: SeedLike = None) -> ParamDraws:
        if N < 1:
            raise InvalidArgument(f"N must be >= 1, got {N}")
        purpose = f"laplace_type{self.type_tag}"
        rng = as_generator(seed, purpose)
        z = rng.standard_normal((N, self.p))
        return ParamDraws(
            self.mu + z @ self.chol.T,
            DrawSource.laplace(self.type_tag),
            seed_trace(seed, None, purpose),
        )

    def to_record(self) -> LaplaceRecord:
        return LaplaceRecord(
            type=self.type_tag,
            mu=self.mu.tolist(),
            Sigma=self.Sigma.tolist(),
            fallback=self.fallback_used,
        )

    def to_json(self) -> str:
        return self.to_record().model_dump_json()

    @classmethod
    def from_json(cls, text: str) -> "LaplaceApprox":
        record = LaplaceRecord.model_validate(json.loads(text))
        Sigma = np.asarray(record.Sigma, dtype=float)
        return cls(record.type, np.asarray(record.mu), Sigma, cholesky(Sigma), record.fallback)


def _moments(draws: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return draws.mean(axis=0), np.atleast_2d(np.cov(draws, rowvar=False, ddof=1))


def _require_draws(sets: Sequence[ParamDraws]) -> int:
    if not sets:
        raise InvalidArgument("no local draw sets")
    p = sets[0].p
    short = [j for j, s in enumerate(sets) if s.N < p + 1]
    if short:
        raise InvalidArgument(f"parts {short} have fewer than p + 1 = {p + 1} draws")
    return p


def split_local_sets(pooled: ParamDraws) -> List[ParamDraws]:
    """Recover the per-part draw sets from a pooled set, in part order."""
    codes = pooled.component_codes()
    parts = sorted(int(c) for c in np.unique(codes) if c >= 0)
    return [
        ParamDraws(pooled.draws[codes == j], DrawSource.local(j), pooled.seed_trace)
        for j in parts
    ]


def _type1_parts(local_sets: Sequence[ParamDraws]):
    precisions, means, fallback = [], [], False
    for j, draws in enumerate(local_sets):
        mean, cov = _moments(draws.draws)
        P, used = precision_with_fallback(cov, f"part {j} covariance")
        precisions.append(P)
        means.append(mean)
        fallback = fallback or used
    Sigma = chol_inverse(cholesky(symmetrize(sum(precisions)), "combined precision"))
    mu = Sigma @ sum(P @ m for P, m in zip(precisions, means))
    return Sigma, mu, precisions, fallback


def laplace_type1(local_sets: Sequence[ParamDraws]) -> LaplaceApprox:
    """Combine per-part Gaussian fits by adding their precisions."""
    _require_draws(local_sets)
    Sigma, mu, _, fallback = _type1_parts(local_sets)
    return LaplaceApprox.from_moments(1, mu, Sigma, fallback)


def type1_pooled_draws(local_sets: Sequence[ParamDraws]) -> ParamDraws:
    """Precision-weighted averages of the h-th draws of every part, h up to min N_j."""
    _require_draws(local_sets)
    Sigma, _, precisions, _ = _type1_parts(local_sets)
    n_bar = min(s.N for s in local_sets)
    total = sum(s.draws[:n_bar] @ P.T for s, P in zip(local_sets, precisions))
    return ParamDraws(total @ Sigma.T, DrawSource.laplace(1), "type1_pooled")


def laplace_type2(pooled: ParamDraws) -> LaplaceApprox:
    """Mean and covariance of every pooled draw."""
    _require_draws([pooled])
    mu, Sigma = _moments(pooled.draws)
    return LaplaceApprox.from_moments(2, mu, Sigma)


def laplace_type3(
    pooled: ParamDraws, Psi: Optional[np.ndarray] = None, nu: Optional[float] = None
) -> LaplaceApprox:
    """Pooled mean with the per-part centred scatter shrunk towards ``Psi``.

    Defaults are ``Psi = I`` and ``nu = p + 2``.
    """
    p = pooled.p
    Psi = np.eye(p) if Psi is None else np.atleast_2d(np.asarray(Psi, dtype=float))
    nu = float(p + 2) if nu is None else float(nu)
    if Psi.shape != (p, p):
        raise InvalidArgument(f"Psi must be {p}x{p}, got {Psi.shape}")
    denominator = pooled.N + nu - p - 1
    if denominator <= 0:
        raise InvalidArgument(f"N + nu - p - 1 must be positive, got {denominator}")
    codes = pooled.component_codes() if pooled.origins is not None else np.zeros(pooled.N)
    scatter = np.zeros((p, p))
    for code in np.unique(codes):
        block = pooled.draws[codes == code]
        centred = block - block.mean(axis=0)
        scatter += centred.T @ centred
    return LaplaceApprox.from_moments(3, pooled.draws.mean(axis=0), (scatter + Psi) / denominator)


def build_laplace(
    pooled: ParamDraws,
    types: Iterable[int] = LAPLACE_TYPES,
    Psi: Optional[np.ndarray] = None,
    nu: Optional[float] = None,
) -> Dict[int, LaplaceApprox]:
    """Construct the requested approximations from the pooled local draws."""
    local_sets = split_local_sets(pooled)
    local_pooled = ParamDraws.pool(local_sets)
    builders = {
        1: lambda: laplace_type1(local_sets),
        2: lambda: laplace_type2(local_pooled),
        3: lambda: laplace_type3(local_pooled, Psi, nu),
    }
    out = {}
    for t in sorted(set(types)):
        if t not in builders:
            raise InvalidArgument(f"unknown Laplace type {t}")
        out[t] = builders[t]()
        if out[t].fallback_used:
            logger.warning(f"⚠️  Laplace type {t} built with the diagonal fallback")
    return out


def laplace_draws(
    approximations: Mapping[int, LaplaceApprox],
    count: int = DEFAULT_COUNT,
    seed: int = 0,
    pooled: Optional[ParamDraws] = None,
    pool_type1: bool = False,
) -> List[ParamDraws]:
    """``count`` draws per approximation, each type on its own substream.

    With ``pool_type1`` the type-1 block is the precision-weighted averages of
    the local draws instead of fresh Gaussian draws.
    """
    if count == 0:
        return []
    out = []
    for t, approx in sorted(approximations.items()):
        if t == 1 and pool_type1:
            if pooled is None:
                raise InvalidArgument("pooling type-1 draws needs the local draws")
            out.append(type1_pooled_draws(split_local_sets(pooled)).head(count))
        else:
            out.append(approx.sample(count, seed))
    return out


def lemie_estimate(
    variant: int,
    pooled: ParamDraws,
    loglik: LogLikMatrix,
    model: ModelSpec,
    laplace: Mapping[int, LaplaceApprox],
    f: Optional[Statistic] = None,
    seed: SeedLike = None,
    chunk_size: int = 65_536,
) -> Estimate:
    """LEMIE1/2/3: the multiple importance estimators with Laplace components.

    ``pooled`` and ``loglik`` must already include the Laplace draws (component
    codes ``-t``). Approximations whose draw count is zero drop out of the mixture.
    """
    present = {-int(c) for c in np.unique(pooled.component_codes()) if c < 0}
    ps = ProposalSet.build(
        pooled, loglik, model, {t: a for t, a in laplace.items() if t in present}, chunk_size
    )
    if variant == 1:
        return mie1_estimate(ps, f)
    if variant == 2:
        return mie2_estimate(ps, f)
    if variant == 3:
        return mie3_estimate(ps, f, seed)
    raise InvalidArgument(f"LEMIE variant must be 1, 2 or 3, got {variant}")
