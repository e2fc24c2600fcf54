"""
Model abstraction and shared sample containers.

This module provides:
- ModelSpec: prior plus per-block likelihood, all in log space
- ParamDraws: an immutable N x p draw matrix with provenance
- ObservationBlock / PartitionedData: the data held by the workers
- partition_data: random, block and by-label partitioning
- factories for the four model families used in the experiments
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .errors import ContractViolation, InvalidArgument
from .linalg import LOG_2PI, cholesky, chol_logdet, mvn_logpdf, unvech, vech_size
from .priors import BetaParams, MvnPrior, NIWParams, PriorFamily
from .rng import as_generator

logger = logging.getLogger(__name__)

# Rows x draws cells evaluated at once by the dense likelihoods
_CELL_BUDGET = 1 << 22


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Draw containers
# ---------------------------------------------------------------------------


class SourceKind(str, Enum):
    LOCAL = "local"
    LAPLACE = "laplace"
    POOLED = "pooled"
    TRUTH = "truth"


@dataclass(frozen=True)
class DrawSource:
    kind: SourceKind
    index: Optional[int] = None

    @classmethod
    def local(cls, j: int) -> "DrawSource":
        return cls(SourceKind.LOCAL, int(j))

    @classmethod
    def laplace(cls, type_tag: int) -> "DrawSource":
        return cls(SourceKind.LAPLACE, int(type_tag))

    @property
    def component(self) -> Optional[int]:
        """Component code: ``j`` for local part j, ``-t`` for Laplace type t."""
        if self.kind is SourceKind.LOCAL:
            return self.index
        if self.kind is SourceKind.LAPLACE:
            return -int(self.index)  # type: ignore[arg-type]
        return None

    @property
    def label(self) -> str:
        return self.kind.value if self.index is None else f"{self.kind.value}:{self.index}"

    @classmethod
    def parse(cls, label: str) -> "DrawSource":
        kind, _, idx = label.partition(":")
        return cls(SourceKind(kind), int(idx) if idx else None)


def component_label(code: int) -> str:
    return f"local:{code}" if code >= 0 else f"laplace:{-code}"


@dataclass(frozen=True)
class ParamDraws:
    """N x p parameter draws with provenance.

    ``origins`` holds one component code per row for pooled sets (see
    :attr:`DrawSource.component`); it is None for single-source sets.
    """

    draws: np.ndarray
    source: DrawSource
    seed_trace: str = ""
    origins: Optional[np.ndarray] = None

    def __post_init__(self):
        draws = np.array(self.draws, dtype=float)
        if draws.ndim == 1:
            draws = draws[:, None]
        if draws.ndim != 2 or draws.shape[0] < 1:
            raise InvalidArgument(f"draws must be a non-empty N x p matrix, got {draws.shape}")
        if not np.all(np.isfinite(draws)):
            raise ContractViolation(f"non-finite coordinates in draws from {self.source.label}")
        object.__setattr__(self, "draws", _readonly(draws))
        if self.origins is not None:
            origins = np.array(self.origins, dtype=np.int64)
            if origins.shape != (draws.shape[0],):
                raise InvalidArgument("origins must have one entry per draw")
            object.__setattr__(self, "origins", _readonly(origins))

    @property
    def N(self) -> int:
        return int(self.draws.shape[0])

    @property
    def p(self) -> int:
        return int(self.draws.shape[1])

    def component_codes(self) -> np.ndarray:
        if self.origins is not None:
            return self.origins
        code = self.source.component
        if code is None:
            raise InvalidArgument(f"{self.source.label} draws carry no component codes")
        return np.full(self.N, code, dtype=np.int64)

    def head(self, n: int) -> "ParamDraws":
        return self.take(np.arange(min(n, self.N)))

    def take(self, rows: np.ndarray) -> "ParamDraws":
        origins = None if self.origins is None else self.origins[rows]
        return ParamDraws(self.draws[rows], self.source, self.seed_trace, origins)

    @classmethod
    def pool(cls, sets: Sequence["ParamDraws"], seed_trace: str = "") -> "ParamDraws":
        """Stack draw sets, retaining each row's component of origin."""
        if not sets:
            raise InvalidArgument("nothing to pool")
        dims = {s.p for s in sets}
        if len(dims) != 1:
            raise InvalidArgument(f"cannot pool draws of dimensions {sorted(dims)}")
        return cls(
            np.vstack([s.draws for s in sets]),
            DrawSource(SourceKind.POOLED),
            seed_trace or ";".join(s.seed_trace for s in sets if s.seed_trace),
            np.concatenate([s.component_codes() for s in sets]),
        )


# ---------------------------------------------------------------------------
# Observations and partitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationBlock:
    """Rows of observations; ``row_indices`` point into the full data set."""

    columns: Tuple[str, ...]
    values: np.ndarray
    row_indices: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[1] != len(self.columns):
            raise InvalidArgument(
                f"{values.shape[1]} value columns for {len(self.columns)} names"
            )
        idx = np.arange(values.shape[0]) if self.row_indices is None else self.row_indices
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "row_indices", _readonly(np.array(idx, dtype=np.int64)))

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def columns_matching(self, prefix: str) -> np.ndarray:
        cols = [i for i, c in enumerate(self.columns) if c.startswith(prefix)]
        return self.values[:, cols]

    def take(self, rows: np.ndarray) -> "ObservationBlock":
        return ObservationBlock(self.columns, self.values[rows], self.row_indices[rows])


@dataclass(frozen=True)
class PartitionedData:
    parts: Tuple[ObservationBlock, ...]
    partition_seed: Optional[int] = None

    def __post_init__(self):
        if len(self.parts) < 1:
            raise InvalidArgument("a partition needs at least one part")
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def M(self) -> int:
        return len(self.parts)

    @property
    def part_sizes(self) -> Tuple[int, ...]:
        return tuple(part.n for part in self.parts)

    @property
    def n(self) -> int:
        return sum(self.part_sizes)

    def manifest(self):
        return [
            {"part_id": j, "row_indices": part.row_indices.tolist()}
            for j, part in enumerate(self.parts)
        ]

    def merged(self) -> ObservationBlock:
        """All parts stacked back into one block, in original row order."""
        values = np.vstack([p.values for p in self.parts])
        idx = np.concatenate([p.row_indices for p in self.parts])
        order = np.argsort(idx, kind="stable")
        return ObservationBlock(self.parts[0].columns, values[order], idx[order])


class PartitionStrategy(str, Enum):
    RANDOM = "random"
    BLOCK = "block"
    BY_LABEL = "by_label"


def _allocate_parts(counts: Sequence[int], M: int) -> list:
    """Split M parts across label groups proportionally (largest remainder)."""
    counts = np.asarray(counts, dtype=float)
    exact = M * counts / counts.sum()
    alloc = np.maximum(np.floor(exact).astype(int), 1)
    while alloc.sum() > M:
        alloc[np.argmax(alloc)] -= 1
    remainder = exact - np.floor(exact)
    for i in np.argsort(-remainder, kind="stable"):
        if alloc.sum() >= M:
            break
        alloc[i] += 1
    return alloc.tolist()


def partition_data(
    data: ObservationBlock,
    M: int,
    strategy: Union[PartitionStrategy, str] = PartitionStrategy.RANDOM,
    seed: Optional[int] = 0,
    label_column: Optional[str] = None,
) -> PartitionedData:
    """Split ``data`` into ``M`` disjoint parts covering every row once.

    ``random`` and ``block`` give part sizes differing by at most one.
    ``by_label`` keeps each part homogeneous in ``label_column`` (default: the
    last column), sharing the parts between labels in proportion to counts.
    """
    strategy = PartitionStrategy(strategy)
    n = data.n
    if M < 1 or M > n:
        raise InvalidArgument(f"cannot split {n} observations into {M} parts")
    rng = as_generator(seed, "partition")

    if strategy is PartitionStrategy.BLOCK:
        groups = np.array_split(np.arange(n), M)
    elif strategy is PartitionStrategy.RANDOM:
        groups = np.array_split(rng.permutation(n), M)
    else:
        labels = data.column(label_column or data.columns[-1])
        levels = np.unique(labels)
        members = [np.flatnonzero(labels == lv) for lv in levels]
        if len(levels) > M:
            raise InvalidArgument(f"{len(levels)} labels do not fit in {M} parts")
        groups = []
        for rows, m in zip(members, _allocate_parts([len(r) for r in members], M)):
            if m > len(rows):
                raise InvalidArgument("a label group has fewer rows than its parts")
            groups.extend(np.array_split(rng.permutation(rows), m))

    parts = tuple(data.take(np.sort(g)) for g in groups)
    logger.debug(f"Partitioned {n} rows into {M} parts ({strategy.value})")
    return PartitionedData(parts, seed)


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------

LogDensity = Callable[[np.ndarray], np.ndarray]
BlockLogLik = Callable[[ObservationBlock, np.ndarray], np.ndarray]


def _check_no_nan(values: np.ndarray, what: str) -> np.ndarray:
    if np.any(np.isnan(values)):
        raise ContractViolation(f"{what} returned NaN")
    return values


@dataclass(frozen=True)
class ModelSpec:
    """Prior and per-block likelihood of a conditionally iid model.

    Both callables take an ``(N, p)`` array of parameter vectors and return an
    ``(N,)`` array of log-densities, ``-inf`` outside the support.
    """

    name: str
    parameter_dim: int
    prior_family: PriorFamily
    prior: object
    log_prior_fn: LogDensity
    block_log_lik_fn: BlockLogLik

    def _thetas(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            theta = theta[None, :] if self.parameter_dim > 1 or theta.size == 1 else theta[:, None]
        if theta.shape[1] != self.parameter_dim:
            raise InvalidArgument(
                f"{self.name} expects parameter dimension {self.parameter_dim}, got {theta.shape[1]}"
            )
        return theta

    def log_prior(self, theta: np.ndarray) -> np.ndarray:
        return _check_no_nan(self.log_prior_fn(self._thetas(theta)), f"{self.name} log_prior")

    def block_log_lik(self, block: ObservationBlock, theta: np.ndarray) -> np.ndarray:
        return _check_no_nan(
            self.block_log_lik_fn(block, self._thetas(theta)), f"{self.name} log-likelihood"
        )

    def log_lik_part(self, data: PartitionedData, j: int, theta: np.ndarray) -> np.ndarray:
        return self.block_log_lik(data.parts[j], theta)

    def log_lik_total(self, data: PartitionedData, theta: np.ndarray) -> np.ndarray:
        return np.sum([self.log_lik_part(data, j, theta) for j in range(data.M)], axis=0)

    def in_support(self, theta: np.ndarray) -> np.ndarray:
        return np.isfinite(self.log_prior(theta))


def log_unnorm_posterior(
    model: ModelSpec, loglik_total: Union[float, np.ndarray], theta: np.ndarray
) -> np.ndarray:
    """``loglik_total + log_prior(theta)``; ``-inf`` outside the support."""
    loglik_total = np.asarray(loglik_total, dtype=float)
    if np.any(np.isnan(loglik_total)):
        raise ContractViolation("loglik_total is NaN")
    prior = model.log_prior(theta)
    out = np.where(np.isneginf(prior), -np.inf, loglik_total + prior)
    return out if out.size > 1 else out.reshape(())[()]


# ---------------------------------------------------------------------------
# Model families
# ---------------------------------------------------------------------------


def _open_unit(lam: np.ndarray) -> np.ndarray:
    return (lam > 0.0) & (lam < 1.0)


def _bernoulli_kernel(lam: np.ndarray, a: float, b: float) -> np.ndarray:
    """``a log(lam) + b log(1 - lam)`` on (0, 1), ``-inf`` elsewhere."""
    inside = _open_unit(lam)
    safe = np.where(inside, lam, 0.5)
    val = special.xlogy(a, safe) + special.xlog1py(b, -safe)
    return np.where(inside, val, -np.inf)


def _beta_prior_fn(prior: BetaParams) -> LogDensity:
    return lambda theta: _bernoulli_kernel(theta[:, 0], prior.a - 1.0, prior.b - 1.0)


def _mvn_prior_fn(prior: MvnPrior) -> LogDensity:
    if prior.is_flat:
        return lambda theta: np.zeros(theta.shape[0])
    L0 = cholesky(prior.Sigma0, "prior covariance")
    return lambda theta: mvn_logpdf(theta, prior.mu0, L0)


def _niw_prior_fn(prior: NIWParams) -> LogDensity:
    d = prior.dim

    def log_prior(theta: np.ndarray) -> np.ndarray:
        mu, Sinv, logdet, ok = _niw_terms(theta, d)
        trace = np.einsum("ij,nji->n", prior.Psi, Sinv)
        val = -0.5 * (prior.nu + d + 2.0) * logdet - 0.5 * trace
        if prior.kappa > 0:
            diff = mu - prior.mu0
            quad = np.einsum("ni,nij,nj->n", diff, Sinv, diff)
            val = val - 0.5 * prior.kappa * quad
        return np.where(ok, val, -np.inf)

    return log_prior


def _prior_fn(prior: object) -> LogDensity:
    if isinstance(prior, BetaParams):
        return _beta_prior_fn(prior)
    if isinstance(prior, MvnPrior):
        return _mvn_prior_fn(prior)
    if isinstance(prior, NIWParams):
        return _niw_prior_fn(prior)
    raise InvalidArgument(f"unsupported prior {type(prior).__name__}")


def beta_bernoulli_model(prior: BetaParams = BetaParams()) -> ModelSpec:
    """Bernoulli observations in column ``x`` with an (unnormalised) Beta prior."""

    def block_log_lik(block: ObservationBlock, theta: np.ndarray) -> np.ndarray:
        x = block.column("x")
        s, n = float(x.sum()), float(x.size)
        return _bernoulli_kernel(theta[:, 0], s, n - s)

    return ModelSpec(
        "beta_bernoulli", 1, PriorFamily.BETA, prior, _beta_prior_fn(prior), block_log_lik
    )


def _gaussian_block_stats(X: np.ndarray):
    n = X.shape[0]
    xbar = X.mean(axis=0) if n else np.zeros(X.shape[1])
    centred = X - xbar
    return n, xbar, centred.T @ centred


def mvn_known_sigma_model(
    Sigma: np.ndarray, prior: Optional[MvnPrior] = None
) -> ModelSpec:
    """Gaussian rows ``x_0..x_{d-1}`` with known covariance; the parameter is the mean."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    d = Sigma.shape[0]
    prior = prior or MvnPrior.flat(d)
    logdet = chol_logdet(cholesky(Sigma, "known covariance"))
    Sinv = np.linalg.inv(Sigma)

    def block_log_lik(block: ObservationBlock, theta: np.ndarray) -> np.ndarray:
        n, xbar, S = _gaussian_block_stats(block.columns_matching("x_"))
        if n == 0:
            return np.zeros(theta.shape[0])
        diff = xbar - theta
        quad = np.einsum("ni,ij,nj->n", diff, Sinv, diff)
        return -0.5 * (np.sum(Sinv * S) + n * quad + n * (d * LOG_2PI + logdet))

    return ModelSpec(
        "mvn_known_sigma", d, PriorFamily.MVN, prior, _mvn_prior_fn(prior), block_log_lik
    )


def split_niw_theta(theta: np.ndarray, d: int) -> Tuple[np.ndarray, np.ndarray]:
    """Split stacked ``(mu, vech Sigma)`` rows into means and covariance matrices."""
    return theta[:, :d], unvech(theta[:, d:], d)


def _batched_cholesky(Sigmas: np.ndarray):
    """Cholesky factors of a stack; matrices that are not PD are flagged."""
    ok = np.ones(Sigmas.shape[0], dtype=bool)
    try:
        return np.linalg.cholesky(Sigmas), ok
    except np.linalg.LinAlgError:
        L = np.zeros_like(Sigmas)
        for i, S in enumerate(Sigmas):
            try:
                L[i] = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                ok[i] = False
                L[i] = np.eye(S.shape[0])
        return L, ok


def _niw_terms(theta: np.ndarray, d: int):
    mu, Sigmas = split_niw_theta(theta, d)
    L, ok = _batched_cholesky(Sigmas)
    logdet = 2.0 * np.sum(np.log(np.abs(np.diagonal(L, axis1=1, axis2=2))), axis=1)
    Sinv = np.linalg.inv(np.where(ok[:, None, None], Sigmas, np.eye(d)))
    return mu, Sinv, logdet, ok


def mvn_niw_model(prior: NIWParams) -> ModelSpec:
    """Gaussian rows with unknown mean and covariance, parameter ``(mu, vech Sigma)``."""
    d = prior.dim
    step = max(1, _CELL_BUDGET // (8 * d * d))

    def block_log_lik(block: ObservationBlock, theta: np.ndarray) -> np.ndarray:
        n, xbar, S = _gaussian_block_stats(block.columns_matching("x_"))
        if n == 0:
            return np.zeros(theta.shape[0])
        out = np.empty(theta.shape[0])
        for start in range(0, theta.shape[0], step):
            mu, Sinv, logdet, ok = _niw_terms(theta[start : start + step], d)
            diff = xbar - mu
            quad = np.einsum("ni,nij,nj->n", diff, Sinv, diff)
            trace = np.einsum("ij,nji->n", S, Sinv)
            val = -0.5 * (trace + n * quad + n * (d * LOG_2PI + logdet))
            out[start : start + step] = np.where(ok, val, -np.inf)
        return out

    p = d + vech_size(d)
    return ModelSpec("mvn_niw", p, PriorFamily.NIW, prior, _niw_prior_fn(prior), block_log_lik)


def logistic_model(prior: MvnPrior) -> ModelSpec:
    """Binomial-logit rows ``x_0..x_{p-1}, c, y`` (``c`` trials, ``y`` successes)."""
    if prior.is_flat:
        raise InvalidArgument("the logistic model needs a proper Gaussian prior")
    p = prior.dim

    def block_log_lik(block: ObservationBlock, theta: np.ndarray) -> np.ndarray:
        X = block.columns_matching("x_")
        c, y = block.column("c"), block.column("y")
        log_binom = special.gammaln(c + 1) - special.gammaln(y + 1) - special.gammaln(c - y + 1)
        out = np.empty(theta.shape[0])
        step = max(1, _CELL_BUDGET // max(1, X.shape[0]))
        for start in range(0, theta.shape[0], step):
            psi = theta[start : start + step] @ X.T
            out[start : start + step] = psi @ y - np.logaddexp(0.0, psi) @ c
        return out + float(log_binom.sum())

    isotropic = np.allclose(prior.Sigma0, prior.Sigma0[0, 0] * np.eye(p))
    family = PriorFamily.MVN_IID if isotropic else PriorFamily.MVN
    return ModelSpec("logistic", p, family, prior, _mvn_prior_fn(prior), block_log_lik)


def with_prior(model: ModelSpec, prior: object) -> ModelSpec:
    """The same likelihood under a different prior (e.g. a fractionated one)."""
    if type(prior) is not type(model.prior):
        raise InvalidArgument(
            f"{model.name} takes a {type(model.prior).__name__} prior, "
            f"got {type(prior).__name__}"
        )
    return replace(model, prior=prior, log_prior_fn=_prior_fn(prior))


def observations(columns: Iterable[str], values: np.ndarray) -> ObservationBlock:
    return ObservationBlock(tuple(columns), np.asarray(values, dtype=float))
