"""
Multiple importance estimators over pooled local-posterior draws.

This module provides:
- ProposalSet: pooled draws, their log-likelihood matrix and optional
  Laplace components, with every component's log-density relative to the prior
- snis_log_weights / chat_estimates / kl_hat_local: per-component quantities
- mie1_estimate, mie2_estimate, mie3_estimate
- weighted_density, weighted_log_density, weighted_quantile

All arithmetic happens in log space; mixture denominators go through
``scipy.special.logsumexp`` in column chunks.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, Dict, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import signal, stats
from scipy.special import logsumexp

from .errors import DegenerateBlockError, InvalidArgument, PositivityError
from .federation import LogLikMatrix
from .linalg import LOG_2PI, cholesky
from .model import ModelSpec, ParamDraws, component_label
from .rng import SeedLike, as_generator

if TYPE_CHECKING:
    from .laplace import LaplaceApprox

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-8
DEFAULT_CHUNK = 65_536

Statistic = Callable[[np.ndarray], np.ndarray]


class Scheme(str, Enum):
    MIE1 = "mie1"
    MIE2 = "mie2"
    MIE3 = "mie3"
    LEMIE1 = "lemie1"
    LEMIE2 = "lemie2"
    LEMIE3 = "lemie3"
    NAIVE = "naive"
    VANILLA = "vanilla"
    CMC1 = "cmc1"
    CMC2 = "cmc2"
    NDPE = "ndpe"
    SDPE = "sdpe"


@dataclass(frozen=True)
class WeightedSampleSet:
    """Draws with importance weights.

    ``norm_weights`` always sum to one over the whole set. For the per-block
    schemes (MIE1/LEMIE1) each block's share equals its component weight and
    ``log_weights`` are the within-block weights divided by the block's c-hat
    and scaled by its share, so blocks share one scale for tail fits.
    """

    draws: ParamDraws
    log_weights: np.ndarray
    norm_weights: np.ndarray
    scheme: Scheme
    component_weights: Dict[int, float] = field(default_factory=dict)
    chat: Dict[int, float] = field(default_factory=dict)
    codes: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.any(np.isnan(self.log_weights)):
            raise InvalidArgument("log-weights must not be NaN")
        total = float(np.sum(self.norm_weights))
        if np.any(self.norm_weights < 0) or abs(total - 1.0) > 1e-12:
            raise InvalidArgument(f"normalised weights must sum to 1, got {total!r}")

    @property
    def N(self) -> int:
        return self.draws.N


class Estimate(NamedTuple):
    value: np.ndarray
    weights: WeightedSampleSet


def _identity(theta: np.ndarray) -> np.ndarray:
    return theta


def weighted_average(ws: WeightedSampleSet, f: Optional[Statistic]) -> np.ndarray:
    values = np.asarray((f or _identity)(ws.draws.draws), dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return ws.norm_weights @ values


def _normalise(log_w: np.ndarray) -> np.ndarray:
    total = logsumexp(log_w)
    if not np.isfinite(total):
        raise DegenerateBlockError(-1)
    w = np.exp(log_w - total)
    return w / w.sum()


def _log_mean_exp(log_w: np.ndarray) -> float:
    return float(logsumexp(log_w) - np.log(log_w.size))


# ---------------------------------------------------------------------------
# Proposal set
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProposalSet:
    """Everything the master holds after the protocol: no observations.

    ``log_prior`` only matters when Laplace components are present; for pure
    mixtures of local posteriors the prior cancels and may be left at zero.
    """

    pooled: ParamDraws
    loglik: LogLikMatrix
    log_prior: np.ndarray
    laplace: Mapping[int, "LaplaceApprox"] = field(default_factory=dict)
    chunk_size: int = DEFAULT_CHUNK

    def __post_init__(self):
        if self.loglik.N != self.pooled.N:
            raise InvalidArgument(
                f"{self.loglik.N} log-likelihood columns for {self.pooled.N} draws"
            )
        codes = self.pooled.component_codes()
        missing = {-c for c in np.unique(codes[codes < 0])} - set(self.laplace)
        if missing:
            raise InvalidArgument(f"no Laplace approximation for types {sorted(missing)}")
        object.__setattr__(self, "log_prior", np.asarray(self.log_prior, dtype=float))

    @classmethod
    def build(
        cls,
        pooled: ParamDraws,
        loglik: LogLikMatrix,
        model: Optional[ModelSpec] = None,
        laplace: Union[Mapping[int, "LaplaceApprox"], Sequence["LaplaceApprox"]] = (),
        chunk_size: int = DEFAULT_CHUNK,
    ) -> "ProposalSet":
        if not isinstance(laplace, Mapping):
            laplace = {a.type_tag: a for a in laplace}
        if model is None:
            if laplace:
                raise InvalidArgument("Laplace components need the model prior")
            log_prior = np.zeros(pooled.N)
        else:
            log_prior = model.log_prior(pooled.draws)
        return cls(pooled, loglik, log_prior, dict(laplace), chunk_size)

    @property
    def codes(self) -> np.ndarray:
        return self.pooled.component_codes()

    @property
    def components(self) -> Tuple[int, ...]:
        """Components with at least one draw: local parts first, then Laplace types."""
        present = np.unique(self.codes)
        local = sorted(int(c) for c in present if c >= 0)
        lap = sorted((int(c) for c in present if c < 0), reverse=True)
        return tuple(local + lap)

    @property
    def has_laplace(self) -> bool:
        return any(c < 0 for c in self.components)

    def counts(self) -> Dict[int, int]:
        codes, n = np.unique(self.codes, return_counts=True)
        return {int(c): int(k) for c, k in zip(codes, n)}

    def rows_of(self, code: int) -> np.ndarray:
        rows = np.flatnonzero(self.codes == code)
        if rows.size == 0:
            raise InvalidArgument(f"no draws from component {component_label(code)}")
        return rows

    def support(self, cols: np.ndarray) -> np.ndarray:
        return np.isfinite(self.log_prior[cols])

    def laplace_rel(self, type_tag: int, cols: np.ndarray) -> np.ndarray:
        """log phi_t - log prior at the given columns (prior taken as 0 off-support)."""
        prior = np.where(self.support(cols), self.log_prior[cols], 0.0)
        return self.laplace[type_tag].log_pdf(self.pooled.draws[cols]) - prior

    def own_log_weights(self, code: int) -> np.ndarray:
        """log pi~(theta | x) - log pi~_c(theta) over the draws from component ``code``."""
        cols = self.rows_of(code)
        values = self.loglik.values[:, cols]
        if code >= 0:
            return np.delete(values, code, axis=0).sum(axis=0)
        lw = values.sum(axis=0) - self.laplace_rel(-code, cols)
        return np.where(self.support(cols), lw, -np.inf)

    def log_mixture(
        self,
        cols: np.ndarray,
        log_q: Mapping[int, float],
        log_chat: Mapping[int, float],
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Return (log target, log mixture) relative to the prior at ``cols``."""
        comps = [c for c in self.components if np.isfinite(log_q.get(c, -np.inf))]
        local = [c for c in comps if c >= 0]
        offset = np.array([log_q[c] + log_chat[c] for c in local])
        all_rows = local == list(range(self.loglik.M))
        target = np.empty(cols.size)
        mixture = np.empty(cols.size)
        for start in range(0, cols.size, self.chunk_size):
            chunk = cols[start : start + self.chunk_size]
            block = self.loglik.values[:, chunk]
            terms = []
            if local:
                terms.append((block if all_rows else block[local]) + offset[:, None])
            for c in comps:
                if c < 0:
                    rel = self.laplace_rel(-c, chunk) + log_q[c] + log_chat[c]
                    terms.append(rel[None, :])
            stacked = np.vstack(terms)
            target[start : start + chunk.size] = block.sum(axis=0)
            mixture[start : start + chunk.size] = logsumexp(stacked, axis=0)
        return target, mixture


def _scheme(base: int, ps: ProposalSet) -> Scheme:
    return Scheme(f"{'lemie' if ps.has_laplace else 'mie'}{base}")


# ---------------------------------------------------------------------------
# Per-component quantities
# ---------------------------------------------------------------------------


def snis_log_weights(ps: ProposalSet, j: int) -> np.ndarray:
    """Unnormalised log-weights of component ``j``'s own draws.

    For a local component this is the sum of the other parts' log-likelihoods.
    """
    return ps.own_log_weights(j)


def chat_estimates(ps: ProposalSet) -> Dict[int, float]:
    """log c-hat for every component, each from its own draws only."""
    return {c: _log_mean_exp(ps.own_log_weights(c)) for c in ps.components}


def kl_hat_local(ps: ProposalSet, j: int, log_chat: Optional[float] = None) -> float:
    """Monte Carlo estimate of KL(pi_j || pi) from component ``j``'s draws.

    Laplace components use their closed-form entropy, so only the cross
    entropy is estimated. Returns ``inf`` when a draw has zero target density.
    """
    lw = ps.own_log_weights(j)
    if log_chat is None:
        log_chat = _log_mean_exp(lw)
    if np.any(np.isneginf(lw)):
        return float("inf")
    if j >= 0:
        return float(-np.mean(lw) + log_chat)
    cols = ps.rows_of(j)
    approx = ps.laplace[-j]
    # lw is log pi~ - log phi, so adding log phi back gives the full log pi~
    log_target = lw + approx.log_pdf(ps.pooled.draws[cols])
    return float(-np.mean(log_target) + log_chat - approx.entropy())


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


def mie1_estimate(ps: ProposalSet, f: Optional[Statistic] = None) -> Estimate:
    """Blockwise self-normalised estimates combined with weights N_j / N."""
    N = ps.pooled.N
    log_weights = np.empty(N)
    norm_weights = np.empty(N)
    q: Dict[int, float] = {}
    log_chat: Dict[int, float] = {}
    for c in ps.components:
        cols = ps.rows_of(c)
        lw = ps.own_log_weights(c)
        if not np.any(np.isfinite(lw)):
            raise DegenerateBlockError(c)
        q[c] = cols.size / N
        log_chat[c] = _log_mean_exp(lw)
        log_weights[cols] = lw - log_chat[c] + np.log(q[c])
        norm_weights[cols] = q[c] * _normalise(lw)
    norm_weights /= norm_weights.sum()
    ws = WeightedSampleSet(
        ps.pooled, log_weights, norm_weights, _scheme(1, ps), q, log_chat, ps.codes
    )
    return Estimate(weighted_average(ws, f), ws)


def _mixture_weights(
    ps: ProposalSet,
    cols: np.ndarray,
    q: Mapping[int, float],
    log_chat: Mapping[int, float],
) -> np.ndarray:
    log_q = {c: (np.log(v) if v > 0 else -np.inf) for c, v in q.items()}
    target, mixture = ps.log_mixture(cols, log_q, log_chat)
    support = ps.support(cols)
    zero = np.flatnonzero(support & np.isneginf(mixture))
    if zero.size:
        raise PositivityError(cols[zero].tolist())
    with np.errstate(invalid="ignore"):
        lw = target - mixture
    return np.where(support & np.isfinite(target), lw, -np.inf)


def mie2_estimate(
    ps: ProposalSet,
    f: Optional[Statistic] = None,
    q: Optional[Mapping[int, float]] = None,
    self_normalise: bool = True,
) -> Estimate:
    """Mixture-proposal estimate with c-hat-scaled local posteriors.

    ``q`` defaults to the draw shares N_c / N. With ``self_normalise=False``
    the plain average of w * f is returned instead of the ratio estimate.
    """
    counts = ps.counts()
    N = ps.pooled.N
    if q is None:
        q = {c: counts[c] / N for c in ps.components}
    elif abs(sum(q.values()) - 1.0) > 1e-9:
        raise InvalidArgument("component weights must sum to 1")
    log_chat = chat_estimates(ps)
    cols = np.arange(N)
    lw = _mixture_weights(ps, cols, q, log_chat)
    ws = WeightedSampleSet(
        ps.pooled, lw, _normalise(lw), _scheme(2, ps), dict(q), log_chat, ps.codes
    )
    if self_normalise:
        return Estimate(weighted_average(ws, f), ws)
    values = np.asarray((f or _identity)(ps.pooled.draws), dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return Estimate(np.exp(lw) @ values / N, ws)


def kl_component_weights(
    ps: ProposalSet, log_chat: Optional[Mapping[int, float]] = None
) -> Dict[int, float]:
    """Component weights proportional to 1 / KL-hat, floored before inversion."""
    log_chat = log_chat or chat_estimates(ps)
    inverse = {}
    for c in ps.components:
        kl = kl_hat_local(ps, c, log_chat[c])
        if kl < KL_FLOOR:
            logger.warning(
                f"⚠️  KL estimate {kl:.3g} for {component_label(c)} floored at {KL_FLOOR}"
            )
            kl = KL_FLOOR
        inverse[c] = 1.0 / kl
    total = sum(inverse.values())
    if total <= 0:
        raise DegenerateBlockError(-1)
    return {c: v / total for c, v in inverse.items()}


def mie3_estimate(
    ps: ProposalSet,
    f: Optional[Statistic] = None,
    seed: SeedLike = None,
) -> Estimate:
    """KL-prioritised mixture: resample min_c N_c draws, weight with the original c-hat."""
    counts = ps.counts()
    log_chat = chat_estimates(ps)
    q = kl_component_weights(ps, log_chat)
    n_bar = min(counts.values())
    rng = as_generator(seed, "mie3_resample")
    comps = list(ps.components)
    drawn = rng.multinomial(n_bar, [q[c] for c in comps])
    picked = []
    for c, k in zip(comps, drawn):
        if k == 0:
            continue
        rows = ps.rows_of(c)
        picked.append(rng.choice(rows, size=k, replace=bool(k > rows.size)))
    cols = np.concatenate(picked)
    lw = _mixture_weights(ps, cols, q, log_chat)
    draws = ps.pooled.take(cols)
    ws = WeightedSampleSet(draws, lw, _normalise(lw), _scheme(3, ps), q, log_chat, draws.origins)
    return Estimate(weighted_average(ws, f), ws)


def uniform_weights(draws: ParamDraws, scheme: Scheme = Scheme.NAIVE) -> WeightedSampleSet:
    """Equal weights, as used by naive pooling and direct posterior draws."""
    N = draws.N
    return WeightedSampleSet(
        draws, np.zeros(N), np.full(N, 1.0 / N), scheme, codes=draws.origins
    )


# ---------------------------------------------------------------------------
# Density and quantiles
# ---------------------------------------------------------------------------


class Kernel(str, Enum):
    RECT = "rect"
    NORMAL = "normal"


def _bandwidth_matrix(bandwidth, p: int) -> np.ndarray:
    """Scalar or vector -> diagonal covariance (std devs); matrix -> covariance as is."""
    bw = np.asarray(bandwidth, dtype=float)
    if bw.ndim == 2:
        return bw
    bw = np.broadcast_to(bw, (p,))
    if np.any(bw <= 0):
        raise InvalidArgument("bandwidth must be positive")
    return np.diag(bw**2)


def weighted_density(
    ws: WeightedSampleSet,
    points: np.ndarray,
    kernel: Union[Kernel, str] = Kernel.NORMAL,
    bandwidth: Union[float, np.ndarray] = 1.0,
) -> np.ndarray:
    """Weighted kernel density at each row of ``points``.

    The rectangular kernel is the indicator of a box of side ``bandwidth``
    centred on each draw, scaled by the box volume. The normal kernel uses
    ``bandwidth`` as a standard deviation (scalar or per coordinate) or, when
    given a matrix, as the smoothing covariance.
    """
    kernel = Kernel(kernel)
    p = ws.draws.p
    pts = np.asarray(points, dtype=float).reshape(-1, p)
    if kernel is Kernel.NORMAL:
        return np.exp(weighted_log_density(ws, pts, bandwidth))
    width = np.broadcast_to(np.asarray(bandwidth, dtype=float), (p,))
    if np.any(width <= 0):
        raise InvalidArgument("bandwidth must be positive")
    volume = float(np.prod(width))
    out = np.empty(pts.shape[0])
    for i, point in enumerate(pts):
        inside = np.all(np.abs(ws.draws.draws - point) < width / 2.0, axis=1)
        out[i] = ws.norm_weights[inside].sum() / volume
    return out


_CELL_BUDGET = 1 << 22
_BIN_STEPS = 8
_BIN_REACH = 12.0


def _binned_density_1d(
    centres: np.ndarray, weights: np.ndarray, points: np.ndarray, sd: float
) -> Optional[np.ndarray]:
    """Linear-binned Gaussian KDE on a grid of spacing sd/8, or None if the grid is too long."""
    step = sd / _BIN_STEPS
    lo = min(centres.min(), points.min()) - _BIN_REACH * sd
    hi = max(centres.max(), points.max()) + _BIN_REACH * sd
    size = int(np.ceil((hi - lo) / step)) + 2
    if size > _CELL_BUDGET:
        return None
    pos = (centres - lo) / step
    left = np.floor(pos).astype(np.int64)
    frac = pos - left
    grid = np.bincount(left, weights * (1.0 - frac), minlength=size)
    grid += np.bincount(left + 1, weights * frac, minlength=size)
    reach = int(_BIN_REACH * _BIN_STEPS)
    taps = stats.norm.pdf(np.arange(-reach, reach + 1) * step, scale=sd)
    smoothed = np.maximum(signal.fftconvolve(grid[:size], taps, mode="same"), 0.0)
    return np.interp(points, lo + step * np.arange(size), smoothed)


def weighted_log_density(
    ws: WeightedSampleSet,
    points: np.ndarray,
    bandwidth: Union[float, np.ndarray],
    exact: bool = False,
) -> np.ndarray:
    """Log of the weighted Gaussian-kernel density at each row of ``points``.

    Exact evaluation is chunked so that points x draws stays within a fixed
    cell budget. One-dimensional sets too large for that are linearly binned
    and convolved instead, unless ``exact`` is set.
    """
    p = ws.draws.p
    pts = np.asarray(points, dtype=float).reshape(-1, p)
    H = _bandwidth_matrix(bandwidth, p)
    keep = ws.norm_weights > 0
    if p == 1 and not exact and keep.sum() * pts.shape[0] > _CELL_BUDGET:
        binned = _binned_density_1d(
            ws.draws.draws[keep, 0], ws.norm_weights[keep], pts[:, 0], float(np.sqrt(H[0, 0]))
        )
        if binned is not None:
            with np.errstate(divide="ignore"):
                return np.log(binned)
    L = cholesky(H, "kernel covariance")
    Linv = np.linalg.inv(L)
    centres = ws.draws.draws[keep] @ Linv.T
    log_w = np.log(ws.norm_weights[keep])
    const = -0.5 * p * LOG_2PI - float(np.sum(np.log(np.diag(L))))
    centre_sq = np.sum(centres**2, axis=1)
    step = max(1, _CELL_BUDGET // centres.shape[0])
    out = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], step):
        z = pts[start : start + step] @ Linv.T
        sq = np.sum(z**2, axis=1)[:, None] + centre_sq[None, :] - 2.0 * z @ centres.T
        out[start : start + step] = logsumexp(log_w[None, :] - 0.5 * np.maximum(sq, 0.0), axis=1)
    return out + const


def weighted_quantile(ws: WeightedSampleSet, coordinate: int, prob: float) -> float:
    """Smallest draw value whose cumulative normalised weight reaches ``prob``."""
    if not 0.0 < prob < 1.0:
        raise InvalidArgument(f"prob must lie in (0, 1), got {prob}")
    values = ws.draws.draws[:, coordinate]
    order = np.argsort(values, kind="stable")
    cumulative = np.cumsum(ws.norm_weights[order])
    idx = int(np.searchsorted(cumulative, prob - 1e-12, side="left"))
    return float(values[order[min(idx, values.size - 1)]])


def weighted_mean(ws: WeightedSampleSet) -> np.ndarray:
    return ws.norm_weights @ ws.draws.draws
