"""
Weight diagnostics and scoring against a reference posterior.

- ess: effective sample size of a weighted sample set
- fit_gpd_khat: generalized Pareto shape of the largest importance weights
  (Zhang-Stephens profile estimator with a weak prior on the shape)
- cross_entropy / kl_divergence: Monte Carlo scores over truth draws
- WeightedKde: Gaussian KDE of weighted draws with Silverman bandwidths
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .errors import InvalidArgument
from .mie import WeightedSampleSet, weighted_log_density, weighted_quantile
from .model import ParamDraws

logger = logging.getLogger(__name__)

KHAT_WARN = 0.5
KHAT_BAD = 0.7
MIN_TAIL = 5
MIN_DRAWS = 25

LogDensity = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Effective sample size
# ---------------------------------------------------------------------------


def ess_from_weights(norm_weights: np.ndarray) -> float:
    w = np.asarray(norm_weights, dtype=float)
    w = w / w.sum()
    return float(np.clip(1.0 / np.sum(w * w), 1.0, w.size))


def ess(ws: WeightedSampleSet) -> float:
    """Effective sample size ``1 / sum(w^2)`` of the normalised weights.

    For blockwise schemes the stored weights are already ``q_j`` times the
    within-block weights, so the same sum gives ``1 / sum_j q_j^2 sum_h w_jh^2``.
    """
    return ess_from_weights(ws.norm_weights)


# ---------------------------------------------------------------------------
# Pareto tail shape
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GpdFit:
    khat: float
    sigma_hat: float
    tail_count: int
    threshold: float
    fitted: bool = True

    @property
    def flags(self) -> List[str]:
        if not self.fitted:
            return ["no_fit"]
        out = []
        if self.khat > KHAT_BAD:
            out.append("khat>0.7")
        if self.khat > KHAT_WARN:
            out.append("khat>0.5")
        return out

    @classmethod
    def no_fit(cls, tail_count: int, threshold: float = float("nan")) -> "GpdFit":
        return cls(float("nan"), float("nan"), tail_count, threshold, fitted=False)


def default_tail_size(N: int) -> int:
    return int(math.ceil(min(0.2 * N, 3.0 * math.sqrt(N))))


def _zhang_stephens(x: np.ndarray, prior_k: float = 10.0, grid: Optional[int] = None):
    """Shape and scale of a GPD fitted to sorted positive excesses ``x``."""
    n = x.size
    m = grid or 30 + int(math.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1, dtype=float) - 0.5))
    b /= 3.0 * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]
    k = np.log1p(-b[:, None] * x).mean(axis=1)
    profile = n * (np.log(-(b / k)) - k - 1.0)
    weights = 1.0 / np.exp(profile - profile[:, None]).sum(axis=1)
    keep = weights >= 10 * np.finfo(float).eps
    b, weights = b[keep], weights[keep] / weights[keep].sum()
    b_post = float(np.sum(b * weights))
    k_post = float(np.log1p(-b_post * x).mean())
    sigma = -k_post / b_post
    k_post = (n * k_post + prior_k * 0.5) / (n + prior_k)
    return k_post, sigma


def fit_gpd_khat(
    log_weights: np.ndarray,
    tail_size: Optional[int] = None,
    grid: Optional[int] = None,
) -> GpdFit:
    """Fit a generalized Pareto distribution to the largest weights.

    The tail holds ``ceil(min(0.2 N, 3 sqrt N))`` weights unless ``tail_size``
    is given; the threshold is the next largest weight. Weights are rescaled
    by their maximum first, so the result does not depend on the log-weight
    offset. Too few draws, too small a tail or a constant tail give a no-fit
    result instead of an exception.
    """
    lw = np.asarray(log_weights, dtype=float).ravel()
    N = lw.size
    tail = default_tail_size(N) if tail_size is None else int(tail_size)
    if N < MIN_DRAWS or tail < MIN_TAIL or tail >= N:
        return GpdFit.no_fit(min(tail, N))
    top = lw.max()
    if not np.isfinite(top):
        return GpdFit.no_fit(tail)
    sorted_w = np.sort(np.exp(lw - top))
    cutoff = sorted_w[N - tail - 1]
    excess = sorted_w[N - tail :] - cutoff
    if excess[-1] <= 0 or np.count_nonzero(excess > 0) < MIN_TAIL:
        return GpdFit.no_fit(tail, float(np.log(cutoff) + top) if cutoff > 0 else -np.inf)
    khat, sigma = _zhang_stephens(excess, grid=grid)
    return GpdFit(float(khat), float(sigma), tail, float(np.log(cutoff) + top) if cutoff > 0 else -np.inf)


@dataclass(frozen=True)
class DiagnosticsReport:
    ess: float
    khat: float
    scheme: str
    N: int
    flags: List[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"ess": self.ess, "khat": self.khat, "scheme": self.scheme, "N": self.N, "flags": self.flags}


def diagnose(ws: WeightedSampleSet, tail_size: Optional[int] = None) -> DiagnosticsReport:
    fit = fit_gpd_khat(ws.log_weights, tail_size)
    report = DiagnosticsReport(ess(ws), fit.khat, ws.scheme.value, ws.N, fit.flags)
    if "khat>0.7" in report.flags:
        logger.warning(f"⚠️  {ws.scheme.value}: k-hat {fit.khat:.2f} above {KHAT_BAD}")
    return report


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


class Score(NamedTuple):
    value: float
    std_error: float
    infinite: bool = False


def _draw_matrix(truth: Union[ParamDraws, np.ndarray]) -> np.ndarray:
    draws = truth.draws if isinstance(truth, ParamDraws) else np.asarray(truth, dtype=float)
    draws = draws[:, None] if draws.ndim == 1 else draws
    if draws.shape[0] < 2:
        raise InvalidArgument("scoring needs at least two truth draws")
    return draws


def _mean_and_se(values: np.ndarray) -> Score:
    if np.any(np.isposinf(values)):
        return Score(float("inf"), float("nan"), True)
    return Score(float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size)))


def cross_entropy(truth: Union[ParamDraws, np.ndarray], log_density: LogDensity) -> Score:
    """``-mean log q`` over truth draws with its standard error.

    A zero density at any truth draw gives ``inf`` and sets ``infinite``.
    """
    draws = _draw_matrix(truth)
    score = _mean_and_se(-np.asarray(log_density(draws), dtype=float))
    if score.infinite:
        logger.warning("⚠️  density is zero at some truth draws; cross entropy is infinite")
    return score


def kl_divergence(
    truth: Union[ParamDraws, np.ndarray],
    log_density: LogDensity,
    entropy_of_truth: Optional[float] = None,
    truth_log_density: Optional[LogDensity] = None,
) -> Score:
    """KL(truth || q) as cross entropy minus the truth entropy.

    Pass ``entropy_of_truth`` when it is known in closed form; otherwise
    ``truth_log_density`` is evaluated at the truth draws and the pointwise
    log ratio is averaged, which also gives a tighter standard error.
    """
    draws = _draw_matrix(truth)
    if entropy_of_truth is not None:
        ce = cross_entropy(draws, log_density)
        return Score(ce.value - entropy_of_truth, ce.std_error, ce.infinite)
    if truth_log_density is None:
        raise InvalidArgument("need the truth entropy or the truth log-density")
    log_q = np.asarray(log_density(draws), dtype=float)
    log_p = np.asarray(truth_log_density(draws), dtype=float)
    with np.errstate(invalid="ignore"):
        score = _mean_and_se(log_p - log_q)
    if score.infinite:
        logger.warning("⚠️  density is zero at some truth draws; KL is infinite")
    return score


def beta_entropy(a: float, b: float) -> float:
    return float(stats.beta(a, b).entropy())


# ---------------------------------------------------------------------------
# Weighted KDE
# ---------------------------------------------------------------------------


def silverman_bandwidth(ws: WeightedSampleSet) -> np.ndarray:
    """Per-coordinate bandwidths using the Kish effective sample size.

    One coordinate uses ``0.9 min(sd, IQR / 1.34) n^(-1/5)``; more coordinates
    use the normal-reference factor ``(4 / ((d + 2) n))^(1 / (d + 4))``.
    """
    draws = ws.draws.draws
    w = ws.norm_weights
    d = draws.shape[1]
    n_eff = ess(ws)
    mean = w @ draws
    sd = np.sqrt(np.maximum(w @ (draws - mean) ** 2, 0.0))
    if d == 1:
        iqr = weighted_quantile(ws, 0, 0.75) - weighted_quantile(ws, 0, 0.25)
        spread = min(sd[0], iqr / 1.34) if iqr > 0 else sd[0]
        bw = np.array([0.9 * spread * n_eff ** (-0.2)])
    else:
        bw = sd * (4.0 / ((d + 2.0) * n_eff)) ** (1.0 / (d + 4.0))
    if np.any(bw <= 0):
        floor = 1e-12 * max(1.0, float(np.max(np.abs(draws))))
        logger.warning("⚠️  zero spread in weighted draws; bandwidth floored")
        bw = np.maximum(bw, floor)
    return bw


class WeightedKde:
    """Gaussian-kernel density of a weighted sample set.

    ``bandwidth`` is a kernel standard deviation (scalar or per coordinate);
    when omitted the Silverman rule is used.
    """

    def __init__(
        self,
        ws: WeightedSampleSet,
        bandwidth: Optional[Union[float, Sequence[float]]] = None,
        coordinates: Optional[Sequence[int]] = None,
    ):
        if coordinates is not None:
            ws = marginal(ws, coordinates)
        self.ws = ws
        if bandwidth is None:
            self.bandwidth = silverman_bandwidth(ws)
        else:
            self.bandwidth = np.broadcast_to(np.asarray(bandwidth, dtype=float), (ws.draws.p,)).copy()
        if np.any(self.bandwidth <= 0):
            raise InvalidArgument("bandwidth must be positive")

    def log_density(self, points: np.ndarray) -> np.ndarray:
        return weighted_log_density(self.ws, points, self.bandwidth)

    def density(self, points: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(points))

    __call__ = log_density


def marginal(ws: WeightedSampleSet, coordinates: Sequence[int]) -> WeightedSampleSet:
    """The same weights over a subset of the parameter coordinates."""
    draws = ws.draws
    sub = ParamDraws(draws.draws[:, list(coordinates)], draws.source, draws.seed_trace, draws.origins)
    return WeightedSampleSet(
        sub, ws.log_weights, ws.norm_weights, ws.scheme, ws.component_weights, ws.chat, ws.codes
    )
