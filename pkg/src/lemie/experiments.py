"""
Config-driven experiment runner.

A scenario is a JSON file validated by :class:`ScenarioConfig`. Running it
generates data, partitions it, runs the in-out-in protocol (plus the Laplace
extension round), applies every requested method, scores each one against
the reference posterior and writes:

- ``results.csv``: one metric per row
- ``manifest.json``: config, hash, seeds, runtimes and protocol counts
- plot data: density/QQ files for one-dimensional parameters, contour grids
  otherwise, and metric curves for sweeps
"""

import asyncio
import csv
import hashlib
import io
import json
import logging
import subprocess
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy import stats

from .baselines import (
    DpeResult,
    cmc_pool,
    fractionate_prior,
    naive_estimate,
    ndpe_sample,
    require_fractionated_propriety,
    sdpe_sample,
)
from .diagnostics import WeightedKde, beta_entropy, cross_entropy, ess, fit_gpd_khat, kl_divergence, marginal
from .errors import ConfigError, InvalidArgument, LemieError
from .federation import Federation, ProtocolRound
from .laplace import LaplaceApprox, build_laplace, laplace_draws, lemie_estimate
from .linalg import cholesky, mvn_entropy, mvn_logpdf, vech
from .mie import (
    ProposalSet,
    Scheme,
    WeightedSampleSet,
    mie1_estimate,
    mie2_estimate,
    mie3_estimate,
    uniform_weights,
    weighted_average,
    weighted_quantile,
)
from .model import (
    ModelSpec,
    ObservationBlock,
    ParamDraws,
    PartitionStrategy,
    PartitionedData,
    beta_bernoulli_model,
    logistic_model,
    mvn_known_sigma_model,
    mvn_niw_model,
    observations,
    partition_data,
    with_prior,
)
from .priors import BetaParams, MvnPrior, NIWParams
from .rng import as_generator
from .samplers import (
    logistic_gibbs,
    mvn_known_sigma_posterior,
    niw_posterior,
    sample_beta_posterior,
    sample_mvn_known_sigma_posterior,
    sample_niw_posterior,
)
from .settings import RuntimeSettings
from .storage import write_columns, write_draws, write_partition_manifest, write_transcript, write_weighted

logger = logging.getLogger(__name__)

METRICS = (
    "err_mean",
    "err_q025",
    "err_q975",
    "kl",
    "cross_entropy",
    "ess",
    "khat",
    "acceptance_rate",
    "out_of_support",
    "protocol_bytes",
    "protocol_messages",
    "runtime_s",
    "failed",
)

RESULT_COLUMNS = ("scenario", "method", "M", "metric", "value", "std_error", "note")


class Method(str, Enum):
    NAIVE = "naive"
    VANILLA = "vanilla"
    MIE1 = "mie1"
    MIE2 = "mie2"
    MIE3 = "mie3"
    LEMIE1 = "lemie1"
    LEMIE2 = "lemie2"
    LEMIE3 = "lemie3"
    CMC1 = "cmc1"
    CMC2 = "cmc2"
    NDPE = "ndpe"
    SDPE = "sdpe"

    @property
    def fractionated(self) -> bool:
        return self in (Method.CMC1, Method.CMC2, Method.NDPE, Method.SDPE)


class ModelKind(str, Enum):
    BETA_BERNOULLI = "beta_bernoulli"
    MVN_KNOWN_SIGMA = "mvn_known_sigma"
    MVN_NIW = "mvn_niw"
    LOGISTIC = "logistic"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PriorConfig(_Strict):
    """Prior hyperparameters; only the fields of the scenario's family are used."""

    a: float = 1.0
    b: float = 1.0
    scale: Optional[float] = None
    kappa: float = 0.0
    nu: float = 0.0
    psi_scale: float = 0.0


class DataConfig(_Strict):
    design: Literal[
        "single_success", "heterogeneous", "gaussian", "grouped_logistic", "simulated_logistic"
    ]
    mu: Optional[List[float]] = None
    sigma2: Optional[List[float]] = None
    rates: List[float] = [0.5, 0.2, 0.05, 0.01]
    coefficients: List[float] = [-3.0, 1.2, -0.5, 0.8, 3.0]


class LaplaceConfig(_Strict):
    types: List[int] = []
    count: int = Field(default=1000, ge=0)
    pool_type1: bool = False
    psi_scale: float = 1.0
    nu: Optional[float] = None

    @field_validator("types")
    @classmethod
    def _known_types(cls, v: List[int]) -> List[int]:
        if any(t not in (1, 2, 3) for t in v):
            raise ValueError("Laplace types must be drawn from {1, 2, 3}")
        return sorted(set(v))


class TruthConfig(_Strict):
    draws: int = Field(default=10_000, ge=2)
    score_draws: Optional[int] = Field(default=None, ge=2)
    truth_multiplier: int = Field(default=10, ge=1)


class DpeConfig(_Strict):
    iters: Optional[int] = None
    recursive: bool = False
    bandwidth_power: float = 1.0
    clamp: bool = False


class ScenarioConfig(_Strict):
    scenario: str
    model: ModelKind
    n: int = Field(ge=1)
    d: int = Field(default=1, ge=1)
    M: int = Field(ge=1)
    partition: PartitionStrategy = PartitionStrategy.RANDOM
    prior: PriorConfig = PriorConfig()
    fractionated_prior: Optional[PriorConfig] = None
    data: DataConfig
    N_per_worker: int = Field(ge=1)
    burnin_fraction: float = Field(default=0.5, ge=0.0, lt=1.0)
    laplace: LaplaceConfig = LaplaceConfig()
    methods: List[Method] = []
    seed: int = 0
    data_seed: Optional[int] = None
    truth: TruthConfig = TruthConfig()
    dpe: DpeConfig = DpeConfig()
    kde_bandwidth: Optional[float] = Field(default=None, gt=0)
    score_coordinates: Optional[List[int]] = None
    sweep_M: List[int] = []
    sweep_N: List[int] = []
    record_runtime: bool = False

    @model_validator(mode="after")
    def _consistent(self) -> "ScenarioConfig":
        if self.M > self.n:
            raise ValueError(f"cannot split n={self.n} observations into M={self.M} parts")
        lemie = {Method.LEMIE1, Method.LEMIE2, Method.LEMIE3} & set(self.methods)
        if lemie and not self.laplace.types:
            raise ValueError("LEMIE methods need at least one Laplace type")
        if self.model is ModelKind.BETA_BERNOULLI and self.d != 1:
            raise ValueError("the beta-Bernoulli model has d = 1")
        return self

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ScenarioConfig":
        try:
            return cls.model_validate_json(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except ValidationError as e:
            raise ConfigError(f"invalid config {path}: {e}") from e

    @property
    def parameter_dim(self) -> int:
        if self.model is ModelKind.MVN_NIW:
            return self.d + self.d * (self.d + 1) // 2
        if self.model is ModelKind.LOGISTIC and self.data.design == "grouped_logistic":
            return len(self.data.coefficients)
        return self.d

    @property
    def data_dim(self) -> int:
        """Dimension entering the fractionation propriety gate."""
        return self.parameter_dim if self.model is ModelKind.LOGISTIC else self.d

    def sha256(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()


class ResultRow(NamedTuple):
    scenario: str
    method: str
    M: int
    metric: str
    value: float
    std_error: float = float("nan")
    note: str = ""

    def validate(self) -> "ResultRow":
        if self.metric not in METRICS:
            raise InvalidArgument(f"unknown metric {self.metric!r}")
        return self


class RunManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenario: str
    config: dict
    config_sha256: str
    git_describe: str
    seeds: Dict[str, Optional[int]]
    runtimes: Dict[str, float] = {}
    protocol: Dict[str, Dict[str, int]] = {}
    failed: Dict[str, str] = {}
    files: List[str] = []


@dataclass
class RunOutcome:
    rows: List[ResultRow]
    out_dir: Path
    manifest: RunManifest
    weights: Dict[str, WeightedSampleSet] = field(default_factory=dict)

    @property
    def failed(self) -> List[ResultRow]:
        return [r for r in self.rows if r.metric == "failed"]


def error_2norm(estimate: Sequence[float], truth: Sequence[float]) -> float:
    """Euclidean distance between an estimate and the true value."""
    a = np.asarray(estimate, dtype=float).ravel()
    b = np.asarray(truth, dtype=float).ravel()
    if a.shape != b.shape:
        raise InvalidArgument(f"length mismatch: {a.size} vs {b.size}")
    return float(np.linalg.norm(a - b))


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
            cwd=Path(__file__).parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """Generated data and the model built for it."""

    config: ScenarioConfig
    data: ObservationBlock
    parts: PartitionedData
    model: ModelSpec
    Sigma_known: Optional[np.ndarray] = None

    @property
    def sampler_options(self) -> dict:
        if self.config.model is ModelKind.MVN_KNOWN_SIGMA:
            return {"Sigma_known": self.Sigma_known}
        if self.config.model is ModelKind.LOGISTIC:
            return {"burnin_fraction": self.config.burnin_fraction}
        return {}


def _bernoulli_data(config: ScenarioConfig, rng: np.random.Generator) -> ObservationBlock:
    x = np.zeros(config.n)
    if config.data.design == "single_success":
        x[rng.integers(config.n)] = 1.0
    elif config.data.design == "heterogeneous":
        x[: config.n // 2] = 1.0
    else:
        raise ConfigError(f"design {config.data.design} does not fit the beta-Bernoulli model")
    return observations(["x"], x)


def _gaussian_data(config: ScenarioConfig, rng: np.random.Generator):
    d = config.d
    sigma2 = (
        np.asarray(config.data.sigma2, dtype=float)
        if config.data.sigma2 is not None
        else rng.gamma(10.0, 1.0, size=d)
    )
    mu = (
        np.asarray(config.data.mu, dtype=float)
        if config.data.mu is not None
        else rng.normal(0.0, np.sqrt(0.5 * sigma2))
    )
    if sigma2.shape != (d,) or mu.shape != (d,):
        raise ConfigError(f"data.mu and data.sigma2 must have length d={d}")
    X = mu + rng.standard_normal((config.n, d)) * np.sqrt(sigma2)
    return observations([f"x_{k}" for k in range(d)], X), np.diag(sigma2)


def group_rows(block: ObservationBlock) -> ObservationBlock:
    """Collapse identical predictor rows into (c trials, y successes) groups."""
    X = block.columns_matching("x_")
    c, y = block.column("c"), block.column("y")
    unique, inverse = np.unique(X, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    counts = np.bincount(inverse, weights=c, minlength=unique.shape[0])
    successes = np.bincount(inverse, weights=y, minlength=unique.shape[0])
    names = [col for col in block.columns if col.startswith("x_")]
    return observations(names + ["c", "y"], np.column_stack([unique, counts, successes]))


def _logistic_data(config: ScenarioConfig, rng: np.random.Generator) -> ObservationBlock:
    n = config.n
    if config.data.design == "grouped_logistic":
        rates = np.asarray(config.data.rates)
        theta = np.asarray(config.data.coefficients)
        if theta.size != rates.size + 1:
            raise ConfigError("need one coefficient per predictor plus the intercept")
        X = np.column_stack([np.ones(n), (rng.random((n, rates.size)) < rates).astype(float)])
    elif config.data.design == "simulated_logistic":
        X = rng.standard_normal((n, config.d))
        theta = rng.standard_normal(config.d)
    else:
        raise ConfigError(f"design {config.data.design} does not fit the logistic model")
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-(X @ theta)))).astype(float)
    names = [f"x_{k}" for k in range(X.shape[1])]
    return observations(names + ["c", "y"], np.column_stack([X, np.ones(n), y]))


def build_scenario(config: ScenarioConfig) -> Scenario:
    """Generate the data, split it and build the model with the original prior."""
    data_seed = config.seed if config.data_seed is None else config.data_seed
    rng = as_generator(data_seed, "data")
    Sigma_known = None
    if config.model is ModelKind.BETA_BERNOULLI:
        data = _bernoulli_data(config, rng)
        model = beta_bernoulli_model(BetaParams(config.prior.a, config.prior.b))
    elif config.model is ModelKind.MVN_KNOWN_SIGMA:
        data, Sigma_known = _gaussian_data(config, rng)
        prior = (
            MvnPrior.flat(config.d)
            if config.prior.scale is None
            else MvnPrior.isotropic(config.d, config.prior.scale)
        )
        model = mvn_known_sigma_model(Sigma_known, prior)
    elif config.model is ModelKind.MVN_NIW:
        data, _ = _gaussian_data(config, rng)
        model = mvn_niw_model(
            NIWParams(
                np.zeros(config.d),
                config.prior.kappa,
                config.prior.psi_scale * np.eye(config.d),
                config.prior.nu,
            )
        )
    else:
        data = _logistic_data(config, rng)
        p = data.columns_matching("x_").shape[1]
        model = logistic_model(MvnPrior.isotropic(p, config.prior.scale or 2.5))

    label = "x" if config.partition is PartitionStrategy.BY_LABEL and "x" in data.columns else None
    parts = partition_data(data, config.M, config.partition, data_seed, label)
    if config.model is ModelKind.LOGISTIC and config.data.design == "grouped_logistic":
        parts = PartitionedData(tuple(group_rows(p) for p in parts.parts), parts.partition_seed)
        data = group_rows(data)
    return Scenario(config, data, parts, model, Sigma_known)


def fractionated_model(scenario: Scenario) -> ModelSpec:
    config = scenario.config
    base = scenario.model
    if config.fractionated_prior is not None:
        override = config.fractionated_prior
        if config.model is ModelKind.BETA_BERNOULLI:
            base = with_prior(base, BetaParams(override.a, override.b))
        elif config.model is ModelKind.MVN_NIW:
            d = config.d
            base = with_prior(
                base, NIWParams(np.zeros(d), override.kappa, override.psi_scale * np.eye(d), override.nu)
            )
    return with_prior(base, fractionate_prior(base.prior, config.M).params)


# ---------------------------------------------------------------------------
# Truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Truth:
    """Reference posterior summaries.

    ``draws`` cover the scored coordinates only; ``log_density`` and
    ``entropy`` are None when the posterior is only known through a chain.
    """

    mean: np.ndarray
    q025: np.ndarray
    q975: np.ndarray
    draws: ParamDraws
    full_draws: ParamDraws
    coordinates: Tuple[int, ...]
    log_density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    entropy: Optional[float] = None
    vanilla: Optional[Callable[[int], ParamDraws]] = None

    def quantiles(self, prob: float) -> np.ndarray:
        return self.q025 if prob == 0.025 else self.q975


def _draw_quantiles(draws: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.quantile(draws, 0.025, axis=0), np.quantile(draws, 0.975, axis=0)


def build_truth(scenario: Scenario) -> Truth:
    config = scenario.config
    data = scenario.data
    seed = config.seed
    N = config.truth.draws
    coords = tuple(config.score_coordinates or range(scenario.model.parameter_dim))
    if config.model is ModelKind.MVN_NIW and config.score_coordinates is None:
        coords = tuple(range(config.d))

    if config.model is ModelKind.BETA_BERNOULLI:
        prior = scenario.model.prior
        x = data.column("x")
        s, n = int(x.sum()), x.size
        post = stats.beta(prior.a + s, prior.b + n - s)
        full = sample_beta_posterior(prior, s, n, N, as_generator(seed, "truth"))
        return Truth(
            mean=np.array([post.mean()]),
            q025=np.array([post.ppf(0.025)]),
            q975=np.array([post.ppf(0.975)]),
            draws=full,
            full_draws=full,
            coordinates=coords,
            log_density=lambda t: post.logpdf(np.asarray(t)[:, 0]),
            entropy=beta_entropy(prior.a + s, prior.b + n - s),
            vanilla=lambda k: sample_beta_posterior(prior, s, n, k, as_generator(seed, "vanilla")),
        )

    if config.model is ModelKind.MVN_KNOWN_SIGMA:
        prior = scenario.model.prior
        X = data.columns_matching("x_")
        mean, cov = mvn_known_sigma_posterior(prior, scenario.Sigma_known, X)
        sd = np.sqrt(np.diag(cov))
        full = sample_mvn_known_sigma_posterior(
            prior, scenario.Sigma_known, X, N, as_generator(seed, "truth")
        )
        sub = np.array(coords)
        L_sub = cholesky(cov[np.ix_(sub, sub)], "posterior marginal covariance")
        return Truth(
            mean=mean,
            q025=mean + stats.norm.ppf(0.025) * sd,
            q975=mean + stats.norm.ppf(0.975) * sd,
            draws=ParamDraws(full.draws[:, sub], full.source, full.seed_trace),
            full_draws=full,
            coordinates=coords,
            log_density=lambda t: mvn_logpdf(t, mean[sub], L_sub),
            entropy=mvn_entropy(L_sub),
            vanilla=lambda k: sample_mvn_known_sigma_posterior(
                prior, scenario.Sigma_known, X, k, as_generator(seed, "vanilla")
            ),
        )

    if config.model is ModelKind.MVN_NIW:
        prior = scenario.model.prior
        X = data.columns_matching("x_")
        post = niw_posterior(prior, X)
        d = config.d
        full = sample_niw_posterior(prior, X, N, as_generator(seed, "truth"), truth=True)
        df = post.nu - d + 1.0
        t_marginal = stats.multivariate_t(loc=post.mu0, shape=post.Psi / (post.kappa * df), df=df)
        mean = np.concatenate([post.mu0, full.draws[:, d:].mean(axis=0)])
        if post.nu > d + 1:
            mean[d:] = vech(post.Psi / (post.nu - d - 1.0))
        q025, q975 = _draw_quantiles(full.draws)
        mu_only = coords == tuple(range(d))
        return Truth(
            mean=mean,
            q025=q025,
            q975=q975,
            draws=ParamDraws(full.draws[:, list(coords)], full.source, full.seed_trace),
            full_draws=full,
            coordinates=coords,
            log_density=(lambda t: np.atleast_1d(t_marginal.logpdf(t))) if mu_only else None,
            vanilla=lambda k: sample_niw_posterior(
                prior, X, k, as_generator(seed, "vanilla"), truth=True
            ),
        )

    prior = scenario.model.prior
    retained = config.truth.truth_multiplier * config.N_per_worker
    iters = int(round(retained / (1.0 - config.burnin_fraction)))
    logger.info(f"🚀 Reference chain: {iters} sweeps on the full data")
    chain = logistic_gibbs(data, prior, iters, iters - retained, as_generator(seed, "truth"), truth=True)
    half = chain.N // 2
    q025, q975 = _draw_quantiles(chain.draws)
    scored = chain.draws[:half][:, list(coords)]
    return Truth(
        mean=chain.draws.mean(axis=0),
        q025=q025,
        q975=q975,
        draws=ParamDraws(scored, chain.source, chain.seed_trace),
        full_draws=chain,
        coordinates=coords,
        vanilla=lambda k: chain.take(np.arange(half, min(chain.N, half + k))),
    )


# ---------------------------------------------------------------------------
# Running a scenario
# ---------------------------------------------------------------------------


@dataclass
class _Pools:
    """Everything the methods draw on, produced by one pass over the workers.

    When the main round fails ``main`` is None and ``protocol_error`` holds the
    cause; every method then fails with it.
    """

    main: Optional[ProtocolRound]
    extended: Optional[ProtocolRound]
    laplace: Dict[int, LaplaceApprox]
    fractionated: List[ParamDraws]
    fractionation_error: Optional[LemieError] = None
    protocol_error: Optional[LemieError] = None


async def _main_rounds(
    fed: Federation, config: ScenarioConfig, options: dict, methods: Sequence[Method]
) -> Tuple[ProtocolRound, ProtocolRound, Dict[int, LaplaceApprox]]:
    local = await fed.draw_local_posteriors(config.N_per_worker, config.seed, **options)
    main = await fed.in_out_in(local)
    laplace: Dict[int, LaplaceApprox] = {}
    extended = main
    if config.laplace.types and any(m.value.startswith("lemie") for m in methods):
        d = main.pooled.p
        laplace = build_laplace(
            main.pooled,
            config.laplace.types,
            Psi=config.laplace.psi_scale * np.eye(d),
            nu=config.laplace.nu,
        )
        extra = laplace_draws(
            laplace, config.laplace.count, config.seed, main.pooled, config.laplace.pool_type1
        )
        extended = await fed.extension_round(main.pooled, main.loglik, extra)
    return main, extended, laplace


async def _run_protocols(scenario: Scenario, settings: RuntimeSettings, methods: Sequence[Method]):
    config = scenario.config
    options = scenario.sampler_options
    try:
        async with Federation(scenario.model, scenario.parts, settings) as fed:
            main, extended, laplace = await _main_rounds(fed, config, options, methods)
    except LemieError as e:
        logger.error(f"❌ Main protocol round failed: {e}")
        return _Pools(None, None, {}, [], protocol_error=e)

    fractionated: List[ParamDraws] = []
    error: Optional[LemieError] = None
    if any(m.fractionated for m in methods):
        try:
            require_fractionated_propriety(config.data_dim, config.n, config.M)
            async with Federation(fractionated_model(scenario), scenario.parts, settings) as fed:
                fractionated = await fed.draw_local_posteriors(
                    config.N_per_worker, config.seed, "fractionated_posterior", **options
                )
        except LemieError as e:
            logger.warning(f"⚠️  Fractionated local posteriors unavailable: {e}")
            error = e
    return _Pools(main, extended, laplace, fractionated, error)


def _apply_method(
    method: Method, scenario: Scenario, pools: _Pools, truth: Truth, settings: RuntimeSettings
) -> Tuple[WeightedSampleSet, Optional[DpeResult]]:
    if pools.protocol_error is not None:
        raise pools.protocol_error
    config = scenario.config
    main = pools.main
    chunk = settings.chunk_size
    if method is Method.NAIVE:
        return naive_estimate(main.pooled).weights, None
    if method is Method.VANILLA:
        if truth.vanilla is None:
            raise InvalidArgument("no direct posterior draws for this scenario")
        return uniform_weights(truth.vanilla(main.pooled.N), Scheme.VANILLA), None
    if method in (Method.MIE1, Method.MIE2, Method.MIE3):
        ps = ProposalSet.build(main.pooled, main.loglik, scenario.model, chunk_size=chunk)
        if method is Method.MIE1:
            return mie1_estimate(ps).weights, None
        if method is Method.MIE2:
            return mie2_estimate(ps).weights, None
        return mie3_estimate(ps, seed=config.seed).weights, None
    if method in (Method.LEMIE1, Method.LEMIE2, Method.LEMIE3):
        ext = pools.extended
        variant = int(method.value[-1])
        est = lemie_estimate(
            variant, ext.pooled, ext.loglik, scenario.model, pools.laplace, seed=config.seed, chunk_size=chunk
        )
        return est.weights, None

    if pools.fractionation_error is not None:
        raise pools.fractionation_error
    local = pools.fractionated
    if method in (Method.CMC1, Method.CMC2):
        return uniform_weights(cmc_pool(local, method.value), Scheme(method.value)), None
    clamp = (0.0, 1.0) if config.dpe.clamp and config.model is ModelKind.BETA_BERNOULLI else None
    kwargs = dict(
        iters=config.dpe.iters,
        seed=config.seed,
        recursive=config.dpe.recursive,
        in_support=scenario.model.in_support,
        clamp_bounds=clamp,
    )
    if method is Method.NDPE:
        result = ndpe_sample(local, **kwargs)
    else:
        result = sdpe_sample(local, bandwidth_power=config.dpe.bandwidth_power, **kwargs)
    return uniform_weights(result.draws, Scheme(method.value)), result


def _score_draws(truth: Truth, config: ScenarioConfig) -> np.ndarray:
    draws = truth.draws.draws
    limit = config.truth.score_draws
    return draws if limit is None else draws[:limit]


def _kde(ws: WeightedSampleSet, truth: Truth, config: ScenarioConfig) -> WeightedKde:
    bandwidth = config.kde_bandwidth if len(truth.coordinates) == 1 else None
    return WeightedKde(ws, bandwidth, coordinates=truth.coordinates)


def _method_rows(
    method: Method,
    ws: WeightedSampleSet,
    dpe: Optional[DpeResult],
    truth: Truth,
    config: ScenarioConfig,
) -> List[ResultRow]:
    def row(metric: str, value: float, se: float = float("nan"), note: str = "") -> ResultRow:
        return ResultRow(config.scenario, method.value, config.M, metric, float(value), float(se), note).validate()

    p = ws.draws.p
    rows = [row("err_mean", error_2norm(weighted_average(ws, None), truth.mean))]
    for metric, prob in (("err_q025", 0.025), ("err_q975", 0.975)):
        q = [weighted_quantile(ws, k, prob) for k in range(p)]
        rows.append(row(metric, error_2norm(q, truth.quantiles(prob))))

    kde = _kde(ws, truth, config)
    points = _score_draws(truth, config)
    if truth.entropy is not None:
        score = kl_divergence(points, kde.log_density, entropy_of_truth=truth.entropy)
        rows.append(row("kl", score.value, score.std_error, "infinite" if score.infinite else ""))
    elif truth.log_density is not None:
        score = kl_divergence(points, kde.log_density, truth_log_density=truth.log_density)
        rows.append(row("kl", score.value, score.std_error, "infinite" if score.infinite else ""))
    else:
        score = cross_entropy(points, kde.log_density)
        rows.append(row("cross_entropy", score.value, score.std_error, "infinite" if score.infinite else ""))

    if ws.scheme.value.startswith(("mie", "lemie")):
        fit = fit_gpd_khat(ws.log_weights)
        rows.append(row("ess", ess(ws)))
        rows.append(row("khat", fit.khat, note=";".join(fit.flags)))
    if dpe is not None:
        rows.append(row("acceptance_rate", dpe.acceptance_rate))
        rows.append(row("out_of_support", dpe.out_of_support))
    return rows


def _write_plot_data(
    out_dir: Path, method: str, ws: WeightedSampleSet, truth: Truth, config: ScenarioConfig
) -> List[str]:
    written = []
    coords = truth.coordinates
    kde = _kde(ws, truth, config)
    ref = truth.draws.draws
    if len(coords) == 1:
        lo, hi = np.quantile(ref[:, 0], [0.001, 0.999])
        grid = np.linspace(lo, hi, 512)
        name = f"density_{method}.txt"
        write_columns(out_dir / name, ["x", "density"], [grid, kde.density(grid[:, None])])
        written.append(name)
        probs = np.round(np.arange(1, 100) / 100.0, 2)
        sub = marginal(ws, coords)
        truth_q = np.quantile(ref[:, 0], probs)
        method_q = [weighted_quantile(sub, 0, pr) for pr in probs]
        name = f"qq_{method}.txt"
        write_columns(out_dir / name, ["prob", "truth", "method"], [probs, truth_q, method_q])
        written.append(name)
    else:
        lo = np.quantile(ref[:, :2], 0.001, axis=0)
        hi = np.quantile(ref[:, :2], 0.999, axis=0)
        gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], 60), np.linspace(lo[1], hi[1], 60))
        points = np.column_stack([gx.ravel(), gy.ravel()])
        pair = WeightedKde(marginal(ws, [coords[0], coords[1]]))
        name = f"contour_{method}.txt"
        write_columns(out_dir / name, ["x", "y", "density"], [points[:, 0], points[:, 1], pair.density(points)])
        written.append(name)
    return written


def write_results(path: Path, rows: Sequence[ResultRow]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for r in rows:
        writer.writerow([r.scenario, r.method, r.M, r.metric, repr(r.value), repr(r.std_error), r.note])
    path.write_text(buffer.getvalue())


def read_results(path: Path) -> List[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            ResultRow(
                r["scenario"], r["method"], int(r["M"]), r["metric"],
                float(r["value"]), float(r["std_error"]), r["note"],
            )
            for r in reader
        ]


def _rounds(pools: _Pools) -> Dict[str, ProtocolRound]:
    if pools.main is None:
        return {}
    if pools.extended is pools.main:
        return {"main": pools.main}
    return {"main": pools.main, "extension": pools.extended}


def _protocol_rows(config: ScenarioConfig, rounds: Dict[str, ProtocolRound]) -> List[ResultRow]:
    rows = []
    for stage, r in rounds.items():
        for metric, value in (("protocol_messages", len(r.transcript)), ("protocol_bytes", r.byte_count)):
            rows.append(ResultRow(config.scenario, "protocol", config.M, metric, float(value), note=stage))
    return rows


def run_scenario(
    config: ScenarioConfig,
    out_dir: Optional[Union[str, Path]] = None,
    settings: Optional[RuntimeSettings] = None,
    plots: bool = True,
) -> RunOutcome:
    """Run every requested method on one scenario and write its outputs.

    Failures of individual methods (improper posteriors, degenerate weights,
    positivity violations) become ``failed`` rows; the run carries on.
    """
    settings = settings or RuntimeSettings()
    out = Path(out_dir or settings.out_dir) / config.scenario
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        scenario=config.scenario,
        config=json.loads(config.model_dump_json()),
        config_sha256=config.sha256(),
        git_describe=git_describe(),
        seeds={"seed": config.seed, "data_seed": config.data_seed},
    )
    rows: List[ResultRow] = []
    weights: Dict[str, WeightedSampleSet] = {}
    methods = list(dict.fromkeys(config.methods))
    logger.info(f"🚀 Running {config.scenario}: M={config.M}, methods={[m.value for m in methods]}")

    if methods:
        scenario = build_scenario(config)
        write_partition_manifest(out / "partition.json", scenario.parts)
        truth = build_truth(scenario)
        pools = asyncio.run(_run_protocols(scenario, settings, methods))
        rounds = _rounds(pools)
        write_transcript(out / "transcript.jsonl", [m for r in rounds.values() for m in r.transcript])
        manifest.protocol = {
            stage: {"messages": len(r.transcript), "bytes": r.byte_count} for stage, r in rounds.items()
        }
        rows.extend(_protocol_rows(config, rounds))

        for method in methods:
            started = time.perf_counter()
            try:
                ws, dpe = _apply_method(method, scenario, pools, truth, settings)
                method_rows = _method_rows(method, ws, dpe, truth, config)
                if plots:
                    manifest.files.extend(_write_plot_data(out, method.value, ws, truth, config))
                    write_weighted(out / f"weights_{method.value}.csv", ws)
                    manifest.files.append(f"weights_{method.value}.csv")
                weights[method.value] = ws
            except LemieError as e:
                logger.error(f"❌ {method.value} failed: {e}")
                manifest.failed[method.value] = str(e)
                method_rows = [ResultRow(config.scenario, method.value, config.M, "failed", 1.0, note=str(e))]
            elapsed = time.perf_counter() - started
            manifest.runtimes[method.value] = elapsed
            if config.record_runtime:
                method_rows.append(ResultRow(config.scenario, method.value, config.M, "runtime_s", elapsed))
            rows.extend(method_rows)
            logger.info(f"✅ {method.value} done in {elapsed:.1f}s")

    write_results(out / "results.csv", rows)
    manifest.files[:0] = ["results.csv"]
    (out / "manifest.json").write_text(manifest.model_dump_json(indent=2))
    logger.info(f"📊 {len(rows)} result rows written to {out}")
    return RunOutcome(rows, out, manifest, weights)


def sweep_configs(config: ScenarioConfig) -> List[ScenarioConfig]:
    """One config per (M, N) grid point; an empty grid keeps the base value."""
    Ms = config.sweep_M or [config.M]
    Ns = config.sweep_N or [config.N_per_worker]
    out = []
    for N in Ns:
        for M in Ms:
            suffix = f"M{M}" if not config.sweep_N else f"M{M}_N{N}"
            update = {"M": M, "N_per_worker": N, "scenario": f"{config.scenario}/{suffix}"}
            out.append(ScenarioConfig.model_validate({**config.model_dump(), **update}))
    return out


def sweep(
    configs: Union[ScenarioConfig, Sequence[ScenarioConfig]],
    out_dir: Optional[Union[str, Path]] = None,
    settings: Optional[RuntimeSettings] = None,
) -> RunOutcome:
    """Run a grid of scenarios and emit the combined table plus metric-vs-M curves."""
    if isinstance(configs, ScenarioConfig):
        base = configs
        configs = sweep_configs(configs)
    else:
        configs = list(configs)
        base = configs[0]
    scenario_ids = {c.scenario.split("/")[0] for c in configs}
    if len(scenario_ids) != 1:
        raise ConfigError(f"sweep mixes scenarios {sorted(scenario_ids)}")
    settings = settings or RuntimeSettings()
    root = Path(out_dir or settings.out_dir)
    rows: List[ResultRow] = []
    manifests = []
    for config in configs:
        outcome = run_scenario(config, root, settings, plots=False)
        rows.extend(outcome.rows)
        manifests.append(outcome.manifest)

    top = root / base.scenario.split("/")[0]
    write_results(top / "results.csv", rows)
    files = ["results.csv"]
    metrics = sorted({r.metric for r in rows if r.metric not in ("failed",)})
    for metric in metrics:
        picked = [r for r in rows if r.metric == metric and r.method != "protocol"]
        if not picked:
            continue
        name = f"curve_{metric}.txt"
        write_columns(
            top / name,
            ["method", "M", "value", "std_error"],
            [
                [r.method for r in picked],
                [r.M for r in picked],
                [r.value for r in picked],
                [r.std_error for r in picked],
            ],
        )
        files.append(name)
    manifest = RunManifest(
        scenario=base.scenario.split("/")[0],
        config=json.loads(base.model_dump_json()),
        config_sha256=base.sha256(),
        git_describe=git_describe(),
        seeds={"seed": base.seed, "data_seed": base.data_seed},
        runtimes={f"{m.scenario}:{k}": v for m in manifests for k, v in m.runtimes.items()},
        failed={f"{m.scenario}:{k}": v for m in manifests for k, v in m.failed.items()},
        files=files,
    )
    (top / "manifest.json").write_text(manifest.model_dump_json(indent=2))
    return RunOutcome(rows, top, manifest)


def truth_summary(config: ScenarioConfig, out_dir: Optional[Union[str, Path]] = None) -> dict:
    """Write reference draws and their mean and 2.5%/97.5% quantiles."""
    scenario = build_scenario(config)
    truth = build_truth(scenario)
    out = Path(out_dir or RuntimeSettings().out_dir) / config.scenario
    out.mkdir(parents=True, exist_ok=True)
    write_draws(out / "truth_draws.csv", truth.full_draws, model=scenario.model.name, seed=config.seed)
    summary = {
        "scenario": config.scenario,
        "mean": truth.mean.tolist(),
        "q025": truth.q025.tolist(),
        "q975": truth.q975.tolist(),
        "N": truth.full_draws.N,
    }
    (out / "truth_summary.json").write_text(json.dumps(summary, indent=2))
    return summary
