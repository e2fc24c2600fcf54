"""
Test fixtures for the partitioned-inference package.

Small observation blocks, partitions and pooled proposal sets shared by the
unit tests. Everything is seeded so the tests are deterministic.
"""

import asyncio
import os
import sys
from typing import List, Tuple

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", ".."))

from lemie.federation import Federation, ProtocolRound  # noqa: E402
from lemie.model import (  # noqa: E402
    ModelSpec,
    ObservationBlock,
    ParamDraws,
    PartitionedData,
    beta_bernoulli_model,
    mvn_known_sigma_model,
    observations,
    partition_data,
)
from lemie.priors import BetaParams, MvnPrior  # noqa: E402
from lemie.settings import RuntimeSettings  # noqa: E402


class DataFixtures:
    """Observation blocks and partitions."""

    @staticmethod
    def bernoulli(n: int = 200, successes: int = 60, seed: int = 0) -> ObservationBlock:
        """Bernoulli column ``x`` with exactly ``successes`` ones."""
        rng = np.random.default_rng(seed)
        x = np.zeros(n)
        x[rng.choice(n, successes, replace=False)] = 1.0
        return observations(["x"], x)

    @staticmethod
    def gaussian(n: int = 200, d: int = 2, seed: int = 1) -> Tuple[ObservationBlock, np.ndarray]:
        """Gaussian rows ``x_0..x_{d-1}`` and their (known, diagonal) covariance."""
        rng = np.random.default_rng(seed)
        sigma2 = np.linspace(1.0, 2.0, d)
        X = np.arange(1, d + 1) + rng.standard_normal((n, d)) * np.sqrt(sigma2)
        return observations([f"x_{k}" for k in range(d)], X), np.diag(sigma2)

    @staticmethod
    def logistic(n: int = 300, p: int = 2, seed: int = 2) -> ObservationBlock:
        """Ungrouped binary logistic rows with an intercept column."""
        rng = np.random.default_rng(seed)
        X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
        theta = np.linspace(-0.5, 1.0, p)
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-(X @ theta)))).astype(float)
        names = [f"x_{k}" for k in range(p)]
        return observations(names + ["c", "y"], np.column_stack([X, np.ones(n), y]))

    @staticmethod
    def split(block: ObservationBlock, M: int, seed: int = 3) -> PartitionedData:
        return partition_data(block, M, "random", seed)


class ModelFixtures:
    """Model specs used across the suites."""

    @staticmethod
    def beta(a: float = 1.0, b: float = 1.0) -> ModelSpec:
        return beta_bernoulli_model(BetaParams(a, b))

    @staticmethod
    def gaussian_flat(Sigma: np.ndarray) -> ModelSpec:
        return mvn_known_sigma_model(Sigma, MvnPrior.flat(Sigma.shape[0]))


class ProtocolFixtures:
    """Full protocol runs on tiny problems."""

    @staticmethod
    def settings() -> RuntimeSettings:
        return RuntimeSettings(workers=2, chunk_size=128)

    @staticmethod
    def beta_round(M: int = 2, N: int = 400, seed: int = 11) -> Tuple[ModelSpec, ProtocolRound]:
        """Beta-Bernoulli local draws pooled through the in-out-in protocol."""
        model = ModelFixtures.beta()
        parts = DataFixtures.split(DataFixtures.bernoulli(), M)
        federation = Federation(model, parts, ProtocolFixtures.settings())

        async def _run() -> ProtocolRound:
            async with federation:
                local = await federation.draw_local_posteriors(N, seed)
                return await federation.in_out_in(local)

        return model, asyncio.run(_run())

    @staticmethod
    def gaussian_round(
        M: int = 4, N: int = 300, seed: int = 5
    ) -> Tuple[ModelSpec, PartitionedData, np.ndarray, ProtocolRound]:
        data, Sigma = DataFixtures.gaussian()
        model = ModelFixtures.gaussian_flat(Sigma)
        parts = DataFixtures.split(data, M)
        federation = Federation(model, parts, ProtocolFixtures.settings())

        async def _run() -> ProtocolRound:
            async with federation:
                local = await federation.draw_local_posteriors(N, seed, Sigma_known=Sigma)
                return await federation.in_out_in(local)

        return model, parts, Sigma, asyncio.run(_run())


def local_sets_from(round_: ProtocolRound) -> List[ParamDraws]:
    """Per-part draw sets recovered from a pooled protocol round."""
    codes = round_.pooled.component_codes()
    return [
        round_.pooled.take(np.flatnonzero(codes == j)) for j in sorted(set(codes.tolist())) if j >= 0
    ]
