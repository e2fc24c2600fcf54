"""
Polya-Gamma draws for the logistic Gibbs sampler.

Sampling is delegated to ``polyagamma.random_polyagamma``, which is exact for
any positive shape and vectorised over shapes and tilts. This module adds the
argument checks, the seeded generator plumbing and the closed-form mean.
"""

import numpy as np
from polyagamma import random_polyagamma

from .errors import InvalidArgument
from .rng import SeedLike, as_generator


def polya_gamma_draw(b: int, c: float, rng: SeedLike = None) -> float:
    """A single exact PG(b, c) draw."""
    if int(b) != b or b < 1:
        raise InvalidArgument(f"PG shape must be a positive integer, got {b}")
    gen = as_generator(rng, "polya_gamma")
    return float(random_polyagamma(int(b), float(c), random_state=gen))


def polya_gamma_sums(counts: np.ndarray, c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``omega_i ~ PG(counts_i, c_i)`` for every row; rows with zero trials get 0."""
    counts = np.asarray(counts, dtype=float)
    c = np.broadcast_to(np.asarray(c, dtype=float), counts.shape)
    if np.any(counts < 0):
        raise InvalidArgument("PG shapes must be non-negative")
    out = np.zeros(counts.shape)
    live = counts > 0
    if live.any():
        out[live] = random_polyagamma(counts[live], c[live], random_state=rng)
    return out


def polya_gamma_mean(b: float, c: float) -> float:
    """E[PG(b, c)] = b / (2c) tanh(c / 2), with the c -> 0 limit b / 4."""
    if abs(c) < 1e-8:
        return b / 4.0
    return b / (2.0 * c) * np.tanh(c / 2.0)
