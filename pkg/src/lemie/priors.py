"""
Prior parameter records for the conjugate model families.

- BetaParams: Beta(a, b) on a Bernoulli success probability
- MvnPrior: N(mu0, Sigma0) on a mean vector, or flat when Sigma0 is None
- NIWParams: normal-inverse-Wishart on (mu, Sigma)
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import InvalidArgument


class PriorFamily(str, Enum):
    BETA = "beta"
    MVN = "mvn"
    NIW = "niw"
    MVN_IID = "mvn_iid"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BetaParams:
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise InvalidArgument(f"Beta parameters must be positive, got ({self.a}, {self.b})")


@dataclass(frozen=True)
class MvnPrior:
    """Gaussian prior on a mean vector; ``Sigma0=None`` means flat."""

    mu0: np.ndarray
    Sigma0: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "mu0", _frozen(np.atleast_1d(self.mu0)))
        if self.Sigma0 is not None:
            S = np.atleast_2d(np.asarray(self.Sigma0, dtype=float))
            if S.shape != (self.dim, self.dim):
                raise InvalidArgument(f"Sigma0 must be {self.dim}x{self.dim}, got {S.shape}")
            object.__setattr__(self, "Sigma0", _frozen(S))

    @property
    def dim(self) -> int:
        return int(self.mu0.shape[0])

    @property
    def is_flat(self) -> bool:
        return self.Sigma0 is None

    @classmethod
    def flat(cls, dim: int) -> "MvnPrior":
        return cls(mu0=np.zeros(dim))

    @classmethod
    def isotropic(cls, dim: int, scale: float) -> "MvnPrior":
        return cls(mu0=np.zeros(dim), Sigma0=scale**2 * np.eye(dim))


@dataclass(frozen=True)
class NIWParams:
    """NIW(mu0, kappa, Psi, nu). ``kappa = nu = 0, Psi = 0`` is the uninformative case."""

    mu0: np.ndarray
    kappa: float = 0.0
    Psi: np.ndarray = field(default=None)  # type: ignore[assignment]
    nu: float = 0.0

    def __post_init__(self):
        mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        d = mu0.shape[0]
        Psi = np.zeros((d, d)) if self.Psi is None else np.atleast_2d(self.Psi)
        if Psi.shape != (d, d):
            raise InvalidArgument(f"Psi must be {d}x{d}, got {Psi.shape}")
        if not np.allclose(Psi, Psi.T):
            raise InvalidArgument("Psi must be symmetric")
        if self.kappa < 0:
            raise InvalidArgument(f"kappa must be nonnegative, got {self.kappa}")
        object.__setattr__(self, "mu0", _frozen(mu0))
        object.__setattr__(self, "Psi", _frozen(Psi))

    @property
    def dim(self) -> int:
        return int(self.mu0.shape[0])

    @classmethod
    def uninformative(cls, dim: int) -> "NIWParams":
        return cls(mu0=np.zeros(dim))
