"""
Exception hierarchy for partitioned-data inference.

Every failure raised by the library derives from ``LemieError`` so that the
experiment runner can record it as a failed row and keep going.
"""

from typing import Sequence

import numpy as np


class LemieError(Exception):
    """Base class for all library errors."""


class ContractViolation(LemieError):
    """A model evaluation broke its contract (e.g. returned NaN)."""


class InvalidArgument(LemieError, ValueError):
    """An argument is outside the operation's domain."""


class ProtocolError(LemieError):
    """Malformed or out-of-order traffic in the in-out-in protocol."""


class DecompositionError(LemieError, np.linalg.LinAlgError):
    """A matrix that must be positive definite is not."""


class ProprietyError(LemieError):
    """A posterior would be improper for the given data and prior."""

    def __init__(self, bound: str):
        super().__init__(f"posterior propriety violated: requires {bound}")
        self.bound = bound


class DegenerateBlockError(LemieError):
    """Every importance weight in one proposal block is zero."""

    def __init__(self, component: int):
        super().__init__(f"all log-weights are -inf in proposal block {component}")
        self.component = component


class PositivityError(LemieError):
    """The mixture proposal density vanishes at some pooled draws."""

    def __init__(self, draw_indices: Sequence[int]):
        shown = list(draw_indices)[:10]
        super().__init__(
            f"mixture density is zero at {len(draw_indices)} draw(s), first: {shown}"
        )
        self.draw_indices = list(draw_indices)


class LaplaceConstructionError(LemieError):
    """A Laplace approximation could not be built even with the diagonal fallback."""


class ConfigError(LemieError):
    """Invalid scenario configuration or runtime setting."""
