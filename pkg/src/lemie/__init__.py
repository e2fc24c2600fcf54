"""
Multiple importance estimators for Bayesian inference on partitioned data.

Workers hold disjoint parts of the data and sample their local posteriors;
the pooled draws and per-part log-likelihoods are enough to weight every
draw towards the full-data posterior, optionally enriched with draws from
Gaussian (Laplace-style) approximations.
"""

from .errors import (
    ConfigError,
    ContractViolation,
    DecompositionError,
    DegenerateBlockError,
    InvalidArgument,
    LaplaceConstructionError,
    LemieError,
    PositivityError,
    ProprietyError,
    ProtocolError,
)
from .mie import ProposalSet, Scheme, WeightedSampleSet, mie1_estimate, mie2_estimate, mie3_estimate
from .model import ModelSpec, ObservationBlock, ParamDraws, PartitionedData, partition_data

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractViolation",
    "DecompositionError",
    "DegenerateBlockError",
    "InvalidArgument",
    "LaplaceConstructionError",
    "LemieError",
    "ModelSpec",
    "ObservationBlock",
    "ParamDraws",
    "PartitionedData",
    "PositivityError",
    "ProposalSet",
    "ProprietyError",
    "ProtocolError",
    "Scheme",
    "WeightedSampleSet",
    "mie1_estimate",
    "mie2_estimate",
    "mie3_estimate",
    "partition_data",
]
