"""Clustering-aware regression of axial neutron-flux profiles.

Core types live in :mod:`fluxlattice.data_model`; the batch study is driven
by :mod:`fluxlattice.pipeline` or the ``fluxlattice`` command.
"""

from .data_model import (
    Clustering,
    CycleDataset,
    FluxProfile,
    IngestConfig,
    UqPrediction,
    load_dataset,
    save_dataset,
)
from .errors import FluxLatticeError, StageDependencyError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "Clustering",
    "CycleDataset",
    "FluxProfile",
    "FluxLatticeError",
    "IngestConfig",
    "StageDependencyError",
    "UqPrediction",
    "ValidationError",
    "load_dataset",
    "save_dataset",
    "__version__",
]
