"""Desk-scale federated learning simulator with Byzantine-robust aggregation.

Updates and model parameters are flat float64 numpy arrays throughout.
"""

from fedrobust.core import (
    DimensionError,
    RngStream,
    RoundContext,
    apply_global_update,
    as_vector,
    l2_distance,
)

__all__ = [
    "DimensionError",
    "RngStream",
    "RoundContext",
    "apply_global_update",
    "as_vector",
    "l2_distance",
]

__version__ = "0.1.0"
