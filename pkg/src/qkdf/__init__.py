"""Decoy-state BB84 QKD toolkit.

Subpackages cover the full chain from physical-layer modelling to final
secret keys: finite-key rate evaluation (``finitekey``), a channel and
detector statistics model (``channel``), protocol parameter optimization
(``optimizer``), the two-party sifting engine and wire protocol
(``session``, ``wire``), Cascade error reconciliation (``cascade``),
privacy amplification (``pa``), and a polarization-feedback simulator
(``polar``).
"""

from qkdf.finitekey import (
    SecurityParams,
    ProtocolParams,
    ObservedTallies,
    DecoyBounds,
    KeyRateResult,
    InsufficientStatistics,
    binary_entropy,
    hoeffding_delta,
    poisson_tau,
    estimate_decoy_bounds,
    secret_key_length,
)
from qkdf.channel import ChannelDetectorModel

__all__ = [
    "SecurityParams",
    "ProtocolParams",
    "ObservedTallies",
    "DecoyBounds",
    "KeyRateResult",
    "InsufficientStatistics",
    "binary_entropy",
    "hoeffding_delta",
    "poisson_tau",
    "estimate_decoy_bounds",
    "secret_key_length",
    "ChannelDetectorModel",
]

__version__ = "0.1.0"
