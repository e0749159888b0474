"""VIO-aided sparse reconstruction: verification, batched registration, bundle adjustment."""

from .bundle_adjust import BaConfig, adaptive_weight
from .reconstruction import BatchConfig, reconstruct
from .simulation import ScenarioConfig, evaluate_ate, generate
from .verification import PairingConfig, verify_pairs

__version__ = "0.1.0"

__all__ = [
    "BaConfig",
    "BatchConfig",
    "PairingConfig",
    "ScenarioConfig",
    "adaptive_weight",
    "evaluate_ate",
    "generate",
    "reconstruct",
    "verify_pairs",
]
