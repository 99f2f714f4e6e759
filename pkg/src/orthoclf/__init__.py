"""Dense orthogonal classification layers with frozen-head training.

Subpackages: orthoweights (head constructions), gradcore (reverse-mode
tape), models (encoders), losses (training objectives), attacks
(norm-bounded evaluation), data (ingestion), harness (config/CLI/drivers),
kernels (numba-or-numpy compute lanes).
"""

__version__ = "0.1.0"

from . import attacks, data, gradcore, kernels, losses, models, orthoweights

__all__ = [
    "attacks",
    "data",
    "gradcore",
    "kernels",
    "losses",
    "models",
    "orthoweights",
    "__version__",
]
