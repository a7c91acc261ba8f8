"""Input-convex Kolmogorov-Arnold networks on adaptive lattices."""

from .grid import Hypercube
from .networks import (
    ICKAN,
    ICNN,
    KAN,
    PICKAN,
    CheckpointError,
    NetworkSpec,
    build_model,
    construct_max_affine_p1,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "Hypercube",
    "ICKAN",
    "ICNN",
    "KAN",
    "PICKAN",
    "CheckpointError",
    "NetworkSpec",
    "build_model",
    "construct_max_affine_p1",
    "load_checkpoint",
    "save_checkpoint",
]
__version__ = "0.1.0"
