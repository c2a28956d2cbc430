"""roverseg: two-stage contrastive RGB-D obstacle segmentation.

A small, dependency-light training and evaluation engine: its own
reverse-mode autodiff over numpy arrays, an encoder-decoder
segmentation network with late RGB-D fusion, a Lovasz-Softmax
segmentation loss plus a temperature-scaled contrastive alignment
term, deterministic SGD training, a procedural lunar scene generator,
and bit-exact checkpoint / dataset round trips.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DegenerateInputError,
    DomainError,
    ResolutionError,
    RoverSegError,
    ShapeError,
    StructureMismatchError,
    TrainingDivergence,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "DomainError",
    "ResolutionError",
    "RoverSegError",
    "ShapeError",
    "StructureMismatchError",
    "TrainingDivergence",
    "__version__",
]
