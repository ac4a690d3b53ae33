"""Few-shot class-incremental learning with margin-aware adapter merging.

A frozen toy transformer with low-rank key/value adapters is trained twice on
the base task (with and without an additive cosine margin), the two adapter
sets are merged by Fisher importance, and later few-shot sessions grow a
prototype classifier that can be recalibrated on replayed embeddings.
"""

__version__ = "0.1.0"

from .errors import (
    CorruptionError,
    DegenerateInputError,
    InputError,
    MarginMergeError,
    NumericError,
    ProtocolError,
    ShapeError,
)
from .numerics import SeededRng
from .config import default_config, load_config, validate_config
from .datagen import SyntheticSpec, generate, load_fixture, save_fixture
from .protocol import run_pipeline

__all__ = [
    "CorruptionError",
    "DegenerateInputError",
    "InputError",
    "MarginMergeError",
    "NumericError",
    "ProtocolError",
    "ShapeError",
    "SeededRng",
    "default_config",
    "load_config",
    "validate_config",
    "SyntheticSpec",
    "generate",
    "load_fixture",
    "save_fixture",
    "run_pipeline",
]
