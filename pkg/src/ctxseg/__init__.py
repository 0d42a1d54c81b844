"""Zero-shot semantic segmentation with context-conditioned feature generation.

A pixel-level contextual module turns backbone features into per-pixel
latent codes; a generator conditioned on (latent code, category embedding)
synthesizes features for categories that were never labeled, and the
classifier is finetuned on them so it can segment those categories at test
time. Everything runs on a small deterministic float64 autodiff engine.
"""

from .autodiff import Parameter, Tape, Tensor, backward, sgd_step
from .rng import RngState
from .constants import IGNORE

__all__ = [
    "IGNORE",
    "Parameter",
    "RngState",
    "Tape",
    "Tensor",
    "backward",
    "sgd_step",
]

__version__ = "0.1.0"
