"""Motion tokenizer: VQ autoencoder over spatio-temporal pose heatmaps."""

from . import heatmap, losses, metrics, model, quantizer, tensorcore, trainer
from .tensorcore import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "heatmap",
    "losses",
    "metrics",
    "model",
    "quantizer",
    "tensorcore",
    "trainer",
    "__version__",
]
