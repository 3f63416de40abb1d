"""Unpaired frozen-section to FFPE stain transfer with cross-resolution
compensation and wavelet detail guidance."""

from .core import ImageTensor, LossReport, TrainConfig, lr_at, seed_all
from .geometry import ResolutionPair, centercrop, make_resolution_pair, resize
from .wavelet import WaveletBands, dwt2, idwt2

__version__ = "0.1.0"
