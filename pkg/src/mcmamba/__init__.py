"""Multichannel Mamba speech enhancement on a small numpy autodiff core."""

from .dsp import ComplexSpectrogram, StftConfig, istft, stft
from .model import FULL_CONFIG, TINY_CONFIG, McMambaConfig, McMambaModel

__version__ = "0.1.0"

__all__ = [
    "ComplexSpectrogram",
    "StftConfig",
    "stft",
    "istft",
    "McMambaConfig",
    "McMambaModel",
    "FULL_CONFIG",
    "TINY_CONFIG",
]
