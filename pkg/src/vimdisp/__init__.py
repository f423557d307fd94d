"""Stereo disparity estimation with bidirectional selective state-space encoders.

Also provides the evaluation harness: EPE, D1, FPS, memory footprint and the
SOMER speed/memory/error score.
"""

from .errors import (
    DimensionError,
    DomainError,
    FormatError,
    NumericError,
    UnsupportedError,
    ValidationError,
)
from .metrics import BenchRecord, DisparityMap, d1, epe, somer
from .model import ModelConfig, ViMDisparity, desk_config

__version__ = "0.1.0"
