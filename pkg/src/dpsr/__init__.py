"""Streaming line-by-line super-resolution for pushbroom hyperspectral sensors."""

from .model import DpsrConfig, DpsrParams, dpsr_forward_image, dpsr_step, init_stream

__all__ = ["DpsrConfig", "DpsrParams", "dpsr_forward_image", "dpsr_step",
           "init_stream"]
__version__ = "0.1.0"
