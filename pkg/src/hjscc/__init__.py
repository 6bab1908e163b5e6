"""Hierarchical joint source-channel coding for image transmission.

A hierarchical VAE couples per-level JSCC codecs to an AWGN channel, with
entropy-driven rate matching deciding how many symbols each spatial position
gets. Feedback-free and sequential-feedback variants share the same weights.
"""

from .channel import ChannelSpec
from .config import RunConfig, load_config, save_config
from .pipeline import HJSCCModel, TransmissionReport, psnr

__all__ = [
    "ChannelSpec",
    "RunConfig",
    "load_config",
    "save_config",
    "HJSCCModel",
    "TransmissionReport",
    "psnr",
]
