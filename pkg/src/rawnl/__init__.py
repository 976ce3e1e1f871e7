"""Nonlocal feature matching and filtering network for RAW image denoising, in plain NumPy."""

from .config import NetworkConfig, build_awgn_variant
from .network import count_params, denoise, forward, init_params

__version__ = "0.1.0"

__all__ = ["NetworkConfig", "build_awgn_variant", "count_params", "denoise", "forward", "init_params"]
