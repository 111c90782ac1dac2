"""Simulator and analysis toolkit for double-hash port selection tracking."""

from dhpstrack.kernel import KernelConfig, KernelState, NoiseMode, ThreeTuple, loopback_tuple

__version__ = "0.1.0"

__all__ = ["KernelConfig", "KernelState", "NoiseMode", "ThreeTuple", "loopback_tuple", "__version__"]
