"""Frame interpolation by per-pixel adaptive convolution kernels."""

from .net import KernelNet, KernelPair, NetworkConfig, init_network, load_checkpoint, save_checkpoint
from .infer import interpolate, interpolate_pixelwise, interpolate_recursive, interpolate_shift_stitch

__all__ = [
    "KernelNet", "KernelPair", "NetworkConfig", "init_network", "load_checkpoint",
    "save_checkpoint", "interpolate", "interpolate_pixelwise", "interpolate_recursive",
    "interpolate_shift_stitch",
]
