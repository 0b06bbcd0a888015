"""Image-quality metrics on (3, H, W) frames in [0, 1]."""

import math

import numpy as np

from .errors import ShapeError

PSNR_CAP = 99.0


def _check(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"frame dims differ: {list(a.shape)} vs {list(b.shape)}")


def psnr(a, b):
    """10 log10(1 / MSE) with peak 1; identical frames report the 99 dB cap."""
    _check(a, b)
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def interpolation_error(predicted, truth):
    """Plain RMS difference on the 0-255 scale (Middlebury-style IE, no gradient normalization)."""
    _check(predicted, truth)
    diff = (np.asarray(predicted, np.float64) - np.asarray(truth, np.float64)) * 255.0
    return float(np.sqrt(np.mean(diff ** 2)))
