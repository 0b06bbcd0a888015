"""Pixel synthesis by adaptive convolution, the training losses, and kernel diagnostics.

Patches are channel-first arrays (3, k, k). Patches used by the gradient loss
carry a one-pixel apron, i.e. they are (3, k + 2, k + 2); every function that
only needs the k x k core crops the apron off when present.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .net import KernelPair

# (dy, dx) towards the eight neighbours, row-major
DIRECTIONS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))

CENTROID_MIN_MASS = 1e-3


@dataclass
class PatchPair:
    p1: np.ndarray
    p2: np.ndarray


@dataclass
class GroundTruth:
    color: np.ndarray  # (3,)
    gradients: np.ndarray  # (8, 3), ordered as DIRECTIONS


def flip_direction_index(horizontal, vertical):
    """Permutation mapping direction i to its index after flipping the image."""
    perm = []
    for dy, dx in DIRECTIONS:
        perm.append(DIRECTIONS.index((-dy if vertical else dy, -dx if horizontal else dx)))
    return np.array(perm)


def core(patch, k):
    """Central k x k part of a patch (with or without apron)."""
    size = patch.shape[-1]
    if size == k:
        return patch
    if size != k + 2 or patch.shape[-2] != k + 2:
        raise ShapeError(f"patch dims {list(patch.shape)} do not match kernel size {k}")
    return patch[..., 1:-1, 1:-1]


def gradient_patches(patch):
    """Forward differences towards the 8 neighbours.

    ``patch`` is (..., 3, k + 2, k + 2); returns (..., 8, 3, k, k).
    """
    k = patch.shape[-1] - 2
    if k < 1 or patch.shape[-2] != patch.shape[-1]:
        raise ShapeError(f"gradient patches need a 1-pixel apron, got dims {list(patch.shape)}")
    centre = patch[..., 1:1 + k, 1:1 + k]
    grads = [patch[..., 1 + dy:1 + dy + k, 1 + dx:1 + dx + k] - centre for dy, dx in DIRECTIONS]
    return np.stack(grads, axis=-4)


def ground_truth(patch):
    """Colour and 8 neighbour differences at the centre of an odd-sized patch."""
    c = patch.shape[-1] // 2
    centre = patch[..., :, c, c]
    grads = np.stack([patch[..., :, c + dy, c + dx] - centre for dy, dx in DIRECTIONS], axis=-2)
    return GroundTruth(centre.copy(), grads)


def _check_kernel(kernel, patches):
    k = kernel.k1.shape[-1]
    if kernel.k1.shape[-2:] != (k, k) or kernel.k2.shape[-2:] != (k, k):
        raise ShapeError(f"sub-kernels must be square, got {kernel.k1.shape} and {kernel.k2.shape}")
    if patches.p1.shape != patches.p2.shape:
        raise ShapeError(f"patch dims differ: {list(patches.p1.shape)} vs {list(patches.p2.shape)}")
    return k


def synthesize_pixel(patches, kernel):
    """Convex combination of the two patches under the two sub-kernels, per channel."""
    k = _check_kernel(kernel, patches)
    p1, p2 = core(patches.p1, k), core(patches.p2, k)
    return (np.einsum("ckl,kl->c", p1, kernel.k1) + np.einsum("ckl,kl->c", p2, kernel.k2))


def color_loss(predicted, truth):
    return float(np.abs(np.asarray(predicted) - np.asarray(truth)).sum())


def synthesized_gradients(patches, kernel):
    """(8, 3) gradients of the synthesized image, obtained by filtering differentiated patches."""
    k = _check_kernel(kernel, patches)
    if patches.p1.shape[-1] != k + 2:
        raise ShapeError(f"patches {list(patches.p1.shape)} lack the 1-pixel apron around {k}x{k}")
    g1, g2 = gradient_patches(patches.p1), gradient_patches(patches.p2)
    return np.einsum("dckl,kl->dc", g1, kernel.k1) + np.einsum("dckl,kl->dc", g2, kernel.k2)


def gradient_loss(patches, kernel, truth):
    return float(np.abs(synthesized_gradients(patches, kernel) - truth.gradients).sum())


def total_loss(patches, kernel, truth, lam=1.0):
    ec = color_loss(synthesize_pixel(patches, kernel), truth.color)
    if lam == 0:
        return ec
    return ec + lam * gradient_loss(patches, kernel, truth)


def loss_gradient_wrt_kernel(patches, kernel, truth, lam=1.0):
    """Analytic d(total_loss)/dK as a (k, 2k) array; sign(0) is taken as 0."""
    _, grad = batch_loss(
        patches.p1[None], patches.p2[None], kernel.kernel[None],
        truth.color[None], truth.gradients[None], lam,
    )
    return grad[0]


def batch_loss(p1, p2, kernel, color, gradients, lam=1.0, with_grad=True):
    """Per-sample losses over a batch.

    p1, p2: (N, 3, k+2, k+2); kernel: (N, k, 2k); color: (N, 3);
    gradients: (N, 8, 3). Returns ``((total, color, grad), d_kernel)`` where
    each loss is an (N,) array and ``d_kernel`` is the gradient of each
    sample's total loss, or None when ``with_grad`` is false.
    """
    k = kernel.shape[-2]
    if p1.shape[-1] != k + 2 or p2.shape != p1.shape:
        raise ShapeError(f"patches {list(p1.shape)} need a 1-pixel apron around {k}x{k}")
    pc = np.concatenate([p1[..., 1:-1, 1:-1], p2[..., 1:-1, 1:-1]], axis=-1)
    gp = np.concatenate([gradient_patches(p1), gradient_patches(p2)], axis=-1)
    pred = np.einsum("nckl,nkl->nc", pc, kernel)
    gpred = np.einsum("ndckl,nkl->ndc", gp, kernel)
    rc = pred - color
    rg = gpred - gradients
    ec = np.abs(rc).sum(axis=-1)
    eg = np.abs(rg).sum(axis=(-1, -2))
    total = ec + lam * eg
    if not with_grad:
        return (total, ec, eg), None
    d_kernel = np.einsum("nc,nckl->nkl", np.sign(rc), pc)
    if lam != 0:
        d_kernel = d_kernel + lam * np.einsum("ndc,ndckl->nkl", np.sign(rg), gp)
    return (total, ec, eg), d_kernel


def sub_kernel_mass(kernel):
    return float(kernel.k1.sum()), float(kernel.k2.sum())


def _centroid(sub):
    mass = float(sub.sum())
    if mass < CENTROID_MIN_MASS:
        return None
    k = sub.shape[-1]
    offsets = np.arange(k) - (k - 1) / 2
    dy = float((sub.sum(axis=1) * offsets).sum() / mass)
    dx = float((sub.sum(axis=0) * offsets).sum() / mass)
    return dx, dy


def kernel_centroids(kernel):
    """Mass-weighted (dx, dy) of each sub-kernel relative to the patch centre."""
    return _centroid(kernel.k1), _centroid(kernel.k2)


def synthesize_frame(frame1, frame2, field):
    """Apply a dense kernel field to two frames.

    ``frame1``/``frame2`` are (3, H + k - 1, W + k - 1) frames already padded
    by (k - 1) / 2; ``field`` is (H, W, k, 2k). Returns (3, H, W).
    """
    h, w, k, _ = field.shape
    out = np.empty((3, h, w), dtype=np.result_type(frame1, field))
    win1 = np.lib.stride_tricks.sliding_window_view(frame1, (k, k), axis=(1, 2))
    win2 = np.lib.stride_tricks.sliding_window_view(frame2, (k, k), axis=(1, 2))
    rows = max(1, (1 << 20) // max(1, w * k * k))
    for y0 in range(0, h, rows):
        y1 = min(h, y0 + rows)
        f = field[y0:y1]
        out[:, y0:y1] = (
            np.einsum("chwkl,hwkl->chw", win1[:, y0:y1, :w], f[..., :k])
            + np.einsum("chwkl,hwkl->chw", win2[:, y0:y1, :w], f[..., k:])
        )
    return out
