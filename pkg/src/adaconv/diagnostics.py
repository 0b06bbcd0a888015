"""Per-pixel kernel inspection dumps."""

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .infer import pad_frame
from .net import KernelPair, stack_inputs
from .synth import CENTROID_MIN_MASS, kernel_centroids, sub_kernel_mass

CROP_THRESHOLD = 0.01
MAGNIFY = 8


def kernels_at(net, i1, i2, pixels):
    """KernelPairs for a list of (x, y) output pixels."""
    cfg = net.config
    _, h, w = i1.shape
    for x, y in pixels:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"pixel ({x}, {y}) outside {w}x{h} frame")
    r = cfg.receptive_field
    padded = stack_inputs(pad_frame(i1, cfg), pad_frame(i2, cfg)).astype(net.dtype, copy=False)
    batch = np.stack([padded[:, y:y + r, x:x + r] for x, y in pixels])
    return [KernelPair.from_kernel(k) for k in net.forward(batch, train=False)]


def heatmap(sub):
    """Mass-normalized sub-kernel scaled to 8-bit grayscale (peak -> 255).

    A sub-kernel carrying less than the centroid mass threshold renders black.
    """
    mass = float(sub.sum())
    norm = sub / mass if mass >= CENTROID_MIN_MASS else np.zeros_like(sub)
    peak = float(norm.max())
    scaled = norm / peak if peak > 0 else norm
    return np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8)


def nonzero_crop(kernel, threshold=CROP_THRESHOLD, magnify=MAGNIFY):
    """Bounding box of significant coefficients across both halves, magnified."""
    full = kernel.kernel
    k = full.shape[0]
    mask = (full >= threshold * full.max()).reshape(k, 2, k).any(axis=1)
    rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    side = np.concatenate([heatmap(kernel.k1)[r0:r1, c0:c1],
                           np.full((r1 - r0, 1), 128, np.uint8),
                           heatmap(kernel.k2)[r0:r1, c0:c1]], axis=1)
    return np.kron(side, np.ones((magnify, magnify), np.uint8)), (int(r0), int(r1), int(c0), int(c1))


def kernel_summary(kernel):
    m1, m2 = sub_kernel_mass(kernel)
    c1, c2 = kernel_centroids(kernel)
    return {"mass1": m1, "mass2": m2,
            "centroid1": None if c1 is None else list(c1),
            "centroid2": None if c2 is None else list(c2)}


def dump_kernel_heatmap(net, i1, i2, pixels, out_dir):
    """Write heatmaps, a magnified crop and a JSON sidecar per pixel; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (x, y), kernel in zip(pixels, kernels_at(net, i1, i2, pixels)):
        stem = out_dir / f"pixel_{x}_{y}"
        crop, box = nonzero_crop(kernel)
        files = {
            f"{stem}_k1.png": heatmap(kernel.k1),
            f"{stem}_k2.png": heatmap(kernel.k2),
            f"{stem}_crop.png": crop,
        }
        for path, img in files.items():
            Image.fromarray(img).save(path, format="PNG")
        info = {"x": x, "y": y, **kernel_summary(kernel), "crop_rows_cols": list(box)}
        with open(f"{stem}.json", "w") as fh:
            json.dump(info, fh, indent=2)
        written += list(files) + [f"{stem}.json"]
    return written
