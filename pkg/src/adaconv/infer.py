"""Full-frame interpolation.

Frames are (3, H, W) arrays in [0, 1], zero-padded by (R - 1) / 2 so every
output pixel sees a full receptive field. Two paths estimate the kernel
field: one network pass per pixel, or shift-and-stitch, where the fully
convolutional network runs on f x f shifted copies of the whole padded frame
(f = 2 ** down-conv count) and each pass yields kernels on a stride-f grid.
Both paths then synthesize every pixel from the same dense kernel field.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .net import stack_inputs
from .synth import synthesize_frame


@dataclass(frozen=True)
class StitchPlan:
    down_conv_count: int
    padded_shape: tuple

    @property
    def factor(self):
        return 2 ** self.down_conv_count

    @property
    def shifts(self):
        f = self.factor
        return [(dy, dx) for dy in range(f) for dx in range(f)]


def pad_frame(frame, config):
    p = config.pad
    return np.pad(frame, ((0, 0), (p, p), (p, p)))


def _check_pair(i1, i2):
    if i1.shape != i2.shape or i1.ndim != 3 or i1.shape[0] != 3:
        raise ShapeError(f"frames must share (3, H, W) dims, got {list(i1.shape)} and {list(i2.shape)}")


def _synthesize(net, i1, i2, field):
    k = net.config.patch_size
    h = (k - 1) // 2
    pads = ((0, 0), (h, h), (h, h))
    return synthesize_frame(np.pad(i1, pads), np.pad(i2, pads), field.astype(i1.dtype, copy=False))


def kernel_field_pixelwise(net, i1, i2, chunk=256):
    """One network pass per output pixel (batched in chunks): (H, W, k, 2k)."""
    _check_pair(i1, i2)
    cfg = net.config
    r = cfg.receptive_field
    _, h, w = i1.shape
    x = stack_inputs(pad_frame(i1, cfg), pad_frame(i2, cfg)).astype(net.dtype, copy=False)
    windows = np.lib.stride_tricks.sliding_window_view(x, (r, r), axis=(1, 2))  # 6, H, W, R, R
    coords = [(y, xx) for y in range(h) for xx in range(w)]
    field = np.empty((h, w, cfg.patch_size, 2 * cfg.patch_size), net.dtype)
    for start in range(0, len(coords), chunk):
        part = coords[start:start + chunk]
        ys = np.array([c[0] for c in part])
        xs = np.array([c[1] for c in part])
        batch = windows[:, ys, xs].transpose(1, 0, 2, 3)
        field[ys, xs] = net.forward(np.ascontiguousarray(batch), train=False)
    return field


def stitch_plan(net, shape):
    cfg = net.config
    return StitchPlan(cfg.down_conv_count, (shape[1] + 2 * cfg.pad, shape[2] + 2 * cfg.pad))


def kernel_field_stitched(net, i1, i2):
    """Dense kernel field from f * f shifted full-frame passes: (H, W, k, 2k).

    The pass on the padded input cropped at (dy, dx) gives, at grid cell
    (j, i), the kernel whose receptive window starts at (dy + f j, dx + f i),
    i.e. the kernel of output pixel (dy + f j, dx + f i).
    """
    _check_pair(i1, i2)
    cfg = net.config
    _, h, w = i1.shape
    plan = stitch_plan(net, i1.shape)
    f = plan.factor
    x = stack_inputs(pad_frame(i1, cfg), pad_frame(i2, cfg)).astype(net.dtype, copy=False)
    field = np.empty((h, w, cfg.patch_size, 2 * cfg.patch_size), net.dtype)
    for dy, dx in plan.shifts:
        ny, nx = len(range(dy, h, f)), len(range(dx, w, f))
        if ny == 0 or nx == 0:
            continue
        # crop so the pass covers exactly the needed grid cells
        need_h = cfg.receptive_field + f * (ny - 1)
        need_w = cfg.receptive_field + f * (nx - 1)
        sub = x[None, :, dy:dy + need_h, dx:dx + need_w]
        out = net.forward_field(np.ascontiguousarray(sub), train=False)[0]
        if out.shape[0] < ny or out.shape[1] < nx:
            raise ShapeError(f"shift pass produced {out.shape[:2]} kernels, {(ny, nx)} needed")
        field[dy::f, dx::f] = out[:ny, :nx]
    return field


def interpolate_pixelwise(net, i1, i2):
    return _synthesize(net, i1, i2, kernel_field_pixelwise(net, i1, i2))


def interpolate_shift_stitch(net, i1, i2):
    return _synthesize(net, i1, i2, kernel_field_stitched(net, i1, i2))


def interpolate(net, i1, i2, pixelwise=False):
    return (interpolate_pixelwise if pixelwise else interpolate_shift_stitch)(net, i1, i2)


def interpolate_recursive(net, i1, i2, depth, pixelwise=False):
    """Frames at t = j / 2**depth for j = 1 .. 2**depth - 1, ordered by t."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    mid = interpolate(net, i1, i2, pixelwise)
    if depth == 1:
        return [mid]
    return (interpolate_recursive(net, i1, mid, depth - 1, pixelwise) + [mid]
            + interpolate_recursive(net, mid, i2, depth - 1, pixelwise))
