"""8-bit PNG <-> float frame conversion. Frames are (3, H, W) arrays in [0, 1]."""

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError


def load_frame(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1) / 255.0)


def to_uint8(frame):
    return np.clip(np.round(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_frame(path, frame):
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) frame, got dims {list(frame.shape)}")
    Image.fromarray(to_uint8(frame).transpose(1, 2, 0)).save(path, format="PNG")


def quantize(frame):
    """Round-trip a frame through 8-bit storage."""
    return to_uint8(frame).astype(np.float32) / 255.0


def numbered_frames(directory):
    """PNG files in ``directory`` sorted by the last integer in their name."""
    def key(p):
        nums = re.findall(r"\d+", p.stem)
        return (int(nums[-1]) if nums else -1, p.name)

    return sorted(Path(directory).glob("*.png"), key=key)
