"""PNG input/output for rendered images and fit targets."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import ConfigurationError


def write_png(path, array, bit_depth: int = 8) -> None:
    """Write a float image in [0, 1] as PNG.

    Grayscale (H, W) supports 8- and 16-bit; RGB (H, W, 3) is written 8-bit
    (Pillow has no 16-bit RGB encoder).  Values are clipped before
    quantization.
    """
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    a = np.clip(a, 0.0, 1.0)
    if bit_depth == 8:
        q = np.round(a * 255.0).astype(np.uint8)
        mode = "L" if q.ndim == 2 else "RGB"
        Image.fromarray(q, mode=mode).save(path, format="PNG")
    elif bit_depth == 16:
        if a.ndim != 2:
            raise ConfigurationError("16-bit PNG output supports grayscale only")
        q = np.round(a * 65535.0).astype(np.uint16)
        Image.fromarray(q, mode="I;16").save(path, format="PNG")
    else:
        raise ConfigurationError(f"bit depth must be 8 or 16, got {bit_depth}")


def read_png(path) -> np.ndarray:
    """Read a PNG into floats in [0, 1]: (H, W) grayscale or (H, W, 3) RGB."""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        elif img.mode == "L":
            arr = np.asarray(img, dtype=np.float64) / 255.0
        else:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr
