"""Single-channel image math.

Images are plain 2-D float arrays (row-major, ``(height, width)``).
Everything here is pure; range checks happen at ingestion via
:func:`check_image`, never inside the arithmetic helpers.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

MIN_NETWORK_SIZE = 8
DEFAULT_BLUR_KERNEL = 5

GEOMETRIC_OPS = ("identity", "hflip", "vflip", "rot90_1", "rot90_2", "rot90_3")
_INVERSE = {
    "identity": "identity",
    "hflip": "hflip",
    "vflip": "vflip",
    "rot90_1": "rot90_3",
    "rot90_2": "rot90_2",
    "rot90_3": "rot90_1",
}


def check_image(img, *, unit_range: bool = False, min_size: int | None = None,
                name: str = "image") -> np.ndarray:
    """Validate and return ``img`` as a float64 2-D array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or Inf")
    if unit_range and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name}: values outside [0, 1] (min={arr.min():.4g}, max={arr.max():.4g})")
    if min_size is not None and min(arr.shape) < min_size:
        raise ValueError(f"{name}: {arr.shape} is smaller than the minimum {min_size}x{min_size}")
    return arr


def _check_kernel(kernel: int, shape) -> int:
    if int(kernel) != kernel or kernel <= 0 or kernel % 2 == 0:
        raise ValueError(f"kernel must be a positive odd integer, got {kernel!r}")
    if kernel > min(shape):
        raise ValueError(f"kernel {kernel} larger than image {shape}")
    return int(kernel)


def box_blur(img, kernel: int = DEFAULT_BLUR_KERNEL) -> np.ndarray:
    """Unweighted ``kernel x kernel`` mean with edge replication at the borders."""
    arr = np.asarray(img, dtype=np.float64)
    k = _check_kernel(kernel, arr.shape)
    if k == 1:
        return arr.copy()
    return ndimage.uniform_filter(arr, size=k, mode="nearest")


def local_residual(img, kernel: int = DEFAULT_BLUR_KERNEL) -> np.ndarray:
    """High-frequency part of ``img``: the image minus its box blur."""
    arr = np.asarray(img, dtype=np.float64)
    return arr - box_blur(arr, kernel)


def geometric_transform(img, op: str) -> np.ndarray:
    """Lossless flip / quarter-turn. ``op`` is one of :data:`GEOMETRIC_OPS`."""
    arr = np.asarray(img)
    if op == "identity":
        out = arr
    elif op == "hflip":
        out = arr[:, ::-1]
    elif op == "vflip":
        out = arr[::-1, :]
    elif op.startswith("rot90_") and op in _INVERSE:
        out = np.rot90(arr, k=int(op[-1]))
    else:
        raise ValueError(f"unknown geometric op {op!r}")
    return np.ascontiguousarray(out)


def inverse_op(op: str) -> str:
    return _INVERSE[op]


def rotate_small(img, degrees: float) -> np.ndarray:
    """Bilinear rotation about the centre; exposed corners filled by edge replication."""
    arr = np.asarray(img, dtype=np.float64)
    if degrees == 0:
        return arr.copy()
    return ndimage.rotate(arr, degrees, reshape=False, order=1, mode="nearest")


def contrast_jitter(img, factor: float) -> np.ndarray:
    """Scale deviations from the image mean by ``factor`` and clamp to [0, 1]."""
    if not factor > 0:
        raise ValueError(f"contrast factor must be positive, got {factor!r}")
    arr = np.asarray(img, dtype=np.float64)
    if factor == 1:
        return np.clip(arr, 0.0, 1.0)
    mean = arr.mean()
    return np.clip(mean + factor * (arr - mean), 0.0, 1.0)


def minmax_normalize(img) -> np.ndarray:
    """Per-image min-max to [0, 1]; a constant image maps to all 0.5."""
    arr = np.asarray(img, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi - lo <= 0:
        return np.full_like(arr, 0.5)
    return (arr - lo) / (hi - lo)


def area_resample(img, shape) -> np.ndarray:
    """Resize by exact area averaging (any ratio, up or down).

    Each output pixel is the overlap-weighted mean of the input pixels its
    footprint covers, so constants are preserved and equal shapes are a no-op.
    """
    arr = np.asarray(img, dtype=np.float64)
    out_h, out_w = (int(s) for s in shape)
    if (out_h, out_w) == arr.shape:
        return arr.copy()
    rows = _area_weights(arr.shape[0], out_h)
    cols = _area_weights(arr.shape[1], out_w)
    return rows @ arr @ cols.T


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    # output cell j covers [j*s, (j+1)*s) in input coordinates, s = n_in / n_out
    scale = n_in / n_out
    edges = np.arange(n_out + 1) * scale
    lo, hi = edges[:-1, None], edges[1:, None]
    pix = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, pix + 1) - np.maximum(lo, pix), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)
