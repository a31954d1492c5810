"""Pixel-level primitives shared by the whole pipeline.

Images are numpy arrays: an RGB image is ``(H, W, 3)`` float32 with values
in ``[0, 1]``, a luminance map is ``(H, W)`` float32 in ``[0, 1]``.
Quantization to 8 bits happens only at save time; everything in between is
continuous so losses and gamma curves stay well defined.
"""

from __future__ import annotations

import math
import os

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError

# BT.601 luma weights (RGB -> Y)
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def validate_image(img: np.ndarray) -> None:
    """Raise ValueError unless ``img`` is a valid (H, W, 3) image in [0, 1]."""
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) array, got shape {getattr(img, 'shape', None)}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be at least 1x1, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"image values outside [0, 1]: min={img.min()}, max={img.max()}")


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit RGB (or grayscale, promoted to RGB) PNG as float32 in [0, 1].

    Returned values are exactly ``byte / 255``.

    Raises:
        FileNotFoundError: if ``path`` does not exist.
        DecodeError: for undecodable files or unsupported modes/bit depths.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "L"):
                # Palette/alpha/16-bit inputs are out of contract.
                raise DecodeError(
                    f"unsupported image mode {im.mode!r} in {path}; expected 8-bit RGB or grayscale"
                )
            if im.mode == "L":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return (arr.astype(np.float64) / 255.0).astype(np.float32)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write ``img`` as an 8-bit RGB PNG.

    Quantization is round-half-away-from-zero, i.e. byte = floor(255*v + 0.5),
    so ``load(save(img))`` equals ``round(255*v)/255`` per channel.
    """
    validate_image(img)
    scaled = np.floor(img.astype(np.float64) * 255.0 + 0.5)
    bytes_ = np.clip(scaled, 0, 255).astype(np.uint8)
    Image.fromarray(bytes_, mode="RGB").save(path, format="PNG")


def save_grayscale(gray: np.ndarray, path: str | os.PathLike) -> None:
    """Write a single-channel [0, 1] map as an 8-bit grayscale PNG."""
    if gray.ndim != 2:
        raise ValueError(f"expected 2-D array, got shape {gray.shape}")
    scaled = np.floor(gray.astype(np.float64) * 255.0 + 0.5)
    bytes_ = np.clip(scaled, 0, 255).astype(np.uint8)
    Image.fromarray(bytes_, mode="L").save(path, format="PNG")


def load_grayscale(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit grayscale PNG as (H, W) float32 in [0, 1]."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise DecodeError(f"expected 8-bit grayscale PNG at {path}, got mode {im.mode!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return (arr.astype(np.float64) / 255.0).astype(np.float32)


def rgb_to_luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 luminance: Y = 0.299 R + 0.587 G + 0.114 B, per pixel."""
    validate_image(img)
    w = np.asarray(LUMA_WEIGHTS, dtype=np.float64)
    lum = img.astype(np.float64) @ w
    return np.clip(lum, 0.0, 1.0).astype(np.float32)


def invert_luminance(lum: np.ndarray) -> np.ndarray:
    """Elementwise 1 - lum."""
    if lum.ndim != 2:
        raise ValueError(f"expected 2-D luminance map, got shape {lum.shape}")
    return (1.0 - lum).astype(np.float32)


def downsample_nearest(img: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor downsampling: out[i, j] = img[i*factor, j*factor].

    Output dims are floor(H/factor) x floor(W/factor). Works for both
    (H, W, C) images and (H, W) maps.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    h, w = img.shape[:2]
    if factor > h or factor > w:
        raise ValueError(f"factor {factor} larger than image dims {h}x{w}")
    return np.ascontiguousarray(img[::factor, ::factor][: h // factor, : w // factor])


def upsample_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor upsampling of a map to exact output dims."""
    h, w = arr.shape[:2]
    rows = np.minimum((np.arange(out_h) * h) // out_h, h - 1)
    cols = np.minimum((np.arange(out_w) * w) // out_w, w - 1)
    return arr[np.ix_(rows, cols)]


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def _reflect_indices(n: int, radius: int) -> np.ndarray:
    """Index map implementing reflect padding (no edge repeat) for any radius."""
    idx = np.arange(-radius, n + radius)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding.

    Kernel radius is ceil(3*sigma) and the kernel is normalized to sum 1,
    so constant images are preserved. Accepts (H, W, C) or (H, W) arrays.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    kernel = _gaussian_kernel(sigma)
    radius = (len(kernel) - 1) // 2
    out = img.astype(np.float64)
    squeeze = out.ndim == 2
    if squeeze:
        out = out[:, :, None]
    h, w = out.shape[:2]

    rows = _reflect_indices(h, radius)
    padded = out[rows, :, :]
    out = np.zeros((h, w, out.shape[2]), dtype=np.float64)
    for k in range(2 * radius + 1):
        out += kernel[k] * padded[k : k + h]

    cols = _reflect_indices(w, radius)
    padded = out[:, cols, :]
    out = np.zeros_like(out)
    for k in range(2 * radius + 1):
        out += kernel[k] * padded[:, k : k + w]

    if squeeze:
        out = out[:, :, 0]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_gamma(img: np.ndarray, gamma: float) -> np.ndarray:
    """Elementwise img**gamma; 0**gamma is 0. Monotone in the input."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return np.power(img, np.float32(gamma), dtype=np.float32)


def apply_color_matrix(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Replace each pixel p by clamp(matrix @ p, 0, 1)."""
    validate_image(img)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (3, 3):
        raise ValueError(f"expected 3x3 matrix, got shape {matrix.shape}")
    out = img.astype(np.float64) @ matrix.T
    return np.clip(out, 0.0, 1.0).astype(np.float32)
