"""Conversions between RGB, grayscale and BT.601 YCbCr.

Images are float arrays in [0, 1]: ``(H, W, 3)`` for color and ``(H, W)``
for grayscale, optionally with leading batch dimensions. 8-bit data only
appears at file boundaries (see :mod:`latentcolor.dataset`).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

# BT.601 luma weights
KR = 0.299
KG = 0.587
KB = 0.114

_CB_SCALE = 0.5 / (1.0 - KB)
_CR_SCALE = 0.5 / (1.0 - KR)


def check_rgb(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim < 3 or img.shape[-1] != 3:
        raise ShapeError(f"{name} must be (..., H, W, 3), got shape {img.shape}")
    if img.shape[-3] < 1 or img.shape[-2] < 1:
        raise ShapeError(f"{name} has an empty spatial dimension: {img.shape}")
    return img


def check_gray(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim < 2:
        raise ShapeError(f"{name} must be (..., H, W), got shape {img.shape}")
    if img.shape[-2] < 1 or img.shape[-1] < 1:
        raise ShapeError(f"{name} has an empty spatial dimension: {img.shape}")
    return img


def _luma(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    # Written relative to G so that r == g == b returns g bit-exactly.
    return g + KR * (r - g) + KB * (b - g)


def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """BT.601 weighted luma of an RGB image, shape ``(H, W)``."""
    img = check_rgb(img)
    return np.clip(_luma(img), 0.0, 1.0)


def gray_to_rgb3(img: np.ndarray) -> np.ndarray:
    """Replicate a grayscale plane into three identical channels."""
    img = check_gray(img)
    return np.repeat(img[..., None], 3, axis=-1)


def rgb_to_ycbcr(img: np.ndarray) -> np.ndarray:
    """Full-range BT.601 YCbCr with chroma offset to 0.5."""
    img = check_rgb(img)
    y = _luma(img)
    cb = 0.5 + _CB_SCALE * (img[..., 2] - y)
    cr = 0.5 + _CR_SCALE * (img[..., 0] - y)
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(img: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_ycbcr`. No clamping is applied."""
    img = check_rgb(img)
    y = img[..., 0]
    r = y + (img[..., 2] - 0.5) / _CR_SCALE
    b = y + (img[..., 1] - 0.5) / _CB_SCALE
    g = (y - KR * r - KB * b) / KG
    return np.stack([r, g, b], axis=-1)


def chroma(img: np.ndarray) -> np.ndarray:
    """The (Cb, Cr) planes of an RGB image, shape ``(H, W, 2)``."""
    return rgb_to_ycbcr(img)[..., 1:]


def luminance_overlay(predicted: np.ndarray, source: np.ndarray) -> np.ndarray:
    """Keep the chroma of ``predicted`` but take the luma from ``source``.

    The predicted frame is moved to YCbCr, its luma plane is replaced by the
    grayscale source and the result is converted back to RGB. Pixels that
    leave the RGB cube are brought back by shrinking their chroma towards
    neutral rather than by per-channel clipping, which would alter the luma
    that was just written.

    Args:
        predicted: ``(H, W, 3)`` colorized frame.
        source: ``(H, W)`` grayscale frame with matching dimensions.

    Returns:
        ``(H, W, 3)`` array in [0, 1] whose luma equals ``source``.
    """
    predicted = check_rgb(predicted, "predicted")
    source = check_gray(source, "source")
    if predicted.shape[:-1] != source.shape:
        raise ShapeError(
            f"predicted {predicted.shape[:-1]} and source {source.shape} differ in size"
        )
    ycc = rgb_to_ycbcr(predicted.astype(np.float64))
    ycc[..., 0] = source
    rgb = ycbcr_to_rgb(ycc)

    y = source[..., None].astype(np.float64)
    offset = rgb - y
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        room = np.where(offset > 0, (1.0 - y) / offset, np.where(offset < 0, -y / offset, np.inf))
    scale = np.clip(np.min(room, axis=-1, keepdims=True), 0.0, 1.0)
    out = np.clip(y + scale * offset, 0.0, 1.0)
    return out.astype(predicted.dtype if predicted.dtype.kind == "f" else np.float64)
