"""sRGB transfer functions and Rec. 709 luma weighting."""

from __future__ import annotations

import numpy as np

# Rec. 709 weights, applied to gamma-encoded components (luma).
LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    """Linear light -> sRGB, inputs expected in [0, 1]."""
    v = np.clip(linear, 0.0, 1.0)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * np.power(v, 1.0 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    """sRGB -> linear light, inputs expected in [0, 1]."""
    v = np.clip(encoded, 0.0, 1.0)
    return np.where(v <= 0.04045, v / 12.92, np.power((v + 0.055) / 1.055, 2.4))


def luma709(image: np.ndarray) -> np.ndarray:
    """Rec. 709 luma of an (H, W, 3) image; (H, W) and (H, W, 1) pass through."""
    if image.ndim == 2:
        return image
    if image.shape[2] == 1:
        return image[:, :, 0]
    return image[:, :, :3] @ LUMA_WEIGHTS
