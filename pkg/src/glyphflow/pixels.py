"""Conversions between 8-bit images and the model's [-1, 1] pixel fields.

All streams are 3-channel inside the model so they can share one input
projection; grayscale pages are replicated across channels on the way in
and averaged on the way out.
"""

from __future__ import annotations

import numpy as np


def to_unit(values: np.ndarray, dtype=np.float32) -> np.ndarray:
    scalar = np.dtype(dtype).type
    return (values.astype(scalar) / scalar(127.5)) - scalar(1.0)


def from_unit(field: np.ndarray) -> np.ndarray:
    scaled = np.rint((np.clip(field, -1.0, 1.0) + 1.0) * 127.5)
    return scaled.astype(np.uint8)


def gray_to_field(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    if image.ndim != 2:
        raise ValueError(f"expected [H, W] grayscale, got {image.shape}")
    return np.repeat(to_unit(image, dtype)[:, :, None], 3, axis=2)


def rgb_to_field(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] RGB, got {image.shape}")
    return to_unit(image, dtype)


def field_to_gray(field: np.ndarray) -> np.ndarray:
    return from_unit(field.mean(axis=-1))


def field_to_rgb(field: np.ndarray) -> np.ndarray:
    return from_unit(field)
