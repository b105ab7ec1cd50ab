"""PNG and base64 helpers for the grayscale pages and RGB box maps."""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image


def _to_image(arr: np.ndarray) -> Image.Image:
    if arr.ndim == 2:
        return Image.fromarray(arr.astype(np.uint8), mode="L")
    if arr.ndim == 3 and arr.shape[2] == 3:
        return Image.fromarray(arr.astype(np.uint8), mode="RGB")
    raise ValueError(f"cannot encode array of shape {arr.shape} as PNG")


def save_png(path, arr: np.ndarray) -> None:
    _to_image(arr).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as img:
        mode = "RGB" if img.mode in ("RGB", "RGBA", "P") else "L"
        return np.asarray(img.convert(mode))


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    _to_image(arr).save(buf, format="PNG")
    return buf.getvalue()


def png_from_bytes(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        mode = "RGB" if img.mode in ("RGB", "RGBA", "P") else "L"
        return np.asarray(img.convert(mode))


def png_b64(arr: np.ndarray) -> str:
    return base64.b64encode(png_bytes(arr)).decode("ascii")


def png_from_b64(text: str) -> np.ndarray:
    return png_from_bytes(base64.b64decode(text))
