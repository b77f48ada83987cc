"""Image file I/O and small raster utilities (PNG via Pillow)."""

from __future__ import annotations

import numpy as np
from PIL import Image

LUMA = np.array([0.2989, 0.587, 0.114])


def load_image(path) -> np.ndarray:
    """8-bit PNG/JPEG -> float RGB in [0,1], shape (H, W, 3)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def load_mask(path, threshold: int = 128) -> np.ndarray:
    """Single-channel mask thresholded at `threshold` -> float {0,1}."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= threshold).astype(np.float64)


def save_png(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float64)
    data = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    if data.ndim == 2:
        Image.fromarray(data, mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


def encode_normal_map(normals: np.ndarray) -> np.ndarray:
    return (normals + 1.0) / 2.0


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling aligned on pixel centers."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)
    fx = np.clip(xs - x0, 0.0, 1.0)
    if img.ndim == 2:
        img = img[..., None]
        squeeze = True
    else:
        squeeze = False
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return out[..., 0] if squeeze else out


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def mask_iou(a: np.ndarray, b: np.ndarray, threshold: float = 0.5) -> float:
    pa = np.asarray(a) >= threshold
    pb = np.asarray(b) >= threshold
    union = np.logical_or(pa, pb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pa, pb).sum() / union)
