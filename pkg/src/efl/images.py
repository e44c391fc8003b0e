"""Image array helpers.

Images travel through the pipeline as float arrays with shape (H, W, 3) and
values in [0, 1]; torch models see the channels-first view. PNG round-trips
quantise to 8 bits, which is also what the synthetic corpus stores, so
on-disk and in-memory pixels agree exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 255.0


def save_png(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def resize(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    im = Image.fromarray(to_uint8(img), mode="RGB").resize((size, size), Image.BILINEAR)
    return from_uint8(np.asarray(im))


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def gradient_magnitude(img: np.ndarray) -> float:
    """Mean finite-difference gradient magnitude of the grayscale image."""
    gray = img @ np.array([0.299, 0.587, 0.114])
    gx = np.abs(np.diff(gray, axis=1))
    gy = np.abs(np.diff(gray, axis=0))
    return float(gx.mean() + gy.mean())


def img_to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) float array -> (3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype)


def batch_to_tensor(imgs: list[np.ndarray] | np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    arr = np.stack([np.ascontiguousarray(i.transpose(2, 0, 1)) for i in imgs])
    return torch.from_numpy(arr).to(dtype)


def tensor_to_img(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) tensor -> clipped (H, W, 3) float array."""
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0)
