from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def load_image(path, size: int | None = None) -> np.ndarray:
    """8-bit PNG (any PIL-readable file) -> ``H x W x 3`` float32 in [0, 1]."""
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BICUBIC)
    return np.asarray(img, dtype=np.float32) / 255.0


def load_mask(path, size: int | None = None) -> np.ndarray:
    """Single-channel placement mask; values >= 128 mark user-placed pixels."""
    img = Image.open(path).convert("L")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    return np.asarray(img) >= 128


def to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(np.asarray(img, dtype=np.float32), 0, 1) * 255 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)
    return path


def hstack(frames: list[np.ndarray], gap: int = 2) -> np.ndarray:
    h = frames[0].shape[0]
    sep = np.ones((h, gap, 3), np.float32)
    parts = []
    for i, f in enumerate(frames):
        if i:
            parts.append(sep)
        parts.append(np.asarray(f, np.float32))
    return np.concatenate(parts, axis=1)
