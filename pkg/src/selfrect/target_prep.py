"""Target and reference conditioning: background fill, shuffles, augmentation, guided layouts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .backend.base import as_pixel_image

AUGMENTATIONS = {
    "hflip": None,
    "vflip": None,
    "rot90": 90.0,
    "rot45": 45.0,
    "rot-45": -45.0,
}
DEFAULT_ROTATIONS = ("rot45", "rot-45", "rot90")


@dataclass(frozen=True)
class ShuffleSpec:
    block_size: int
    seed: int = 0


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def fill_background(canvas, mask, source, seed: int = 0) -> np.ndarray:
    """Replace every unmasked canvas pixel with a pixel drawn uniformly from ``source``."""
    canvas = np.array(canvas, dtype=np.float32)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != canvas.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match canvas {canvas.shape[:2]}")
    pool = np.asarray(source, dtype=np.float32).reshape(-1, canvas.shape[-1])
    if pool.shape[0] == 0:
        raise ValueError("source texture is empty")
    bg = ~mask
    picks = _rng(seed).integers(0, pool.shape[0], size=int(bg.sum()))
    canvas[bg] = pool[picks]
    return canvas


def _block_permute(arr: np.ndarray, block: int, seed: int, spatial=(0, 1)) -> np.ndarray:
    h, w = arr.shape[spatial[0]], arr.shape[spatial[1]]
    if block < 1 or h % block or w % block:
        raise ValueError(f"block size {block} does not divide {h}x{w}")
    gh, gw = h // block, w // block
    # move spatial axes to the front: (gh, block, gw, block, ...)
    a = np.moveaxis(arr, spatial, (0, 1))
    rest = a.shape[2:]
    tiles = a.reshape(gh, block, gw, block, *rest).swapaxes(1, 2).reshape(gh * gw, block, block, *rest)
    perm = _rng(seed).permutation(gh * gw)
    out = tiles[perm].reshape(gh, gw, block, block, *rest).swapaxes(1, 2).reshape(h, w, *rest)
    return np.moveaxis(out, (0, 1), spatial)


def patch_shuffle(reference, spec: ShuffleSpec = ShuffleSpec(64)) -> np.ndarray:
    """Randomly permute non-overlapping ``block_size`` pixel blocks."""
    return _block_permute(np.asarray(reference, dtype=np.float32), spec.block_size, spec.seed)


def latent_shuffle(z: torch.Tensor, spec: ShuffleSpec = ShuffleSpec(8)) -> torch.Tensor:
    """Randomly permute non-overlapping blocks of latent cells (``z`` is ``(B, C, h, w)``)."""
    arr = z.detach().cpu().numpy()
    out = _block_permute(arr, spec.block_size, spec.seed, spatial=(2, 3))
    return torch.from_numpy(np.ascontiguousarray(out)).to(z.device, z.dtype)


def rotate_crop(img: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation, crop of the largest centred valid square, resize back."""
    h, w = img.shape[:2]
    if h != w:
        raise ValueError("rotation augmentation expects a square image")
    rot = ndimage.rotate(img, degrees, axes=(1, 0), reshape=False, order=1, mode="constant")
    rad = np.deg2rad(degrees % 90)
    side = int(np.floor(h / (np.cos(rad) + np.sin(rad))))
    side -= side % 2 != h % 2  # keep the crop centred on the pixel grid
    lo = (h - side) // 2
    crop = rot[lo:lo + side, lo:lo + side]
    zoomed = ndimage.zoom(crop, (h / side, h / side, 1), order=1, mode="nearest", grid_mode=True)
    return np.clip(zoomed[:h, :h], 0.0, 1.0).astype(np.float32)


def apply_augmentation(img: np.ndarray, name: str) -> np.ndarray:
    if name == "hflip":
        return img[:, ::-1].copy()
    if name == "vflip":
        return img[::-1].copy()
    if name == "rot90":
        return np.rot90(img, k=1, axes=(0, 1)).copy()
    if name in ("rot45", "rot-45"):
        return rotate_crop(img, AUGMENTATIONS[name])
    raise ValueError(f"unknown augmentation {name!r}; choose from {sorted(AUGMENTATIONS)}")


def build_augmentations(reference, transforms: Sequence[str]) -> list[np.ndarray]:
    img = as_pixel_image(reference, factor=1)
    if any(t.startswith("rot") for t in transforms) and img.shape[0] != img.shape[1]:
        raise ValueError("rotation augmentations need a square reference")
    return [apply_augmentation(img, t) for t in transforms]


def prepare_guided_layout(layout, noise_amplitude: float = 0.1, seed: int = 0) -> np.ndarray:
    """Add uniform noise in ``[-a, a]`` to a colour layout, clamped to [0, 1]."""
    if noise_amplitude < 0:
        raise ValueError("noise amplitude must be non-negative")
    layout = np.asarray(layout, dtype=np.float32)
    if noise_amplitude == 0:
        return layout.copy()
    noise = _rng(seed).uniform(-noise_amplitude, noise_amplitude, size=layout.shape).astype(np.float32)
    return np.clip(layout + noise, 0.0, 1.0)
