"""Image/latent comparison measures used by the tests and the acceptance suite."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    mse = np.mean((a - b) ** 2)
    return float("inf") if mse == 0 else float(10 * np.log10(peak**2 / mse))


def _pool(x: torch.Tensor, size: int) -> torch.Tensor:
    return F.adaptive_avg_pool2d(x.float(), size).flatten(2)


def layout_correlation(z: torch.Tensor, reference: torch.Tensor, size: int = 16) -> float:
    """Mean per-channel Pearson correlation between average-pooled latents.

    Both arguments are ``(1, C, h, w)`` latents; pooling keeps only the
    coarse layout, so the measure ignores fine texture and noise.
    """
    a, b = _pool(z.cpu(), size)[0], _pool(reference.cpu(), size)[0]
    a = a - a.mean(dim=1, keepdim=True)
    b = b - b.mean(dim=1, keepdim=True)
    corr = (a * b).sum(1) / (a.norm(dim=1) * b.norm(dim=1)).clamp_min(1e-12)
    return float(corr.mean())


def _patches(img: np.ndarray, size: int, stride: int) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    return F.unfold(x, size, stride=stride)[0].T  # (N, 3 * size * size)


def patch_feature_distance(output, reference, patch: int = 8, stride: int = 4, max_size: int = 128) -> float:
    """Mean distance from each output patch to its nearest reference patch.

    Images larger than ``max_size`` are box-downsampled first.
    """
    def prep(img):
        img = np.asarray(img, dtype=np.float32)
        f = max(1, img.shape[0] // max_size)
        if f > 1:
            h, w = (img.shape[0] // f) * f, (img.shape[1] // f) * f
            img = img[:h, :w].reshape(h // f, f, w // f, f, 3).mean(axis=(1, 3))
        return img

    out, ref = _patches(prep(output), patch, stride), _patches(prep(reference), patch, stride)
    d = torch.cdist(out, ref, compute_mode="donot_use_mm_for_euclid_dist")
    return float(d.min(dim=1).values.mean() / np.sqrt(out.shape[1]))


def seam_energy(img, block: int) -> float:
    """Ratio of mean gradient magnitude across block seams to that elsewhere."""
    img = np.asarray(img, dtype=np.float64).mean(axis=-1)
    gx = np.abs(np.diff(img, axis=1))  # gx[:, j] spans columns j, j+1
    gy = np.abs(np.diff(img, axis=0))
    seam_x = np.zeros(gx.shape[1], bool)
    seam_x[block - 1::block] = True
    seam_y = np.zeros(gy.shape[0], bool)
    seam_y[block - 1::block] = True
    seams = np.concatenate([gx[:, seam_x].ravel(), gy[seam_y].ravel()])
    rest = np.concatenate([gx[:, ~seam_x].ravel(), gy[~seam_y].ravel()])
    return float(seams.mean() / max(rest.mean(), 1e-12))


def histogram_chi2(a, b, bins: int = 16) -> float:
    """Symmetric chi-square distance between per-channel colour histograms."""
    total = 0.0
    a, b = np.asarray(a).reshape(-1, 3), np.asarray(b).reshape(-1, 3)
    for c in range(3):
        ha, _ = np.histogram(a[:, c], bins=bins, range=(0, 1))
        hb, _ = np.histogram(b[:, c], bins=bins, range=(0, 1))
        ha, hb = ha / ha.sum(), hb / hb.sum()
        denom = ha + hb
        nz = denom > 0
        total += 0.5 * np.sum((ha[nz] - hb[nz]) ** 2 / denom[nz])
    return float(total / 3)
