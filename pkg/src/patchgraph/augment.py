"""Stochastic patch augmentations forming positive views for contrastive training.

All operations are pure functions of (input, rng state) and preserve patch
shape. Single-patch functions are thin wrappers over batched helpers so the
trainer can augment a whole batch in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "AugmentConfig",
    "elastic_deform",
    "gaussian_noise",
    "contrast_adjust",
    "random_view",
    "random_view_batch",
]


@dataclass
class AugmentConfig:
    elastic_grid_spacing: int = 8  # voxels between displacement control points
    elastic_max_disp: float = 1.5  # voxels; must stay below grid spacing
    noise_sigma: float = 0.05  # intensity units
    gamma_range: tuple = (0.7, 1.4)

    def __post_init__(self):
        self.gamma_range = tuple(float(g) for g in self.gamma_range)
        if self.gamma_range[0] <= 0:
            raise ValueError(f"gamma_min must be positive, got {self.gamma_range[0]}")
        if self.elastic_max_disp < 0 or self.noise_sigma < 0:
            raise ValueError("elastic_max_disp and noise_sigma must be >= 0")


def _elastic_batch(patches: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    """Smooth random displacement, trilinear resampling, zero padding outside.

    Displacements vanish on the patch boundary (the outer control shell is
    fixed at zero), so for max_disp <= grid spacing no sample leaves the
    domain and constant patches stay constant.
    """
    if config.elastic_max_disp == 0:
        return patches.copy()
    shape = patches.shape[1:]
    if config.elastic_max_disp >= min(shape) / 2:
        raise ValueError("elastic_max_disp must be below half the patch size")
    n_ctrl = [max(3, round(s / config.elastic_grid_spacing) + 1) for s in shape]
    b = patches.shape[0]
    interior = rng.uniform(
        -config.elastic_max_disp,
        config.elastic_max_disp,
        size=(b, 3, n_ctrl[0] - 2, n_ctrl[1] - 2, n_ctrl[2] - 2),
    )
    control = np.zeros((b, 3, *n_ctrl), dtype=np.float32)
    control[:, :, 1:-1, 1:-1, 1:-1] = interior

    disp = F.interpolate(
        torch.from_numpy(control), size=shape, mode="trilinear", align_corners=True
    )
    axes = [torch.linspace(-1.0, 1.0, s) for s in shape]
    zz, yy, xx = torch.meshgrid(*axes, indexing="ij")
    grid = torch.stack([xx, yy, zz], dim=-1)[None].repeat(b, 1, 1, 1, 1)
    for d in range(3):  # voxel displacement -> normalized, (z,y,x) -> (x,y,z) slot
        grid[..., 2 - d] += 2.0 * disp[:, d] / max(shape[d] - 1, 1)

    src = torch.from_numpy(np.ascontiguousarray(patches, dtype=np.float32))[:, None]
    out = F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out[:, 0].numpy()


def _noise_batch(patches: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    if config.noise_sigma == 0:
        return patches.copy()
    return patches + rng.normal(0.0, config.noise_sigma, size=patches.shape).astype(np.float32)


def _contrast_batch(patches: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    lo, hi = config.gamma_range
    if lo == hi == 1.0:
        return patches.copy()
    gammas = rng.uniform(lo, hi, size=patches.shape[0])
    out = np.empty_like(patches)
    for i, (patch, gamma) in enumerate(zip(patches, gammas)):
        pmin, pmax = float(patch.min()), float(patch.max())
        if pmin == pmax:
            out[i] = patch  # constant patch: contrast is undefined, pass through
            continue
        unit = (patch - pmin) / (pmax - pmin)
        out[i] = unit**gamma * (pmax - pmin) + pmin
    return out


def random_view_batch(patches: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    """Elastic -> noise -> contrast with independent draws per patch."""
    patches = np.asarray(patches, dtype=np.float32)
    out = _elastic_batch(patches, config, rng)
    out = _noise_batch(out, config, rng)
    return _contrast_batch(out, config, rng)


def elastic_deform(patch: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    return _elastic_batch(np.asarray(patch, dtype=np.float32)[None], config, rng)[0]


def gaussian_noise(patch: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    return _noise_batch(np.asarray(patch, dtype=np.float32)[None], config, rng)[0]


def contrast_adjust(patch: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    return _contrast_batch(np.asarray(patch, dtype=np.float32)[None], config, rng)[0]


def random_view(patch: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    return random_view_batch(np.asarray(patch, dtype=np.float32)[None], config, rng)[0]
