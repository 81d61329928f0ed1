"""Atlas patch grid, subject-atlas registration, and per-subject patch graphs.

All world coordinates are millimetres in (z, y, x) component order, matching
the Volume axis convention. A fitted Transform maps subject world coordinates
to atlas world coordinates via ``apply``; ``apply_inverse`` maps atlas
coordinates back into the subject, which is the direction both center mapping
and resampling consume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .volume_io import SubjectRecord, Volume, normalize_volume

__all__ = [
    "AtlasGrid",
    "AffineTransform",
    "DisplacementTransform",
    "PatchGraph",
    "RegistrationConfig",
    "GraphBuildConfig",
    "RegistrationError",
    "TransformError",
    "build_atlas_grid",
    "fit_transform",
    "map_centers",
    "extract_patches",
    "build_adjacency",
    "build_patch_graph",
    "default_threshold_mm",
    "save_patch_graph",
    "load_patch_graph",
]


class RegistrationError(RuntimeError):
    """Registration failed (non-finite objective or degenerate fit)."""


class TransformError(RuntimeError):
    """Transform application failed (singular matrix, non-convergent inverse)."""


@dataclass
class AtlasGrid:
    """Regular lattice of patch centers defined once on the atlas."""

    centers_atlas: np.ndarray  # (N, 3) world mm
    patch_size: tuple
    stride: tuple
    atlas_shape: tuple
    atlas_spacing: np.ndarray
    atlas_origin: np.ndarray

    def __post_init__(self):
        self.centers_atlas = np.asarray(self.centers_atlas, dtype=np.float64).reshape(-1, 3)
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.stride = tuple(int(s) for s in self.stride)
        self.atlas_spacing = np.asarray(self.atlas_spacing, dtype=np.float64).reshape(3)
        self.atlas_origin = np.asarray(self.atlas_origin, dtype=np.float64).reshape(3)

    @property
    def n_patches(self):
        return self.centers_atlas.shape[0]

    def centers_normalized(self):
        """Atlas centers rescaled to [0,1]^3 (the encoder conditioning input)."""
        extent = (np.asarray(self.atlas_shape, dtype=np.float64) - 1) * self.atlas_spacing
        return (self.centers_atlas - self.atlas_origin) / extent


@dataclass
class AffineTransform:
    """Invertible affine map, subject world -> atlas world (mm)."""

    matrix: np.ndarray  # (4, 4) homogeneous

    kind = "affine"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(4, 4)
        det = np.linalg.det(self.matrix[:3, :3])
        if not np.isfinite(det) or abs(det) < 1e-12:
            raise TransformError(f"singular affine matrix (det={det})")
        self._inverse = np.linalg.inv(self.matrix)

    @property
    def invertible(self):
        return True

    @property
    def params(self):
        """Flat parameter vector (the 12 active entries of the matrix)."""
        return self.matrix[:3].ravel().copy()

    def apply(self, points):
        """Subject world coordinates (..., 3) -> atlas world coordinates."""
        return _apply_homogeneous(self.matrix, points)

    def apply_inverse(self, points):
        """Atlas world coordinates (..., 3) -> subject world coordinates."""
        return _apply_homogeneous(self._inverse, points)

    def to_dict(self):
        return {"kind": self.kind, "matrix": self.matrix.tolist()}


@dataclass
class DisplacementTransform:
    """Affine plus a smooth displacement correction on the atlas lattice.

    The native direction is atlas -> subject: inverse(y) = A^{-1} y + u(y),
    with u trilinearly interpolated from ``disp_control`` spanning the atlas
    voxel-center bounding box. The forward map solves the fixed point
    y = A(x - u(y)) and checks convergence.
    """

    affine: AffineTransform
    disp_control: np.ndarray  # (3, gz, gy, gx) world-mm displacements
    atlas_low: np.ndarray
    atlas_high: np.ndarray
    max_iter: int = 100
    tol: float = 1e-6

    kind = "affine+disp"

    def __post_init__(self):
        self.disp_control = np.asarray(self.disp_control, dtype=np.float64)
        if self.disp_control.ndim != 4 or self.disp_control.shape[0] != 3:
            raise TransformError("disp_control must have shape (3, gz, gy, gx)")
        self.atlas_low = np.asarray(self.atlas_low, dtype=np.float64).reshape(3)
        self.atlas_high = np.asarray(self.atlas_high, dtype=np.float64).reshape(3)

    @property
    def invertible(self):
        return True

    @property
    def params(self):
        return np.concatenate([self.affine.params, self.disp_control.ravel()])

    def displacement_at(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        grid_shape = np.asarray(self.disp_control.shape[1:], dtype=np.float64)
        span = np.maximum(self.atlas_high - self.atlas_low, 1e-12)
        coords = (points - self.atlas_low) / span * (grid_shape - 1)
        out = np.empty_like(points)
        for d in range(3):
            out[:, d] = ndimage.map_coordinates(
                self.disp_control[d], coords.T, order=1, mode="nearest"
            )
        return out

    def apply_inverse(self, points):
        points = np.asarray(points, dtype=np.float64)
        squeeze = points.ndim == 1
        pts = np.atleast_2d(points)
        out = self.affine.apply_inverse(pts) + self.displacement_at(pts)
        return out[0] if squeeze else out

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        squeeze = points.ndim == 1
        x = np.atleast_2d(points)
        y = self.affine.apply(x)
        for _ in range(self.max_iter):
            y_next = self.affine.apply(x - self.displacement_at(y))
            step = np.abs(y_next - y).max()
            y = y_next
            if step < self.tol:
                break
        else:
            raise TransformError(
                f"fixed-point inversion did not converge (last step {step:.3g} mm)"
            )
        return y[0] if squeeze else y

    def to_dict(self):
        return {
            "kind": self.kind,
            "matrix": self.affine.matrix.tolist(),
            "disp_control": self.disp_control.tolist(),
            "atlas_low": self.atlas_low.tolist(),
            "atlas_high": self.atlas_high.tolist(),
        }


def transform_from_dict(d) -> AffineTransform | DisplacementTransform:
    if d["kind"] == "affine":
        return AffineTransform(np.asarray(d["matrix"]))
    if d["kind"] == "affine+disp":
        return DisplacementTransform(
            affine=AffineTransform(np.asarray(d["matrix"])),
            disp_control=np.asarray(d["disp_control"]),
            atlas_low=np.asarray(d["atlas_low"]),
            atlas_high=np.asarray(d["atlas_high"]),
        )
    raise ValueError(f"unknown transform kind {d['kind']!r}")


def _apply_homogeneous(matrix, points):
    pts = np.asarray(points, dtype=np.float64)
    squeeze = pts.ndim == 1
    pts = np.atleast_2d(pts)
    out = pts @ matrix[:3, :3].T + matrix[:3, 3]
    return out[0] if squeeze else out


@dataclass
class PatchGraph:
    """Per-subject node patches, centers, region ids, and adjacency."""

    subject_id: str
    region_ids: np.ndarray  # (N,)
    centers_subject: np.ndarray  # (N, 3) world mm
    patches: np.ndarray  # (N, D, H, W) float32
    adjacency: np.ndarray  # (N, N) uint8, symmetric, zero diagonal
    centers_atlas_normalized: np.ndarray  # (N, 3) in [0,1]^3
    transform: AffineTransform | DisplacementTransform | None = None

    def __post_init__(self):
        self.region_ids = np.asarray(self.region_ids, dtype=np.int32)
        self.centers_subject = np.asarray(self.centers_subject, dtype=np.float64)
        self.patches = np.asarray(self.patches, dtype=np.float32)
        self.adjacency = np.asarray(self.adjacency, dtype=np.uint8)
        self.centers_atlas_normalized = np.asarray(self.centers_atlas_normalized, dtype=np.float64)
        n = len(self.region_ids)
        if not np.array_equal(self.region_ids, np.arange(n, dtype=np.int32)):
            raise ValueError("region_ids must be exactly 0..N-1")
        a = self.adjacency
        if a.shape != (n, n) or np.any(a != a.T) or np.any(np.diag(a) != 0):
            raise ValueError("adjacency must be NxN symmetric with zero diagonal")
        if self.patches.shape[0] != n or self.centers_subject.shape != (n, 3):
            raise ValueError("patches/centers length inconsistent with region_ids")

    @property
    def n_patches(self):
        return len(self.region_ids)


def build_atlas_grid(atlas_mask: Volume, patch_size, stride, min_mask_overlap=0.5) -> AtlasGrid:
    """Lay a regular lattice of patch centers over the atlas mask.

    Centers are voxel positions where the patch fits fully inside the volume,
    stepping by ``stride``; cells whose patch overlaps the mask by less than
    ``min_mask_overlap`` are dropped. Ordering is lexicographic in (z, y, x).
    """
    patch_size = tuple(int(p) for p in patch_size)
    stride = tuple(int(s) for s in stride)
    shape = atlas_mask.shape
    if any(p > d for p, d in zip(patch_size, shape)):
        raise ValueError(f"patch_size {patch_size} does not fit inside atlas {shape}")
    if any(s < 1 for s in stride):
        raise ValueError(f"stride must be >= 1, got {stride}")

    mask = atlas_mask.data > 0
    axes = [
        p // 2 + stride[d] * np.arange((shape[d] - p) // stride[d] + 1)
        for d, p in enumerate(patch_size)
    ]
    centers_idx = []
    for z in axes[0]:
        for y in axes[1]:
            for x in axes[2]:
                lo = [c - p // 2 for c, p in zip((z, y, x), patch_size)]
                box = mask[lo[0] : lo[0] + patch_size[0],
                           lo[1] : lo[1] + patch_size[1],
                           lo[2] : lo[2] + patch_size[2]]
                if box.mean() >= min_mask_overlap:
                    centers_idx.append((z, y, x))
    if not centers_idx:
        raise ValueError("empty atlas grid: mask too small for the requested overlap")

    centers_world = atlas_mask.index_to_world(np.asarray(centers_idx, dtype=np.float64))
    return AtlasGrid(
        centers_atlas=centers_world,
        patch_size=patch_size,
        stride=stride,
        atlas_shape=shape,
        atlas_spacing=atlas_mask.spacing,
        atlas_origin=atlas_mask.origin,
    )


@dataclass
class RegistrationConfig:
    kind: str = "affine"  # affine | affine+disp
    pyramid: tuple = (4, 2, 1)  # downsampling factor per level
    iters: tuple = (120, 60, 20)  # Adam iterations per level (LBFGS polishes each level)
    lr: float = 0.05
    lambda_reg: float = 1e-4
    disp_control_pts: int = 5
    disp_iters: int = 80
    disp_lr: float = 0.01
    lambda_smooth: float = 0.1

    def __post_init__(self):
        self.pyramid = tuple(int(f) for f in self.pyramid)
        self.iters = tuple(int(i) for i in self.iters)
        if len(self.pyramid) != len(self.iters):
            raise ValueError("pyramid and iters must have the same length")
        if self.pyramid[-1] != 1:
            raise ValueError("the last pyramid level must be full resolution (factor 1)")


def _norm_matrix_xyz(volume: Volume) -> np.ndarray:
    """World (x,y,z) mm -> grid_sample normalized coords, align_corners=True."""
    shape_xyz = np.asarray(volume.shape[::-1], dtype=np.float64)
    spacing_xyz = volume.spacing[::-1].astype(np.float64)
    origin_xyz = volume.origin[::-1].astype(np.float64)
    extent = (shape_xyz - 1) * spacing_xyz
    if np.any(extent <= 0):
        raise RegistrationError("registration requires at least 2 voxels per axis")
    m = np.eye(4)
    m[:3, :3] = np.diag(2.0 / extent)
    m[:3, 3] = -2.0 * origin_xyz / extent - 1.0
    return m


_PERM_ZYX_XYZ = np.eye(4)[[2, 1, 0, 3]]  # reversal, its own inverse


def _theta_to_world_affine(theta: np.ndarray, subject: Volume, atlas: Volume) -> np.ndarray:
    """grid_sample theta (atlas norm -> subject norm) -> atlas->subject world map."""
    theta4 = np.eye(4)
    theta4[:3] = theta
    ns = _norm_matrix_xyz(subject)
    na = _norm_matrix_xyz(atlas)
    return _PERM_ZYX_XYZ @ np.linalg.inv(ns) @ theta4 @ na @ _PERM_ZYX_XYZ


def _as_torch(volume: Volume) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(volume.data, dtype=np.float32))[None, None]


def _norm_coord_grid(shape) -> torch.Tensor:
    """All voxel-center positions in normalized (x, y, z) coords, flattened."""
    axes = [torch.linspace(-1.0, 1.0, s) for s in shape]
    zz, yy, xx = torch.meshgrid(*axes, indexing="ij")
    return torch.stack([xx, yy, zz], dim=-1).reshape(-1, 3)


def fit_transform(subject: Volume, atlas: Volume, config: RegistrationConfig | None = None):
    """Fit an invertible subject->atlas transform by intensity matching.

    Minimizes mean-squared intensity difference between the subject resampled
    into atlas space and the atlas, plus an identity-deviation penalty, with
    Adam on the affine parameters over a coarse-to-fine pyramid (cosine lr
    decay per level). With kind "affine+disp" a smooth displacement correction
    on a control lattice is fitted afterwards under a smoothness penalty.
    """
    config = config or RegistrationConfig()
    sub_full = _as_torch(subject)
    atl_full = _as_torch(atlas)

    theta = torch.zeros(3, 4, dtype=torch.float32)
    theta[:, :3] = torch.eye(3)
    theta.requires_grad_(True)
    identity = torch.eye(3)

    levels = []
    for factor, iters in zip(config.pyramid, config.iters):
        if factor > 1:
            if min(min(subject.shape), min(atlas.shape)) < 4 * factor:
                continue
            sub = F.avg_pool3d(sub_full, factor)
            atl = F.avg_pool3d(atl_full, factor)
        else:
            sub, atl = sub_full, atl_full
        levels.append((sub, atl, iters))

    def objective(sub, atl, base, target):
        grid = (base @ theta[:, :3].T + theta[:, 3]).reshape(1, *atl.shape[2:], 3)
        warped = F.grid_sample(sub, grid, align_corners=True, padding_mode="border")
        reg = ((theta[:, :3] - identity) ** 2).sum() + (theta[:, 3] ** 2).sum()
        loss = F.mse_loss(warped.reshape(-1), target) + config.lambda_reg * reg
        if not torch.isfinite(loss):
            raise RegistrationError("non-finite registration objective")
        return loss

    # Adam with cosine decay per level for robust basin finding, then an
    # LBFGS polish at each level tightens the optimum well past what Adam's
    # noise-normalized steps reach; the gradient break skips levels that are
    # already converged.
    for sub, atl, iters in levels:
        base = _norm_coord_grid(atl.shape[2:])
        target = atl.reshape(-1)
        opt = torch.optim.Adam([theta], lr=config.lr)
        for it in range(iters):
            for group in opt.param_groups:
                group["lr"] = config.lr * 0.5 * (1.0 + np.cos(np.pi * it / iters))
            opt.zero_grad()
            loss = objective(sub, atl, base, target)
            loss.backward()
            if theta.grad.abs().max() < 1e-6:
                break
            opt.step()

        polish = torch.optim.LBFGS(
            [theta],
            lr=1.0,
            max_iter=50,
            tolerance_grad=1e-9,
            tolerance_change=1e-12,
            line_search_fn="strong_wolfe",
        )

        def closure():
            polish.zero_grad()
            loss = objective(sub, atl, base, target)
            loss.backward()
            return loss

        polish.step(closure)

    theta_np = theta.detach().numpy().astype(np.float64)
    atlas_to_subject = _theta_to_world_affine(theta_np, subject, atlas)
    affine = AffineTransform(np.linalg.inv(atlas_to_subject))
    if config.kind == "affine":
        return affine

    if config.kind != "affine+disp":
        raise ValueError(f"unknown registration kind {config.kind!r}")

    g = config.disp_control_pts
    disp = torch.zeros(1, 3, g, g, g, requires_grad=True)
    theta_fixed = theta.detach()
    base_grid = F.affine_grid(theta_fixed[None], list(atl_full.shape), align_corners=True)
    opt = torch.optim.Adam([disp], lr=config.disp_lr)
    for _ in range(config.disp_iters):
        opt.zero_grad()
        up = F.interpolate(disp, size=atl_full.shape[2:], mode="trilinear", align_corners=True)
        grid = base_grid + up.permute(0, 2, 3, 4, 1)
        warped = F.grid_sample(sub_full, grid, align_corners=True, padding_mode="border")
        smooth = sum(
            (torch.diff(disp, dim=d) ** 2).mean() for d in range(2, 5)
        )
        loss = F.mse_loss(warped, atl_full) + config.lambda_smooth * smooth
        if not torch.isfinite(loss):
            raise RegistrationError("non-finite registration objective")
        loss.backward()
        opt.step()

    # normalized-coord displacement -> world mm: scale by subject half-extent
    # per (x,y,z) component, then reorder components and control axes to (z,y,x)
    disp_np = disp.detach().numpy()[0].astype(np.float64)  # (3=xyz, gz, gy, gx)
    ext_xyz = (np.asarray(subject.shape[::-1], dtype=np.float64) - 1) * subject.spacing[::-1]
    disp_world = disp_np * (ext_xyz / 2.0)[:, None, None, None]
    disp_world = disp_world[::-1]  # components now (z, y, x)
    low, high = atlas.bounds_world()
    return DisplacementTransform(
        affine=affine,
        disp_control=disp_world,
        atlas_low=low,
        atlas_high=high,
    )


@dataclass
class MappedCenters:
    centers_subject: np.ndarray  # (N, 3) world mm
    centers_normalized: np.ndarray  # (N, 3) in [0,1]^3
    outside: np.ndarray | None = None  # (N,) bool, vs subject bounds


def map_centers(transform, grid: AtlasGrid, subject: Volume | None = None) -> MappedCenters:
    """Map atlas patch centers into subject space via the inverse transform.

    Centers landing outside the subject volume are flagged, never dropped
    (their patches zero-pad), keeping region j aligned across subjects.
    """
    centers_subject = transform.apply_inverse(grid.centers_atlas)
    outside = None
    if subject is not None:
        low, high = subject.bounds_world()
        outside = np.any((centers_subject < low) | (centers_subject > high), axis=1)
    return MappedCenters(
        centers_subject=centers_subject,
        centers_normalized=grid.centers_normalized(),
        outside=outside,
    )


def extract_patches(volume: Volume, centers, patch_size) -> np.ndarray:
    """Crop axis-aligned patches centered at world-mm points; zero-pad outside.

    Centers round to the nearest voxel with ties toward negative infinity.
    """
    patch_size = tuple(int(p) for p in patch_size)
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    idx = np.ceil(volume.world_to_index(centers) - 0.5).astype(np.int64)
    out = np.zeros((len(centers),) + patch_size, dtype=np.float32)
    shape = volume.shape
    for n, c in enumerate(idx):
        lo = [c[d] - patch_size[d] // 2 for d in range(3)]
        src = tuple(
            slice(max(lo[d], 0), min(lo[d] + patch_size[d], shape[d])) for d in range(3)
        )
        if any(s.start >= s.stop for s in src):
            continue
        dst = tuple(
            slice(src[d].start - lo[d], src[d].stop - lo[d]) for d in range(3)
        )
        out[n][dst] = volume.data[src]
    return out


def build_adjacency(centers, threshold) -> np.ndarray:
    """Binary adjacency: edge iff 0 < Euclidean distance <= threshold (mm)."""
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    adj = (dist <= threshold).astype(np.uint8)
    np.fill_diagonal(adj, 0)
    return adj


def default_threshold_mm(grid: AtlasGrid) -> float:
    """Connects face-adjacent lattice neighbors but not diagonal ones."""
    return 1.1 * float(np.max(np.asarray(grid.stride) * grid.atlas_spacing))


@dataclass
class GraphBuildConfig:
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    threshold_mm: float | None = None  # None -> default_threshold_mm(grid)
    normalize: str = "zscore"
    adjacency_space: str = "subject"  # subject | atlas


def build_patch_graph(
    subject: SubjectRecord,
    atlas: Volume,
    grid: AtlasGrid,
    config: GraphBuildConfig | None = None,
) -> PatchGraph:
    """Register one subject to the atlas and assemble its patch graph."""
    config = config or GraphBuildConfig()
    sub_norm = normalize_volume(subject.volume, config.normalize)
    atlas_norm = normalize_volume(atlas, config.normalize)
    transform = fit_transform(sub_norm, atlas_norm, config.registration)
    mapped = map_centers(transform, grid, subject=sub_norm)
    patches = extract_patches(sub_norm, mapped.centers_subject, grid.patch_size)
    threshold = config.threshold_mm if config.threshold_mm is not None else default_threshold_mm(grid)
    if config.adjacency_space == "atlas":
        adjacency = build_adjacency(grid.centers_atlas, threshold)
    else:
        adjacency = build_adjacency(mapped.centers_subject, threshold)
    return PatchGraph(
        subject_id=subject.subject_id,
        region_ids=np.arange(grid.n_patches, dtype=np.int32),
        centers_subject=mapped.centers_subject,
        patches=patches,
        adjacency=adjacency,
        centers_atlas_normalized=mapped.centers_normalized,
        transform=transform,
    )


def save_patch_graph(graph: PatchGraph, path, provenance: dict | None = None) -> None:
    """One compressed archive per subject plus a JSON provenance sidecar."""
    path = Path(path)
    np.savez_compressed(
        path,
        subject_id=np.asarray(graph.subject_id),
        region_ids=graph.region_ids,
        centers_subject=graph.centers_subject,
        patches=graph.patches,
        adjacency=graph.adjacency,
        centers_atlas_normalized=graph.centers_atlas_normalized,
    )
    sidecar = dict(provenance or {})
    if graph.transform is not None:
        sidecar["transform"] = graph.transform.to_dict()
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def load_patch_graph(path) -> PatchGraph:
    path = Path(path)
    with np.load(path) as z:
        transform = None
        sidecar = path.with_suffix(".json")
        if sidecar.exists():
            with open(sidecar, encoding="utf-8") as f:
                meta = json.load(f)
            if "transform" in meta:
                transform = transform_from_dict(meta["transform"])
        return PatchGraph(
            subject_id=str(z["subject_id"]),
            region_ids=z["region_ids"],
            centers_subject=z["centers_subject"],
            patches=z["patches"],
            adjacency=z["adjacency"],
            centers_atlas_normalized=z["centers_atlas_normalized"],
            transform=transform,
        )
