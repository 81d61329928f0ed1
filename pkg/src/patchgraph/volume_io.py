"""Volumetric image I/O, label tables, and synthetic phantom generation.

Axis convention: Volume.data is indexed (z, y, x); spacing and origin use the
same order. World coordinates are millimetres: world = origin + index * spacing.
NIfTI files store x-fastest, so arrays are transposed on load/save.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import nifti
from .nifti import NiftiError

__all__ = [
    "Volume",
    "SubjectRecord",
    "PhantomSpec",
    "NiftiError",
    "load_volume",
    "save_volume",
    "load_labels",
    "generate_phantom",
    "normalize_volume",
]


@dataclass
class Volume:
    """A 3D scalar field with voxel spacing (mm) and world origin (mm)."""

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got ndim={self.data.ndim}")
        self.spacing = np.asarray(self.spacing, dtype=np.float32).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float32).reshape(3)
        if np.any(self.spacing <= 0):
            raise ValueError(f"spacing must be positive, got {tuple(self.spacing)}")

    @property
    def shape(self):
        return self.data.shape

    def index_to_world(self, idx):
        """Voxel indices (..., 3) in (z,y,x) order -> world mm coordinates."""
        return np.asarray(idx, dtype=np.float64) * self.spacing.astype(np.float64) + self.origin

    def world_to_index(self, world):
        """World mm coordinates (..., 3) -> fractional voxel indices."""
        return (np.asarray(world, dtype=np.float64) - self.origin) / self.spacing.astype(np.float64)

    def bounds_world(self):
        """(low, high) world coordinates of the voxel-center bounding box."""
        low = self.origin.astype(np.float64)
        high = self.index_to_world(np.asarray(self.shape, dtype=np.float64) - 1.0)
        return low, high


@dataclass
class SubjectRecord:
    """One subject: image volume, optional foreground mask, label map."""

    subject_id: str
    volume: Volume
    mask: Volume | None = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.volume.shape:
            raise ValueError(
                f"mask shape {self.mask.shape} != volume shape {self.volume.shape}"
            )


@dataclass
class PhantomSpec:
    """Deterministic recipe for one synthetic subject.

    The phantom is an ellipsoidal "organ" with a fixed smooth texture, built in
    a canonical space shared by all subjects with the same geometry fields.
    Lesions are uniform spheres of ``lesion_intensity_delta`` planted at cells
    of a regular lattice; the canonical image is then warped by a random
    smooth displacement plus a global affine, and per-subject gain/offset and
    voxel noise are added. Everything is a pure function of the spec.
    """

    shape: tuple = (40, 40, 40)
    n_regions_affected: int = 0
    lesion_intensity_delta: float = 0.35
    severity_rule: str = "presence"
    seed: int = 0
    # lattice of candidate lesion cells (matches the desk atlas grid layout)
    lattice_shape: tuple = (3, 3, 3)
    lattice_margin_frac: float = 0.2
    lesion_radius: float = 4.2
    # geometry/nuisance knobs
    warp_max_disp: float = 2.0
    rot_max_deg: float = 5.0
    scale_range: tuple = (0.92, 1.08)
    shift_max: float = 3.0
    gain_jitter: float = 0.15
    offset_jitter: float = 0.1
    noise_sigma: float = 0.04
    texture_amp: float = 0.6
    template_seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.lattice_shape = tuple(int(s) for s in self.lattice_shape)
        n_cells = int(np.prod(self.lattice_shape))
        if not 0 <= self.n_regions_affected <= n_cells:
            raise ValueError(
                f"n_regions_affected={self.n_regions_affected} outside [0, {n_cells}]"
            )

    @property
    def n_lattice_cells(self):
        return int(np.prod(self.lattice_shape))

    def lattice_centers(self):
        """Cell centers in voxel coordinates, lexicographic in (z, y, x)."""
        axes = []
        for dim, n in zip(self.shape, self.lattice_shape):
            margin = self.lattice_margin_frac * dim
            if n == 1:
                axes.append(np.array([dim / 2.0]))
            else:
                axes.append(margin + np.arange(n) * (dim - 2 * margin) / (n - 1))
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)


def load_volume(path) -> Volume:
    """Load a NIfTI-1 volume; intensities and metadata unmodified."""
    data_xyz, spacing_xyz, origin_xyz = nifti.read(path)
    return Volume(
        data=np.ascontiguousarray(data_xyz.transpose(2, 1, 0)),
        spacing=spacing_xyz[::-1].copy(),
        origin=origin_xyz[::-1].copy(),
    )


def save_volume(volume: Volume, path) -> None:
    """Write a Volume as NIfTI-1; load_volume(path) round-trips exactly."""
    nifti.write(
        path,
        volume.data.transpose(2, 1, 0),
        volume.spacing[::-1],
        volume.origin[::-1],
    )


def load_labels(path) -> dict:
    """Parse a labels CSV into {subject_id: {column: value}}.

    Columns where every non-empty cell parses as a number become scalars
    (int when all are integral, else float); other columns stay strings.
    Empty cells are explicit missing values (None), never zero.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "subject_id" not in reader.fieldnames:
            raise ValueError(f"{path}: missing subject_id column")
        columns = [c for c in reader.fieldnames if c != "subject_id"]
        rows = []
        for row in reader:
            sid = row["subject_id"]
            if any(sid == prev_sid for prev_sid, _ in rows):
                raise ValueError(f"{path}: duplicate subject_id {sid!r}")
            rows.append((sid, row))

    def parse_column(name):
        cells = [row[name] for _, row in rows]
        values = [None if c is None or c.strip() == "" else c for c in cells]
        present = [v for v in values if v is not None]
        try:
            floats = [float(v) for v in present]
        except ValueError:
            return values
        if all(float(v).is_integer() for v in floats):
            it = iter(int(float(v)) for v in floats)
        else:
            it = iter(floats)
        return [None if v is None else next(it) for v in values]

    parsed = {name: parse_column(name) for name in columns}
    return {
        sid: {name: parsed[name][i] for name in columns}
        for i, (sid, _) in enumerate(rows)
    }


def severity_from_rule(rule: str, n_affected: int) -> int:
    """Map a lesion count to a severity class per the rule string.

    "presence": 0 if no lesions else 1. "count:t1,t2,...": number of
    thresholds at or below the count (graded severity).
    """
    if rule == "presence":
        return int(n_affected > 0)
    if rule.startswith("count:"):
        thresholds = [int(t) for t in rule.split(":", 1)[1].split(",")]
        if thresholds != sorted(thresholds):
            raise ValueError(f"severity thresholds must be ascending: {rule!r}")
        return int(sum(n_affected >= t for t in thresholds))
    raise ValueError(f"unknown severity rule {rule!r}")


def _phantom_template(spec: PhantomSpec):
    """Canonical organ intensity field and binary mask (shared across subjects)."""
    shape = np.asarray(spec.shape, dtype=np.float64)
    center = (shape - 1) / 2.0
    semi_axes = shape * np.array([0.42, 0.38, 0.34])
    zz, yy, xx = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in spec.shape), indexing="ij")
    coords = np.stack([zz, yy, xx])
    e = sum(((coords[d] - center[d]) / semi_axes[d]) ** 2 for d in range(3))
    body = 1.0 / (1.0 + np.exp((e - 1.0) * 6.0))
    mask = e <= 1.0

    # multi-scale texture: the coarse layer drives registration basins, the
    # finer layers pin down the affine directions (rotation/shear/anisotropic
    # scale) that a smooth blob leaves ill-determined
    rng = np.random.default_rng(spec.template_seed)
    texture = np.zeros(spec.shape)
    for n_ctrl, weight in ((5, 1.0), (11, 0.7), (21, 0.5), (31, 0.35)):
        control = rng.normal(size=(n_ctrl, n_ctrl, n_ctrl))
        tex_coords = [coords[d] * (n_ctrl - 1) / (spec.shape[d] - 1) for d in range(3)]
        layer = ndimage.map_coordinates(control, tex_coords, order=3, mode="nearest")
        texture += weight * layer / max(np.abs(layer).max(), 1e-12)
    texture /= max(np.abs(texture).max(), 1e-12)

    template = body * (1.0 + spec.texture_amp * texture)
    return template, mask


def _smooth_displacement(rng, shape, max_disp, control_pts=4):
    """Random smooth displacement field (3, *shape) in voxel units."""
    control = rng.uniform(-max_disp, max_disp, size=(3, control_pts, control_pts, control_pts))
    if max_disp == 0:
        return np.zeros((3,) + tuple(shape))
    grids = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")
    out = np.empty((3,) + tuple(shape))
    for d in range(3):
        coords = [grids[a] * (control_pts - 1) / (shape[a] - 1) for a in range(3)]
        out[d] = ndimage.map_coordinates(control[d], coords, order=3, mode="nearest")
    return out


def _rotation_matrix(angles_rad):
    az, ay, ax = angles_rad
    cz, sz = np.cos(az), np.sin(az)
    cy, sy = np.cos(ay), np.sin(ay)
    cx, sx = np.cos(ax), np.sin(ax)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    return rz @ ry @ rx


def generate_phantom(spec: PhantomSpec) -> SubjectRecord:
    """Generate one synthetic subject; bit-deterministic given the spec."""
    rng = np.random.default_rng(spec.seed)
    template, mask = _phantom_template(spec)

    # Fixed draw order (cells, warp, affine, nuisance) regardless of which
    # components are active, so same-seed specs share geometry and noise.
    perm = rng.permutation(spec.n_lattice_cells)
    affected = np.sort(perm[: spec.n_regions_affected])
    warp = _smooth_displacement(rng, spec.shape, spec.warp_max_disp)
    angles = rng.uniform(-1.0, 1.0, size=3) * np.deg2rad(spec.rot_max_deg)
    scales = rng.uniform(spec.scale_range[0], spec.scale_range[1], size=3)
    shift = rng.uniform(-spec.shift_max, spec.shift_max, size=3)
    gain = 1.0 + rng.uniform(-spec.gain_jitter, spec.gain_jitter)
    offset = rng.uniform(-spec.offset_jitter, spec.offset_jitter)
    noise = rng.normal(0.0, 1.0, size=spec.shape)

    lesioned = template.copy()
    centers = spec.lattice_centers()
    zz, yy, xx = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in spec.shape), indexing="ij")
    for cell in affected:
        cz, cy, cx = centers[cell]
        inside = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= spec.lesion_radius**2
        lesioned[inside & mask] += spec.lesion_intensity_delta

    # subject(x) = canonical(A(x) + u(x)): global affine about the center plus
    # a smooth additive displacement, sampled with trilinear interpolation
    center = (np.asarray(spec.shape, dtype=np.float64) - 1) / 2.0
    rot = _rotation_matrix(angles) @ np.diag(scales)
    grid = np.stack([zz, yy, xx])
    rel = grid.reshape(3, -1) - center[:, None]
    warped = (rot @ rel + (center + shift)[:, None]).reshape(3, *spec.shape) + warp

    img = ndimage.map_coordinates(lesioned, warped, order=1, cval=0.0)
    sub_mask = ndimage.map_coordinates(mask.astype(np.float64), warped, order=1, cval=0.0) > 0.5
    img = gain * img + offset + spec.noise_sigma * noise

    labels = {
        "severity": severity_from_rule(spec.severity_rule, spec.n_regions_affected),
        "burden": float(spec.n_regions_affected),
    }
    width = len(str(spec.n_lattice_cells - 1))
    for cell in range(spec.n_lattice_cells):
        labels[f"lesion_{cell:0{width}d}"] = int(cell in affected)

    spacing = np.asarray(spec.spacing, dtype=np.float32)
    return SubjectRecord(
        subject_id=f"s{spec.seed:05d}",
        volume=Volume(img.astype(np.float32), spacing=spacing),
        mask=Volume(sub_mask.astype(np.uint8), spacing=spacing),
        labels=labels,
    )


def normalize_volume(volume: Volume, method: str = "zscore") -> Volume:
    """Return an intensity-normalized copy; metadata unchanged."""
    if method == "none":
        return Volume(volume.data.copy(), volume.spacing.copy(), volume.origin.copy())
    if method == "zscore":
        data = volume.data.astype(np.float32)
        std = float(data.std())
        data = (data - float(data.mean())) / max(std, 1e-8)
        return Volume(data, volume.spacing.copy(), volume.origin.copy())
    raise ValueError(f"unknown normalization method {method!r}")
