"""Core volume types and intensity/geometry preprocessing.

Conventions used throughout the package:

* ``data[x, y, z]`` indexing; when flattened to disk the x index varies
  fastest (Fortran order).
* The center of voxel ``i`` sits at physical coordinate ``(i + 0.5) * spacing``
  millimeters along each axis, with the grid origin at the corner of voxel
  ``(0, 0, 0)``.
* All in-memory scalar math is float64; file formats may store narrower
  types and are widened on load.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar grid with physical voxel spacing in mm.

    ``data`` is treated as immutable after construction; operations return
    new volumes.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"volume data must be 3D and non-empty, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume data contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise DataError(f"spacing must be 3 positive reals, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def voxel_centers_mm(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-axis physical coordinates of voxel centers."""
        return tuple(
            (np.arange(n, dtype=np.float64) + 0.5) * s
            for n, s in zip(self.dims, self.spacing)
        )


@dataclass(frozen=True)
class BinaryMask:
    """Per-voxel {0,1} labels on the same grid layout as Volume."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"mask data must be 3D and non-empty, got shape {data.shape}")
        if not np.isin(data, (0, 1)).all():
            raise DataError("mask values must be 0 or 1")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise DataError(f"spacing must be 3 positive reals, got {self.spacing}")
        object.__setattr__(self, "data", data.astype(np.uint8))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def foreground_count(self) -> int:
        return int(self.data.sum())

    def as_volume(self) -> Volume:
        return Volume(self.data.astype(np.float64), self.spacing)


@dataclass(frozen=True)
class AffineTransform:
    """4x4 row-major matrix mapping atlas physical mm to source physical mm."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise DataError(f"affine must be 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise DataError("affine last row must be (0, 0, 0, 1)")
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise DataError("affine upper-left 3x3 block is singular")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    def apply(self, points_mm: np.ndarray) -> np.ndarray:
        """Map an (N, 3) array of physical points through the transform."""
        p = np.asarray(points_mm, dtype=np.float64)
        return p @ self.matrix[:3, :3].T + self.matrix[:3, 3]


@dataclass(frozen=True)
class NormalizationConstants:
    i_min: float
    i_max: float

    def __post_init__(self):
        if not (self.i_max > self.i_min):
            raise DataError(f"require i_max > i_min, got ({self.i_min}, {self.i_max})")


def compute_normalization(training_volumes) -> NormalizationConstants:
    """Average the per-volume minimum and maximum intensities over a dataset."""
    volumes = list(training_volumes)
    if not volumes:
        raise DataError("cannot compute normalization constants from an empty dataset")
    i_min = float(np.mean([v.data.min() for v in volumes]))
    i_max = float(np.mean([v.data.max() for v in volumes]))
    if not i_max > i_min:
        raise DataError("dataset is constant-valued; normalization undefined")
    return NormalizationConstants(i_min, i_max)


def normalize_volume(t: Volume, c: NormalizationConstants) -> Volume:
    """Affine intensity map (v - i_min) / (i_max - i_min).

    Values outside [0, 1] are allowed: outlier intensities beyond the dataset
    extrema pass through the same affine map.
    """
    scaled = (t.data - c.i_min) / (c.i_max - c.i_min)
    return Volume(scaled, t.spacing)


def mask_centroid(m: BinaryMask) -> np.ndarray:
    """Mean of foreground voxel centers in physical mm."""
    idx = np.argwhere(m.data > 0)
    if idx.shape[0] == 0:
        raise DataError("centroid of an empty mask is undefined")
    centers = (idx.astype(np.float64) + 0.5) * np.asarray(m.spacing)
    return centers.mean(axis=0)


def _trilinear_gather(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of ``data`` at (N, 3) voxel coordinates.

    Coordinates are clamped to the grid (replicate padding outside).
    """
    nx, ny, nz = data.shape
    p = np.empty_like(coords)
    np.clip(coords[:, 0], 0.0, nx - 1.0, out=p[:, 0])
    np.clip(coords[:, 1], 0.0, ny - 1.0, out=p[:, 1])
    np.clip(coords[:, 2], 0.0, nz - 1.0, out=p[:, 2])

    i0 = np.minimum(np.floor(p).astype(np.int64), np.array([nx - 2, ny - 2, nz - 2]))
    i0 = np.maximum(i0, 0)
    f = p - i0
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz

    c000 = data[x0, y0, z0]
    c100 = data[x0 + 1, y0, z0]
    c010 = data[x0, y0 + 1, z0]
    c110 = data[x0 + 1, y0 + 1, z0]
    c001 = data[x0, y0, z0 + 1]
    c101 = data[x0 + 1, y0, z0 + 1]
    c011 = data[x0, y0 + 1, z0 + 1]
    c111 = data[x0 + 1, y0 + 1, z0 + 1]

    return (
        gz * (gy * (gx * c000 + fx * c100) + fy * (gx * c010 + fx * c110))
        + fz * (gy * (gx * c001 + fx * c101) + fy * (gx * c011 + fx * c111))
    )


def crop_to_atlas_box(
    source: Volume,
    affine: AffineTransform,
    atlas_centroid_mm,
    crop_dims: tuple[int, int, int],
    crop_spacing: tuple[float, float, float],
) -> Volume:
    """Resample ``source`` onto a crop grid centered on a point in atlas space.

    The output grid has ``crop_dims`` voxels at ``crop_spacing`` mm, centered
    on ``atlas_centroid_mm``. Each output voxel center is mapped through
    ``affine`` into source physical space and sampled trilinearly. Output
    voxels whose source coordinates fall outside the source grid are assigned
    the mean of the in-bounds sampled voxels of this crop.
    """
    centroid = np.asarray(atlas_centroid_mm, dtype=np.float64)
    dims = tuple(int(d) for d in crop_dims)
    spacing = tuple(float(s) for s in crop_spacing)
    if any(d < 1 for d in dims) or any(s <= 0 for s in spacing):
        raise DataError("crop dims must be >= 1 and spacing > 0")

    axes = [
        centroid[a] + (np.arange(dims[a]) + 0.5 - dims[a] / 2.0) * spacing[a]
        for a in range(3)
    ]
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    atlas_mm = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    source_mm = affine.apply(atlas_mm)
    src_vox = source_mm / np.asarray(source.spacing) - 0.5

    hi = np.asarray(source.dims, dtype=np.float64) - 1.0
    in_bounds = np.all((src_vox >= 0.0) & (src_vox <= hi), axis=1)
    if not in_bounds.any():
        raise DataError("crop box lies entirely outside the source volume")

    values = _trilinear_gather(source.data, src_vox)
    if not in_bounds.all():
        values = values.copy()
        values[~in_bounds] = values[in_bounds].mean()
    return Volume(values.reshape(dims), spacing)


# Crop profiles: 64-cube at fine spacing for small ear-canal anatomy,
# coarse spacing for trachea/kidney scale structures.
CROP_PROFILES = {
    "iac": {"dims": (64, 64, 64), "spacing": (0.30, 0.30, 0.30)},
    "coarse": {"dims": (64, 64, 64), "spacing": (2.84375, 2.84375, 2.84375)},
}
