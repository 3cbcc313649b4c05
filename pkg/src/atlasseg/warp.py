"""Deformation fields, backward warping, and surface projection.

A field stores per-voxel displacements ``u`` in voxel units of the common
grid, so the full map is ``phi(x) = x + u(x)`` from atlas grid coordinates
to target grid coordinates. Warping a target volume onto the atlas grid
evaluates ``o(x) = t(x + u(x))`` by trilinear interpolation with replicate
padding outside the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.measure import marching_cubes as _sk_marching_cubes

from .errors import DataError, NumericalError
from .volume import BinaryMask, Volume, _trilinear_gather


@dataclass(frozen=True)
class DeformationField:
    """Per-voxel 3-vector displacement, shape (3, nx, ny, nz), voxel units."""

    disp: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        disp = np.asarray(self.disp, dtype=np.float64)
        if disp.ndim != 4 or disp.shape[0] != 3:
            raise DataError(f"displacement must have shape (3, nx, ny, nz), got {disp.shape}")
        if not np.all(np.isfinite(disp)):
            raise DataError("displacement contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in spacing):
            raise DataError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "disp", disp)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.disp.shape[1:]

    @classmethod
    def zero(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "DeformationField":
        return cls(np.zeros((3, *dims)), spacing)


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangle mesh with vertices in physical mm."""

    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise DataError("triangle indices out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)


def sample_trilinear(v: Volume, p) -> float:
    """Trilinear interpolation of ``v`` at voxel coordinates ``p`` (clamped)."""
    coords = np.asarray(p, dtype=np.float64).reshape(1, 3)
    return float(_trilinear_gather(v.data, coords)[0])


def _grid_coords(dims) -> np.ndarray:
    """(N, 3) array of integer voxel coordinates in x-fastest-last C order."""
    xx, yy, zz = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def _check_same_grid(dims_a, spacing_a, dims_b, spacing_b):
    if tuple(dims_a) != tuple(dims_b) or not np.allclose(spacing_a, spacing_b):
        raise DataError(f"grid mismatch: {dims_a}@{spacing_a} vs {dims_b}@{spacing_b}")


def warp_volume(t: Volume, f: DeformationField) -> Volume:
    """Backward-warp ``t`` onto the atlas grid: ``o(x) = t(x + u(x))``."""
    _check_same_grid(t.dims, t.spacing, f.dims, f.spacing)
    coords = _grid_coords(f.dims) + f.disp.reshape(3, -1).T
    values = _trilinear_gather(t.data, coords)
    return Volume(values.reshape(t.dims), t.spacing)


def field_gradient(f: DeformationField) -> np.ndarray:
    """Forward-difference Jacobian of the displacement, shape (3, 3, nx, ny, nz).

    Entry [c, a] is du_c/dx_a in voxel units. The forward difference is
    undefined at the far face along each axis and is set to zero there.
    """
    dims = f.dims
    if min(dims) < 2:
        raise DataError("field gradient requires at least 2 voxels per axis")
    jac = np.zeros((3, 3, *dims))
    for axis in range(3):
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[axis + 1] = slice(0, -1)
        hi[axis + 1] = slice(1, None)
        jac[(slice(None), axis, *lo[1:])] = f.disp[tuple(hi)] - f.disp[tuple(lo)]
    return jac


def project_surface(s: SurfaceMesh, f: DeformationField) -> SurfaceMesh:
    """Map mesh vertices through ``phi``: p -> physical(voxel(p) + u(p))."""
    spacing = np.asarray(f.spacing)
    vox = s.vertices / spacing - 0.5
    u = np.stack([_trilinear_gather(f.disp[c], vox) for c in range(3)], axis=1)
    moved = (vox + u + 0.5) * spacing
    return SurfaceMesh(moved, s.triangles)


def invert_field(f: DeformationField, max_iter: int = 200, tol: float = 1e-3,
                 damping: float = 0.5, fail_tol: float | None = None) -> DeformationField:
    """Approximate inverse displacement by damped fixed-point iteration.

    Solves v(y) = -u(y + v(y)) via v <- (1-a) v + a (-u(y + v)). The
    damping extends convergence to fields whose local displacement Jacobian
    temporarily exceeds a contraction (per-voxel optimized fields are spiky);
    the undamped iteration oscillates there.

    Iterates until the max-norm update drops below ``tol`` voxels or
    ``max_iter`` is reached. Locally folded fields have no exact inverse and
    plateau above ``tol``; a caller that only needs bounded accuracy can pass
    ``fail_tol`` to accept such plateaus. Raises NumericalError with the
    achieved residual when it exceeds ``fail_tol`` (default: ``tol``).
    """
    dims = f.dims
    grid = _grid_coords(dims)
    v = np.zeros_like(grid)
    residual = np.inf
    for _ in range(max_iter):
        coords = grid + v
        u_at = np.stack([_trilinear_gather(f.disp[c], coords) for c in range(3)], axis=1)
        v_new = (1.0 - damping) * v - damping * u_at
        residual = float(np.abs(v_new - v).max())
        v = v_new
        if residual < tol:
            break
    if residual >= (tol if fail_tol is None else fail_tol):
        raise NumericalError(
            f"field inversion did not converge: residual {residual:.3e} voxels "
            f"after {max_iter} iterations (tol {tol:.1e})"
        )
    return DeformationField(v.T.reshape(3, *dims), f.spacing)


def rasterize_projected_mask(
    a: BinaryMask, f: DeformationField, max_iter: int = 200, tol: float = 1e-3,
    fail_tol: float = 0.25,
) -> BinaryMask:
    """Target-space binary mask of the atlas segmentation under ``phi``.

    Inverts the field by damped fixed-point iteration, then nearest-neighbor
    samples the atlas mask at x = y + v(y). Inversion aims for ``tol`` but a
    plateau below ``fail_tol`` (a quarter voxel, under the nearest-neighbor
    quantization) is accepted: predicted fields can fold locally, where no
    exact inverse exists at all.
    """
    _check_same_grid(a.dims, a.spacing, f.dims, f.spacing)
    inv = invert_field(f, max_iter=max_iter, tol=tol, fail_tol=fail_tol)
    coords = _grid_coords(a.dims) + inv.disp.reshape(3, -1).T
    hi = np.asarray(a.dims) - 1
    nearest = np.clip(np.rint(coords).astype(np.int64), 0, hi)
    values = a.data[nearest[:, 0], nearest[:, 1], nearest[:, 2]]
    return BinaryMask(values.reshape(a.dims), a.spacing)


def random_smooth_field(
    dims,
    control_spacing: int,
    amplitude: float,
    seed: int,
    spacing=(1.0, 1.0, 1.0),
) -> DeformationField:
    """Gaussian displacements on a coarse control grid, upsampled trilinearly.

    Control vectors are i.i.d. N(0, amplitude^2) per component; the dense
    field interpolates them, so |u| stays on the order of ``amplitude``
    voxels. Deterministic in ``seed``.

    Empirically, amplitude <= 0.1 * control_spacing keeps the map
    x + u(x) fold-free (positive Jacobian determinant everywhere); compose
    several such fields (compose_fields) when larger warps are needed.
    """
    if control_spacing < 2:
        raise DataError("control_spacing must be >= 2")
    if amplitude < 0:
        raise DataError("amplitude must be >= 0")
    dims = tuple(int(d) for d in dims)
    rng = np.random.Generator(np.random.PCG64(seed))
    n_ctrl = [int(np.ceil((n - 1) / control_spacing)) + 1 for n in dims]
    ctrl = rng.normal(0.0, 1.0, size=(3, *n_ctrl)) * amplitude
    if amplitude == 0.0:
        return DeformationField.zero(dims, spacing)
    coords = _grid_coords(dims) / float(control_spacing)
    disp = np.stack([_trilinear_gather(ctrl[c], coords) for c in range(3)])
    return DeformationField(disp.reshape(3, *dims), spacing)


def compose_fields(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """Displacement of the composed map phi_outer(phi_inner(x)).

    u(x) = u_inner(x) + u_outer(x + u_inner(x)); the composition of two
    fold-free maps is fold-free, which is how large random warps are built
    from several small ones.
    """
    _check_same_grid(outer.dims, outer.spacing, inner.dims, inner.spacing)
    coords = _grid_coords(inner.dims) + inner.disp.reshape(3, -1).T
    u_out = np.stack([_trilinear_gather(outer.disp[c], coords) for c in range(3)], axis=1)
    total = inner.disp + u_out.T.reshape(3, *inner.dims)
    return DeformationField(total, inner.spacing)


def marching_cubes_surface(m: BinaryMask) -> SurfaceMesh:
    """Iso-surface of the {0,1} mask at level 0.5, vertices in physical mm."""
    if m.foreground_count() == 0:
        raise DataError("cannot extract a surface from an empty mask")
    # Pad so components touching the grid edge still close.
    padded = np.pad(m.data.astype(np.float64), 1)
    verts, faces, _, _ = _sk_marching_cubes(padded, level=0.5)
    # skimage reports index coordinates on the padded grid; shift back and
    # convert to voxel-center physical coordinates.
    verts_mm = (verts - 1.0 + 0.5) * np.asarray(m.spacing)
    return SurfaceMesh(verts_mm, faces.astype(np.int64))
