"""Fast-marching signed distance maps and the boundary-band weight map.

The distance map approximates the signed Euclidean distance (mm) to the
segmentation interface, taken as the 0.5 level of the binary mask: between
two face-adjacent voxels with different labels the interface crosses halfway.
Distances are negative inside the mask, positive outside.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .volume import BinaryMask, Volume


@dataclass(frozen=True)
class DistanceMap:
    """Signed distances in mm; negative inside the source mask."""

    volume: Volume


@dataclass(frozen=True)
class WeightMap:
    """Smoothness weights in [0.5, 1.0], largest at the mask boundary."""

    volume: Volume

    def __post_init__(self):
        d = self.volume.data
        if d.min() < 0.5 - 1e-12 or d.max() > 1.0 + 1e-12:
            raise DataError("weight map values must lie in [0.5, 1.0]")


_NEIGHBORS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def _solve_eikonal(m, s):
    """First-order upwind solve of sum_a max(0, (T - m_a)/s_a)^2 = 1.

    ``m`` holds the per-axis minimum accepted neighbor values (inf where
    none) and ``s`` the per-axis spacings. Axes are folded in ascending
    order of m; the solution with k axes is valid only if it does not
    exceed the next axis value, otherwise that axis joins the quadratic.
    """
    pairs = sorted((mv, sv) for mv, sv in zip(m, s) if mv != np.inf)
    t = np.inf
    acc_a = acc_b = 0.0
    acc_c = -1.0
    for k, (mv, sv) in enumerate(pairs):
        w = 1.0 / (sv * sv)
        acc_a += w
        acc_b += mv * w
        acc_c += mv * mv * w
        disc = acc_b * acc_b - acc_a * acc_c
        if disc < 0.0:
            break  # causality fallback: keep the previous-level root
        root = (acc_b + np.sqrt(disc)) / acc_a
        t = root
        if k + 1 >= len(pairs) or root <= pairs[k + 1][0]:
            break
    return t


def fast_marching_signed_distance(m: BinaryMask) -> DistanceMap:
    """First-order fast marching solution of |grad D| = 1 from the interface.

    Frontier voxels on both sides are initialized with their sub-voxel
    distance to the half-way interface crossings, then a single binary-heap
    sweep propagates distances outward over both regions. The result is
    negated inside the mask.
    """
    mask = m.data.astype(bool)
    n_fg = int(mask.sum())
    if n_fg == 0 or n_fg == mask.size:
        raise DataError("fast marching needs both foreground and background voxels")

    dims = m.dims
    spacing = np.asarray(m.spacing)
    dist = np.full(dims, np.inf)
    accepted = np.zeros(dims, dtype=bool)

    # Sub-voxel initialization: a frontier voxel is 0.5 * spacing[a] from the
    # interface along each axis where a face neighbor has the other label.
    # Combined multi-axis estimate: d = 1 / sqrt(sum_a 1/d_a^2).
    inv_sq = np.zeros(dims)
    for axis in range(3):
        add = 1.0 / (0.5 * spacing[axis]) ** 2
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        crossing = mask[tuple(lo)] != mask[tuple(hi)]
        tmp = np.zeros(dims)
        tmp[tuple(lo)] += crossing * add
        tmp[tuple(hi)] += crossing * add
        # Crossings on both faces of one axis still mean half a step away.
        np.minimum(tmp, add, out=tmp)
        inv_sq += tmp

    frontier = inv_sq > 0
    dist[frontier] = 1.0 / np.sqrt(inv_sq[frontier])

    heap = []
    counter = 0
    for x, y, z in np.argwhere(frontier):
        heapq.heappush(heap, (dist[x, y, z], counter, int(x), int(y), int(z)))
        counter += 1

    nx, ny, nz = dims
    sp = tuple(float(s) for s in spacing)
    while heap:
        d, _, x, y, z = heapq.heappop(heap)
        if accepted[x, y, z]:
            continue
        accepted[x, y, z] = True
        for dx, dy, dz in _NEIGHBORS:
            qx, qy, qz = x + dx, y + dy, z + dz
            if not (0 <= qx < nx and 0 <= qy < ny and 0 <= qz < nz):
                continue
            if accepted[qx, qy, qz]:
                continue
            m_ax = []
            for axis, (nq, lim) in enumerate(((qx, nx), (qy, ny), (qz, nz))):
                best = np.inf
                if nq > 0:
                    idx = (qx - (axis == 0), qy - (axis == 1), qz - (axis == 2))
                    if accepted[idx]:
                        best = dist[idx]
                if nq + 1 < lim:
                    idx = (qx + (axis == 0), qy + (axis == 1), qz + (axis == 2))
                    if accepted[idx] and dist[idx] < best:
                        best = dist[idx]
                m_ax.append(best)
            t = _solve_eikonal(m_ax, sp)
            if t < dist[qx, qy, qz]:
                dist[qx, qy, qz] = t
                heapq.heappush(heap, (t, counter, qx, qy, qz))
                counter += 1

    signed = np.where(mask, -dist, dist)
    return DistanceMap(Volume(signed, m.spacing))


def weight_map(d: DistanceMap, t_lower: float = 1.0, t_upper: float = 4.0) -> WeightMap:
    """Clamped linear ramp from 1.0 at the boundary down to 0.5 beyond t_upper.

    W = 0.5 + (t_U - clamp(|D|, t_L, t_U)) / (2 (t_U - t_L)), thresholds in mm.
    """
    if not (0.0 < t_lower < t_upper):
        raise DataError(f"require 0 < t_lower < t_upper, got ({t_lower}, {t_upper})")
    a = np.abs(d.volume.data)
    clamped = np.clip(a, t_lower, t_upper)
    w = 0.5 + (t_upper - clamped) / (2.0 * (t_upper - t_lower))
    return WeightMap(Volume(w, d.volume.spacing))
