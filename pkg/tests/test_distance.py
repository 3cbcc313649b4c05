import numpy as np
import pytest

from atlasseg.distance import (DistanceMap, fast_marching_signed_distance,
                               weight_map)
from atlasseg.errors import DataError
from atlasseg.volume import BinaryMask, Volume


def sphere_mask(dims=(17, 17, 17), radius=5.0, spacing=(1.0, 1.0, 1.0)):
    centers = np.stack(np.meshgrid(*(np.arange(n) + 0.5 for n in dims),
                                   indexing="ij"), axis=-1)
    middle = np.asarray(dims) / 2.0
    m = (np.linalg.norm((centers - middle) * np.asarray(spacing), axis=-1)
         <= radius).astype(np.uint8)
    return BinaryMask(m, spacing)


def interface_points(mask: BinaryMask) -> np.ndarray:
    """Midpoints between face-adjacent voxels with different labels, in mm."""
    m = mask.data.astype(bool)
    spacing = np.asarray(mask.spacing)
    pts = []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        cross = np.argwhere(m[tuple(lo)] != m[tuple(hi)])
        centers = (cross + 0.5) * spacing
        centers[:, axis] += 0.5 * spacing[axis]
        pts.append(centers)
    return np.concatenate(pts, axis=0)


class TestFastMarching:
    def test_frontier_voxels_near_half_spacing(self):
        m = np.zeros((10, 10, 10), dtype=np.uint8)
        m[:5] = 1  # flat interface between x=4 and x=5
        d = fast_marching_signed_distance(BinaryMask(m, (2.0, 2.0, 2.0)))
        np.testing.assert_allclose(d.volume.data[4], -1.0, atol=1e-9)
        np.testing.assert_allclose(d.volume.data[5], 1.0, atol=1e-9)
        # one unit-speed step beyond an initialized frontier voxel
        np.testing.assert_allclose(d.volume.data[6], 3.0, atol=0.3 * 2.0)

    def test_sphere_against_bruteforce(self):
        mask = sphere_mask()
        d = fast_marching_signed_distance(mask).volume.data
        boundary = interface_points(mask)
        centers = np.stack(np.meshgrid(*(np.arange(n) + 0.5 for n in (17, 17, 17)),
                                       indexing="ij"), axis=-1).reshape(-1, 3)
        exact = np.sqrt(
            ((centers[:, None, :] - boundary[None, :, :]) ** 2).sum(-1)).min(1)
        exact = exact.reshape(17, 17, 17)
        err = np.abs(np.abs(d) - exact)
        assert err.max() <= 0.6

    def test_sign_convention(self):
        mask = sphere_mask()
        d = fast_marching_signed_distance(mask).volume.data
        assert np.all(d[mask.data.astype(bool)] < 0)
        assert np.all(d[~mask.data.astype(bool)] > 0)

    def test_complement_symmetry(self):
        mask = sphere_mask((12, 12, 12), radius=3.5)
        comp = BinaryMask(1 - mask.data, mask.spacing)
        d1 = fast_marching_signed_distance(mask).volume.data
        d2 = fast_marching_signed_distance(comp).volume.data
        assert np.abs(d1 + d2).max() <= 1.0  # equal up to sign within a voxel band

    def test_lipschitz_in_physical_space(self):
        rng = np.random.default_rng(0)
        m = (rng.uniform(size=(16, 16, 16)) < 0.3).astype(np.uint8)
        m[8, 8, 8] = 1
        spacing = (1.0, 1.5, 0.75)
        d = fast_marching_signed_distance(BinaryMask(m, spacing)).volume.data
        centers = np.stack(np.meshgrid(*((np.arange(16) + 0.5) * s for s in spacing),
                                       indexing="ij"), axis=-1).reshape(-1, 3)
        flat = d.reshape(-1)
        idx = rng.integers(0, flat.size, size=(500, 2))
        idx = idx[idx[:, 0] != idx[:, 1]]
        gap = np.abs(flat[idx[:, 0]] - flat[idx[:, 1]])
        dist = np.linalg.norm(centers[idx[:, 0]] - centers[idx[:, 1]], axis=1)
        assert np.all(gap <= 1.1 * dist + 1e-9)

    def test_anisotropic_spacing_scales_distances(self):
        m = np.zeros((8, 8, 8), dtype=np.uint8)
        m[:4] = 1
        d = fast_marching_signed_distance(BinaryMask(m, (3.0, 1.0, 1.0))).volume.data
        np.testing.assert_allclose(d[4], 1.5, atol=1e-9)  # half of x spacing

    def test_uniform_mask_errors(self):
        with pytest.raises(DataError):
            fast_marching_signed_distance(BinaryMask(np.ones((4, 4, 4), np.uint8), (1, 1, 1)))
        with pytest.raises(DataError):
            fast_marching_signed_distance(BinaryMask(np.zeros((4, 4, 4), np.uint8), (1, 1, 1)))


class TestWeightMap:
    def make_distance(self, values):
        return DistanceMap(Volume(np.asarray(values, dtype=np.float64).reshape(1, 1, -1),
                                  (1.0, 1.0, 1.0)))

    def test_clamp_endpoints(self):
        d = self.make_distance([0.0, 0.5, 1.0, -0.3, 4.0, 7.5, -9.0])
        w = weight_map(d, 1.0, 4.0).volume.data.ravel()
        np.testing.assert_allclose(w[:4], 1.0)
        np.testing.assert_allclose(w[4:], 0.5)

    def test_midpoint_value(self):
        d = self.make_distance([2.5])
        w = weight_map(d, 1.0, 4.0).volume.data.ravel()
        assert w[0] == pytest.approx(0.75, abs=1e-12)

    def test_piecewise_linear_and_range(self):
        xs = np.linspace(-6, 6, 241)
        d = self.make_distance(xs)
        w = weight_map(d, 1.0, 4.0).volume.data.ravel()
        assert w.min() >= 0.5 and w.max() <= 1.0
        inside = (np.abs(xs) >= 1.0) & (np.abs(xs) <= 4.0)
        np.testing.assert_allclose(w[inside], 0.5 + (4.0 - np.abs(xs[inside])) / 6.0,
                                   atol=1e-12)

    def test_sign_of_distance_irrelevant(self):
        xs = np.linspace(0.2, 5.0, 25)
        w_pos = weight_map(self.make_distance(xs), 1.0, 4.0).volume.data
        w_neg = weight_map(self.make_distance(-xs), 1.0, 4.0).volume.data
        np.testing.assert_array_equal(w_pos, w_neg)

    def test_monotone_in_abs_distance(self):
        xs = np.linspace(0, 8, 33)
        w = weight_map(self.make_distance(xs), 1.0, 4.0).volume.data.ravel()
        assert np.all(np.diff(w) <= 1e-15)

    def test_threshold_validation(self):
        d = self.make_distance([1.0])
        with pytest.raises(DataError):
            weight_map(d, 4.0, 1.0)
        with pytest.raises(DataError):
            weight_map(d, 0.0, 4.0)
