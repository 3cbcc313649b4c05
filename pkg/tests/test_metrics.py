import json

import numpy as np
import pytest

from atlasseg.errors import DataError, UsageError
from atlasseg.metrics import (MetricsRecord, compare_methods, dice, glyph, hd95,
                              paired_t_test, point_surface_distance,
                              read_records_csv, report, significance_tier,
                              summarize_records, surface_points,
                              write_records_csv)
from atlasseg.volume import BinaryMask
from atlasseg.warp import SurfaceMesh, marching_cubes_surface


def mask_from(slices, dims=(12, 12, 12), spacing=(1.0, 1.0, 1.0)):
    m = np.zeros(dims, dtype=np.uint8)
    m[slices] = 1
    return BinaryMask(m, spacing)


class TestDice:
    def test_identical(self):
        m = mask_from((slice(2, 8), slice(2, 8), slice(2, 8)))
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = mask_from((slice(0, 3), slice(0, 3), slice(0, 3)))
        b = mask_from((slice(6, 9), slice(6, 9), slice(6, 9)))
        assert dice(a, b) == 0.0

    def test_shifted_cube_arithmetic(self):
        a = mask_from((slice(2, 6), slice(2, 6), slice(2, 6)))
        b = mask_from((slice(4, 8), slice(2, 6), slice(2, 6)))
        assert dice(a, b) == pytest.approx(2 * (2 * 4 * 4) / (64 + 64))

    def test_symmetry_and_monotonicity(self):
        rng = np.random.default_rng(0)
        a = BinaryMask((rng.uniform(size=(8, 8, 8)) < 0.4).astype(np.uint8), (1, 1, 1))
        b = BinaryMask((rng.uniform(size=(8, 8, 8)) < 0.4).astype(np.uint8), (1, 1, 1))
        assert dice(a, b) == dice(b, a)

    def test_exclusion_region(self):
        a = mask_from((slice(2, 6), slice(2, 6), slice(2, 6)))
        b = mask_from((slice(4, 8), slice(2, 6), slice(2, 6)))
        # exclude everything that distinguishes them: dice becomes 1
        excl = np.zeros((12, 12, 12), dtype=np.uint8)
        excl[2:4] = 1
        excl[6:8] = 1
        assert dice(a, b, BinaryMask(excl, (1, 1, 1))) == 1.0

    def test_all_zero_exclusion_is_noop(self):
        a = mask_from((slice(2, 6), slice(2, 6), slice(2, 6)))
        b = mask_from((slice(3, 7), slice(2, 6), slice(2, 6)))
        zero = BinaryMask(np.zeros((12, 12, 12), np.uint8), (1, 1, 1))
        assert dice(a, b, zero) == dice(a, b)

    def test_exhaustive_oracle_small_grids(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a_arr = (rng.uniform(size=(6, 6, 6)) < 0.5).astype(np.uint8)
            b_arr = (rng.uniform(size=(6, 6, 6)) < 0.5).astype(np.uint8)
            a_arr[0, 0, 0] = 1
            b_arr[0, 0, 0] = 1
            inter = sum(1 for i in range(6) for j in range(6) for k in range(6)
                        if a_arr[i, j, k] and b_arr[i, j, k])
            expected = 2 * inter / (a_arr.sum() + b_arr.sum())
            got = dice(BinaryMask(a_arr, (1, 1, 1)), BinaryMask(b_arr, (1, 1, 1)))
            assert got == pytest.approx(expected, abs=1e-15)

    def test_empty_after_exclusion_errors(self):
        a = mask_from((slice(2, 4), slice(2, 4), slice(2, 4)))
        excl = BinaryMask(np.ones((12, 12, 12), np.uint8), (1, 1, 1))
        with pytest.raises(DataError):
            dice(a, a, excl)


def brute_force_hd95(mesh_a, mesh_b, spacing_mm):
    """Independent pooled-percentile oracle: dense barycentric sampling of
    every triangle instead of exact point-triangle projection."""
    def points(mesh):
        return surface_points(mesh, spacing_mm)

    def triangle_cloud(mesh, n=24):
        tris = mesh.vertices[mesh.triangles]  # (T, 3, 3)
        ss, tt = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
        keep = (ss + tt) <= 1.0
        ss, tt = ss[keep], tt[keep]
        a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
        cloud = (a[:, None, :]
                 + ss[None, :, None] * (b - a)[:, None, :]
                 + tt[None, :, None] * (c - a)[:, None, :])
        return cloud.reshape(-1, 3)

    def directed(pa, mesh):
        cloud = triangle_cloud(mesh)
        out = np.empty(len(pa))
        for i, p in enumerate(pa):
            out[i] = np.sqrt(((cloud - p) ** 2).sum(axis=1).min())
        return out

    pa, pb = points(mesh_a), points(mesh_b)
    pooled = np.concatenate([directed(pa, mesh_b), directed(pb, mesh_a)])
    pooled.sort()
    # linear interpolation between order statistics
    rank = 0.95 * (len(pooled) - 1)
    lo = int(np.floor(rank))
    frac = rank - lo
    hi = min(lo + 1, len(pooled) - 1)
    return pooled[lo] * (1 - frac) + pooled[hi] * frac


class TestHD95:
    def test_identical_meshes(self):
        mesh = marching_cubes_surface(mask_from((slice(3, 9), slice(3, 9), slice(3, 9))))
        assert hd95(mesh, mesh, sample_spacing_mm=0.5) == pytest.approx(0.0, abs=1e-12)

    def test_translated_cube_bounded_by_shift(self):
        m = mask_from((slice(3, 8), slice(3, 8), slice(3, 8)))
        mesh_a = marching_cubes_surface(m)
        shift = np.array([2.0, 0.0, 0.0])
        mesh_b = SurfaceMesh(mesh_a.vertices + shift, mesh_a.triangles)
        d = hd95(mesh_a, mesh_b, sample_spacing_mm=0.5)
        assert 0.0 < d <= 2.0

    def test_matches_bruteforce_oracle(self):
        m_a = mask_from((slice(3, 7), slice(3, 7), slice(3, 7)), dims=(10, 10, 10))
        m_b = mask_from((slice(4, 8), slice(3, 7), slice(3, 7)), dims=(10, 10, 10))
        mesh_a = marching_cubes_surface(m_a)
        mesh_b = marching_cubes_surface(m_b)
        ours = hd95(mesh_a, mesh_b, sample_spacing_mm=1.0)
        oracle = brute_force_hd95(mesh_a, mesh_b, 1.0)
        assert ours == pytest.approx(oracle, rel=0.02)

    def test_symmetry(self):
        m_a = mask_from((slice(2, 7), slice(3, 8), slice(2, 6)), dims=(10, 10, 10))
        m_b = mask_from((slice(3, 8), slice(2, 7), slice(3, 7)), dims=(10, 10, 10))
        mesh_a = marching_cubes_surface(m_a)
        mesh_b = marching_cubes_surface(m_b)
        assert hd95(mesh_a, mesh_b) == pytest.approx(hd95(mesh_b, mesh_a), abs=1e-12)

    def test_translation_invariance_of_pair(self):
        m_a = mask_from((slice(2, 7), slice(3, 8), slice(2, 6)), dims=(10, 10, 10))
        m_b = mask_from((slice(3, 8), slice(2, 7), slice(3, 7)), dims=(10, 10, 10))
        mesh_a = marching_cubes_surface(m_a)
        mesh_b = marching_cubes_surface(m_b)
        base = hd95(mesh_a, mesh_b)
        offset = np.array([3.7, -1.2, 0.4])
        moved = hd95(SurfaceMesh(mesh_a.vertices + offset, mesh_a.triangles),
                     SurfaceMesh(mesh_b.vertices + offset, mesh_b.triangles))
        assert moved == pytest.approx(base, abs=1e-9)

    def test_outlier_robustness(self):
        mesh = marching_cubes_surface(mask_from((slice(2, 10), slice(2, 10), slice(2, 10)),
                                                dims=(14, 14, 14)))
        # append one tiny triangle far away: a handful of outlier samples,
        # well under 5% of the pooled point set
        far = np.array([[50.0, 50.0, 50.0], [50.1, 50.0, 50.0], [50.0, 50.1, 50.0]])
        verts = np.vstack([mesh.vertices, far])
        tris = np.vstack([mesh.triangles,
                          [[len(mesh.vertices), len(mesh.vertices) + 1,
                            len(mesh.vertices) + 2]]])
        spiked = SurfaceMesh(verts, tris)
        with_outliers = hd95(spiked, mesh, sample_spacing_mm=0.5)
        assert with_outliers < 2.0  # the 95th percentile ignores the far spur

    def test_exclusion_drops_points(self):
        m_a = mask_from((slice(3, 8), slice(3, 8), slice(3, 8)), dims=(12, 12, 12))
        mesh_a = marching_cubes_surface(m_a)
        verts = mesh_a.vertices.copy()
        high_x = verts[:, 0] > 6.5
        verts[high_x, 0] += 3.0  # damage one side
        damaged = SurfaceMesh(verts, mesh_a.triangles)
        full = hd95(mesh_a, damaged)
        excl = np.zeros((12, 12, 12), dtype=np.uint8)
        excl[6:] = 1
        masked = hd95(mesh_a, damaged, BinaryMask(excl, (1, 1, 1)))
        assert masked < full

    def test_all_zero_exclusion_is_exact_noop(self):
        m_a = mask_from((slice(3, 7), slice(3, 7), slice(3, 7)), dims=(10, 10, 10))
        m_b = mask_from((slice(4, 8), slice(3, 7), slice(3, 7)), dims=(10, 10, 10))
        mesh_a = marching_cubes_surface(m_a)
        mesh_b = marching_cubes_surface(m_b)
        zero = BinaryMask(np.zeros((10, 10, 10), np.uint8), (1, 1, 1))
        assert hd95(mesh_a, mesh_b, zero) == hd95(mesh_a, mesh_b)

    def test_directed_max_mode(self):
        m_a = mask_from((slice(3, 7), slice(3, 7), slice(3, 7)), dims=(10, 10, 10))
        m_b = mask_from((slice(4, 8), slice(3, 7), slice(3, 7)), dims=(10, 10, 10))
        mesh_a = marching_cubes_surface(m_a)
        mesh_b = marching_cubes_surface(m_b)
        pooled = hd95(mesh_a, mesh_b, mode="pooled")
        directed = hd95(mesh_a, mesh_b, mode="directed_max")
        assert directed >= pooled - 1e-12

    def test_point_surface_distance_exact_on_plane(self):
        mesh = SurfaceMesh(
            np.array([[0.0, 0, 0], [4.0, 0, 0], [0.0, 4.0, 0], [4.0, 4.0, 0]]),
            np.array([[0, 1, 2], [1, 3, 2]]))
        pts = np.array([[1.0, 1.0, 2.5], [3.0, 3.0, -1.0], [5.0, 0.0, 0.0]])
        d = point_surface_distance(pts, mesh)
        np.testing.assert_allclose(d, [2.5, 1.0, 1.0], atol=1e-12)


class TestPairedTTest:
    def test_identical_samples(self):
        r = paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert r.t == 0.0 and r.p_value == 1.0 and r.tier == 0

    def test_constant_nonzero_difference(self):
        r = paired_t_test([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])
        assert r.p_value == 0.0 and r.tier == 3 and r.direction == 1

    def test_known_dataset(self):
        # d = [1,2,3,4]: t = 2.5 / (sd/2), sd = sqrt(5/3)
        x = np.array([1.0, 2.0, 3.0, 4.0])
        r = paired_t_test(x, np.zeros(4))
        expected_t = 2.5 / (np.sqrt(5.0 / 3.0) / 2.0)
        assert r.t == pytest.approx(expected_t, rel=1e-12)
        # frozen from mpmath: 2*(1 - T_3(t)) at t = 3.872983...
        assert r.p_value == pytest.approx(0.030466291662170977, abs=1e-10)
        assert r.tier == 1

    def test_antisymmetry(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=10)
        y = rng.normal(size=10)
        a = paired_t_test(x, y)
        b = paired_t_test(y, x)
        assert a.t == pytest.approx(-b.t, rel=1e-12)
        assert a.p_value == pytest.approx(b.p_value, abs=1e-15)

    def test_matches_mpmath_reference(self):
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 40

        def reference_p(t, dof):
            pdf = lambda u: (mp.gamma((dof + 1) / 2)
                             / (mp.sqrt(dof * mp.pi) * mp.gamma(dof / 2))
                             * (1 + u * u / dof) ** (-(dof + 1) / 2))
            tail = mp.quad(pdf, [abs(t), mp.inf])
            return float(2 * tail)

        rng = np.random.default_rng(3)
        for i in range(20):
            n = int(rng.integers(3, 12))
            x = rng.normal(0.3 * rng.standard_normal(), 1.0, size=n)
            y = rng.normal(0.0, 1.0, size=n)
            r = paired_t_test(x, y)
            assert r.p_value == pytest.approx(reference_p(r.t, n - 1), abs=1e-8)

    def test_tier_thresholds(self):
        assert significance_tier(0.06) == 0
        assert significance_tier(0.04) == 1
        assert significance_tier(9e-4) == 2
        assert significance_tier(9e-6) == 3

    def test_planted_tier_datasets(self):
        # expected p frozen from the mpmath reference CDF
        x = np.array([0.55, 0.62, 0.58, 0.66, 0.71, 0.63])
        y = x - np.array([0.030, 0.005, 0.025, 0.018, 0.035, 0.002])
        r = paired_t_test(x, y)
        assert r.p_value == pytest.approx(0.017254715167800416, abs=1e-10)
        assert r.tier == 1
        y2 = x - np.array([0.030, 0.022, 0.025, 0.018, 0.035, 0.027])
        r2 = paired_t_test(x, y2)
        assert r2.p_value == pytest.approx(0.00012251760790808565, abs=1e-10)
        assert r2.tier == 2

    def test_input_validation(self):
        with pytest.raises(UsageError):
            paired_t_test([1.0], [2.0])
        with pytest.raises(UsageError):
            paired_t_test([1.0, 2.0], [1.0, 2.0, 3.0])


class TestGlyphs:
    def test_better_and_worse_glyphs(self):
        assert glyph(0, True) == ""
        assert glyph(1, True) == "*"
        assert glyph(2, True) == "**"
        assert glyph(3, True) == "***"
        assert glyph(1, False) == "▿"
        assert glyph(3, False) == "▿▿▿"


def make_records():
    rng = np.random.default_rng(4)
    records = []
    for method, base in (("vxm", 0.80), ("new", 0.88)):
        for seed in range(3):
            for case in range(6):
                d = float(np.clip(base + 0.02 * rng.standard_normal()
                                  + 0.01 * case / 6, 0, 1))
                h = float(2.0 - 10 * (d - 0.84) * 0.1 + 0.05 * rng.standard_normal())
                records.append(MetricsRecord(f"case{case:03d}", seed, method, d, abs(h)))
    return records


class TestRecordsAndReport:
    def test_record_validation(self):
        with pytest.raises(DataError):
            MetricsRecord("c", 0, "m", 1.5, 0.0)
        with pytest.raises(DataError):
            MetricsRecord("c", 0, "m", 0.5, -1.0)

    def test_csv_roundtrip(self, tmp_path):
        records = make_records()
        path = tmp_path / "records.csv"
        write_records_csv(path, records)
        loaded = read_records_csv(path)
        assert len(loaded) == len(records)
        as_set = {(r.case_id, r.seed, r.method, r.dice, r.hd95_mm) for r in records}
        assert {(r.case_id, r.seed, r.method, r.dice, r.hd95_mm) for r in loaded} == as_set

    def test_csv_columns(self, tmp_path):
        path = tmp_path / "records.csv"
        write_records_csv(path, make_records())
        header = path.read_text().splitlines()[0]
        assert header == "case_id,seed,method,dice,hd95_mm"

    def test_single_method_single_seed_summary(self):
        records = [MetricsRecord("a", 0, "m", 0.9, 1.5),
                   MetricsRecord("b", 0, "m", 0.7, 2.5)]
        s = summarize_records(records, "m")
        assert s["per_case_median"]["a"]["dice"] == 0.9
        assert s["median_of_trials"]["dice"] == pytest.approx(0.8)

    def test_median_matches_sorting_oracle(self):
        rng = np.random.default_rng(5)
        records = []
        planted = {}
        for case in range(4):
            vals = rng.uniform(0.5, 1.0, size=5)
            planted[f"c{case}"] = sorted(vals)[2]
            for seed, v in enumerate(vals):
                records.append(MetricsRecord(f"c{case}", seed, "m", float(v), 1.0))
        s = summarize_records(records, "m")
        for case, want in planted.items():
            assert s["per_case_median"][case]["dice"] == pytest.approx(want)

    def test_identical_methods_tier_none(self, tmp_path):
        base = make_records()
        cloned = [MetricsRecord(r.case_id, r.seed, "clone", r.dice, r.hd95_mm)
                  for r in base if r.method == "vxm"]
        records = [r for r in base if r.method == "vxm"] + cloned
        out = compare_methods(records, "vxm", "clone", "dice")
        assert out["tier"] == 0 and out["glyph"] == ""

    def test_report_files_and_comparisons(self, tmp_path):
        records = make_records()
        summary = report(records, [("vxm", "new")], tmp_path)
        assert (tmp_path / "records.csv").exists()
        loaded = json.loads((tmp_path / "summary.json").read_text())
        assert set(loaded["methods"]) == {"vxm", "new"}
        comps = {(c["metric"]): c for c in loaded["comparisons"]}
        assert comps["dice"]["right_better"] is True
        assert comps["dice"]["glyph"].startswith("*")

    def test_mismatched_case_sets_rejected(self):
        records = make_records()
        records = [r for r in records if not (r.method == "new" and r.case_id == "case000")]
        with pytest.raises(DataError, match="case sets differ"):
            compare_methods(records, "vxm", "new", "dice")

    def test_hd95_direction_inverted(self):
        # lower hd95 is better: "new" has lower values -> right better
        records = []
        for seed in range(2):
            for case in range(5):
                records.append(MetricsRecord(f"c{case}", seed, "vxm", 0.8, 3.0 + 0.01 * case))
                records.append(MetricsRecord(f"c{case}", seed, "new", 0.8, 1.0 + 0.01 * case))
        out = compare_methods(records, "vxm", "new", "hd95")
        assert out["right_better"] is True
        assert out["glyph"].startswith("*")
