"""Segmentation evaluation: Dice, 95th-percentile Hausdorff surface distance,
exclusion-region masking, the paired t-test with significance tiers, and
report emission.

HD95 samples both surfaces densely (vertices plus triangle-interior points),
optionally drops samples inside an exclusion mask, computes exact
point-to-triangle-mesh distances in both directions, and takes the 95th
percentile (linear interpolation between order statistics) of the pooled
symmetric distance set. A directed-max variant is available as an option.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import betainc

from .errors import DataError, UsageError
from .volume import BinaryMask
from .warp import SurfaceMesh


@dataclass(frozen=True)
class MetricsRecord:
    case_id: str
    seed: int
    method: str
    dice: float
    hd95_mm: float

    def __post_init__(self):
        if not (0.0 <= self.dice <= 1.0):
            raise DataError(f"dice {self.dice} outside [0, 1]")
        if self.hd95_mm < 0.0:
            raise DataError(f"hd95 {self.hd95_mm} negative")


def dice(a: BinaryMask, b: BinaryMask, exclusion: BinaryMask | None = None) -> float:
    """2|A∩B| / (|A| + |B|) over voxels where the exclusion mask is 0."""
    if a.dims != b.dims:
        raise DataError(f"dice grids differ: {a.dims} vs {b.dims}")
    da = a.data.astype(bool)
    db = b.data.astype(bool)
    if exclusion is not None:
        if exclusion.dims != a.dims:
            raise DataError("exclusion mask grid differs from the inputs")
        keep = exclusion.data == 0
        da = da & keep
        db = db & keep
    sa = int(da.sum())
    sb = int(db.sum())
    if sa + sb == 0:
        raise DataError("both masks empty after exclusion; dice undefined")
    return 2.0 * int((da & db).sum()) / (sa + sb)


# ---------------------------------------------------------------------------
# surface distances


def surface_points(mesh: SurfaceMesh, max_spacing: float) -> np.ndarray:
    """Vertices plus barycentric triangle samples no farther apart than
    ``max_spacing`` mm along any edge."""
    if len(mesh.triangles) == 0:
        raise DataError("mesh has no triangles")
    pts = [mesh.vertices]
    tri = mesh.vertices[mesh.triangles]  # (T, 3, 3)
    edge = np.linalg.norm(
        tri - tri[:, [1, 2, 0], :], axis=2).max(axis=1)
    levels = np.ceil(edge / max_spacing).astype(int)
    for n in range(2, int(levels.max()) + 1):
        group = tri[levels == n]
        if len(group) == 0:
            continue
        # interior + edge barycentric lattice, vertices excluded (already kept)
        for i in range(n + 1):
            for j in range(n + 1 - i):
                k = n - i - j
                if (i, j, k) in ((n, 0, 0), (0, n, 0), (0, 0, n)):
                    continue
                w = np.array([i, j, k], dtype=np.float64) / n
                pts.append(np.einsum("tvc,v->tc", group, w))
    return np.concatenate(pts, axis=0)


def _point_segment_sq(d, seg):
    """Squared distance from offsets ``d`` (p, t, 3) to segments ``seg`` (t, 3)."""
    seg_len = np.einsum("tc,tc->t", seg, seg)
    tau = np.einsum("ptc,tc->pt", d, seg) / np.maximum(seg_len, 1e-300)
    np.clip(tau, 0.0, 1.0, out=tau)
    closest = tau[..., None] * seg
    diff = d - closest
    return np.einsum("ptc,ptc->pt", diff, diff)


def _point_triangles_sq(points, tri):
    """Squared distance from each point to the nearest of the triangles."""
    a = tri[:, 0]
    e0 = tri[:, 1] - a
    e1 = tri[:, 2] - a
    d = points[:, None, :] - a[None, :, :]

    aa = np.einsum("tc,tc->t", e0, e0)
    bb = np.einsum("tc,tc->t", e0, e1)
    cc = np.einsum("tc,tc->t", e1, e1)
    det = aa * cc - bb * bb
    pd = np.einsum("ptc,tc->pt", d, e0)
    pe = np.einsum("ptc,tc->pt", d, e1)
    safe_det = np.maximum(det, 1e-300)
    s = (cc * pd - bb * pe) / safe_det
    t = (aa * pe - bb * pd) / safe_det
    inside = (s >= 0.0) & (t >= 0.0) & (s + t <= 1.0) & (det > 1e-14)

    proj = d - s[..., None] * e0 - t[..., None] * e1
    dist_in = np.einsum("ptc,ptc->pt", proj, proj)

    dist_edges = np.minimum(
        _point_segment_sq(d, e0),
        np.minimum(_point_segment_sq(d, e1),
                   _point_segment_sq(d - e0[None, :, :], tri[:, 2] - tri[:, 1])))
    return np.where(inside, dist_in, dist_edges).min(axis=1)


def point_surface_distance(points: np.ndarray, mesh: SurfaceMesh,
                           chunk: int = 512) -> np.ndarray:
    """Exact distances from points to a triangle mesh.

    Points are processed in spatially compact chunks; a vertex KD-tree gives
    an upper bound that prunes triangles which cannot contain the closest
    point of any query in the chunk.
    """
    tri = mesh.vertices[mesh.triangles]
    centroids = tri.mean(axis=1)
    tri_radius = np.linalg.norm(tri - centroids[:, None, :], axis=2).max()
    tree = cKDTree(mesh.vertices)

    order = np.lexsort(points.T)
    out = np.empty(len(points))
    for start in range(0, len(order), chunk):
        idx = order[start:start + chunk]
        p = points[idx]
        upper = tree.query(p)[0]
        center = 0.5 * (p.min(axis=0) + p.max(axis=0))
        radius = np.linalg.norm(p - center, axis=1).max()
        reach = upper.max() + radius + tri_radius
        keep = np.linalg.norm(centroids - center, axis=1) <= reach
        out[idx] = np.sqrt(_point_triangles_sq(p, tri[keep]))
    return out


def _drop_excluded(points: np.ndarray, exclusion: BinaryMask) -> np.ndarray:
    spacing = np.asarray(exclusion.spacing)
    idx = np.rint(points / spacing - 0.5).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(exclusion.dims) - 1)
    inside = exclusion.data[idx[:, 0], idx[:, 1], idx[:, 2]] > 0
    return points[~inside]


def hd95(a: SurfaceMesh, b: SurfaceMesh, exclusion: BinaryMask | None = None,
         mode: str = "pooled", sample_spacing_mm: float | None = None) -> float:
    """95th-percentile symmetric surface distance in mm.

    ``mode="pooled"`` takes the percentile of both directed distance sets
    pooled together; ``mode="directed_max"`` takes the max of the two
    directed percentiles.
    """
    if mode not in ("pooled", "directed_max"):
        raise UsageError(f"unknown hd95 mode {mode!r}")
    if sample_spacing_mm is None:
        # fixed default so an all-zero exclusion mask changes nothing; callers
        # evaluating on a voxel grid pass 0.5 * min(voxel spacing)
        sample_spacing_mm = 0.5

    pa = surface_points(a, sample_spacing_mm)
    pb = surface_points(b, sample_spacing_mm)
    if exclusion is not None:
        pa = _drop_excluded(pa, exclusion)
        pb = _drop_excluded(pb, exclusion)
    if len(pa) == 0 or len(pb) == 0:
        raise DataError("no surface samples remain after exclusion")

    d_ab = point_surface_distance(pa, b)
    d_ba = point_surface_distance(pb, a)
    if mode == "pooled":
        return float(np.percentile(np.concatenate([d_ab, d_ba]), 95.0))
    return float(max(np.percentile(d_ab, 95.0), np.percentile(d_ba, 95.0)))


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class SignificanceResult:
    t: float
    p_value: float
    direction: int  # sign of mean(x - y)
    tier: int  # 0 none, 1: p<0.05, 2: p<1e-3, 3: p<1e-5


def significance_tier(p: float) -> int:
    if p < 1e-5:
        return 3
    if p < 1e-3:
        return 2
    if p < 0.05:
        return 1
    return 0


def paired_t_test(x, y) -> SignificanceResult:
    """Dependent t-test for paired samples, two-tailed.

    p comes from the Student-t CDF with n-1 dof via the regularized
    incomplete beta function. Conventions for degenerate inputs: if every
    difference is identical, p = 1 when the common difference is zero
    (t = 0) and p = 0 otherwise (|t| = inf).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise UsageError("paired t-test needs two equal-length 1D samples")
    n = len(x)
    if n < 2:
        raise UsageError("paired t-test needs at least 2 pairs")
    d = x - y
    mean = d.mean()
    sd = d.std(ddof=1)
    direction = int(np.sign(mean))
    if sd == 0.0:
        if mean == 0.0:
            return SignificanceResult(0.0, 1.0, 0, 0)
        return SignificanceResult(float(np.inf) * direction, 0.0, direction, 3)
    t = mean / (sd / np.sqrt(n))
    dof = n - 1
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return SignificanceResult(float(t), p, direction, significance_tier(p))


def glyph(tier: int, right_better: bool) -> str:
    """Bracket annotation: asterisks when the right method is significantly
    better, triangles when significantly worse."""
    if tier == 0:
        return ""
    return ("*" if right_better else "▿") * tier


# ---------------------------------------------------------------------------
# aggregation and reports

CSV_COLUMNS = ("case_id", "seed", "method", "dice", "hd95_mm")

METRIC_HIGHER_IS_BETTER = {"dice": True, "hd95": False}


def summarize_records(records: list[MetricsRecord], method: str) -> dict:
    """Per-case median over trials plus per-trial means and their medians."""
    by_case: dict[str, dict[str, list[float]]] = {}
    by_seed: dict[int, dict[str, list[float]]] = {}
    for r in records:
        c = by_case.setdefault(r.case_id, {"dice": [], "hd95": []})
        c["dice"].append(r.dice)
        c["hd95"].append(r.hd95_mm)
        s = by_seed.setdefault(r.seed, {"dice": [], "hd95": []})
        s["dice"].append(r.dice)
        s["hd95"].append(r.hd95_mm)

    case_median = {
        cid: {"dice": float(np.median(v["dice"])), "hd95": float(np.median(v["hd95"]))}
        for cid, v in sorted(by_case.items())
    }
    per_trial_mean = {
        str(seed): {"dice": float(np.mean(v["dice"])), "hd95": float(np.mean(v["hd95"]))}
        for seed, v in sorted(by_seed.items())
    }
    out: dict = {"method": method, "per_case_median": case_median,
                 "per_trial_mean": per_trial_mean}
    if case_median:
        out["median_of_trials"] = {
            "dice": float(np.median([m["dice"] for m in per_trial_mean.values()])),
            "hd95": float(np.median([m["hd95"] for m in per_trial_mean.values()])),
        }
        out["mean_of_case_medians"] = {
            "dice": float(np.mean([m["dice"] for m in case_median.values()])),
            "hd95": float(np.mean([m["hd95"] for m in case_median.values()])),
        }
    return out


def check_unique_records(records: list[MetricsRecord]) -> None:
    seen = set()
    for r in records:
        key = (r.case_id, r.seed, r.method)
        if key in seen:
            raise DataError(f"duplicate metrics record for {key}")
        seen.add(key)


def write_records_csv(path, records: list[MetricsRecord]) -> None:
    check_unique_records(records)
    rows = sorted(records, key=lambda r: (r.method, r.seed, r.case_id))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([r.case_id, r.seed, r.method, repr(r.dice), repr(r.hd95_mm)])


def read_records_csv(path) -> list[MetricsRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise DataError(f"unexpected metrics CSV columns {reader.fieldnames}")
        for row in reader:
            records.append(MetricsRecord(
                row["case_id"], int(row["seed"]), row["method"],
                float(row["dice"]), float(row["hd95_mm"])))
    return records


def compare_methods(records: list[MetricsRecord], left: str, right: str,
                    metric: str) -> dict:
    """Paired t-test between two methods on per-case median-of-trials values."""
    if metric not in METRIC_HIGHER_IS_BETTER:
        raise UsageError(f"unknown metric {metric!r}")
    key = "hd95" if metric == "hd95" else "dice"
    per_method = {}
    for name in (left, right):
        subset = [r for r in records if r.method == name]
        if not subset:
            raise DataError(f"no records for method {name!r}")
        per_method[name] = summarize_records(subset, name)["per_case_median"]
    cases_l = set(per_method[left])
    cases_r = set(per_method[right])
    if cases_l != cases_r:
        raise DataError(
            f"case sets differ between {left!r} and {right!r}: "
            f"{sorted(cases_l ^ cases_r)}")
    cases = sorted(cases_l)
    lv = np.array([per_method[left][c][key] for c in cases])
    rv = np.array([per_method[right][c][key] for c in cases])
    res = paired_t_test(rv, lv)
    higher_better = METRIC_HIGHER_IS_BETTER[metric]
    right_better = (res.direction > 0) == higher_better and res.direction != 0
    return {
        "left": left,
        "right": right,
        "metric": metric,
        "n_cases": len(cases),
        "mean_left": float(lv.mean()),
        "mean_right": float(rv.mean()),
        "t": res.t,
        "p_value": res.p_value,
        "tier": res.tier,
        "right_better": bool(right_better and res.tier > 0),
        "glyph": glyph(res.tier, right_better),
    }


def report(records: list[MetricsRecord], comparisons: list[tuple[str, str]],
           out_dir) -> dict:
    """Raw CSV plus a JSON summary with per-method medians and pairwise tests."""
    methods = sorted({r.method for r in records})
    summary = {
        "methods": {
            m: summarize_records([r for r in records if r.method == m], m)
            for m in methods
        },
        "comparisons": [],
    }
    for left, right in comparisons:
        for metric in ("dice", "hd95"):
            summary["comparisons"].append(compare_methods(records, left, right, metric))

    out_dir.mkdir(parents=True, exist_ok=True)
    write_records_csv(out_dir / "records.csv", records)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
