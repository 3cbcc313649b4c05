"""Dataset manifests, the synthetic data generator, offline augmentation,
and the preprocessing pipeline (affine crop + dataset normalization).

A manifest is a JSON file with an atlas entry, a case list (id, image path,
4x4 affine mapping atlas mm to source mm, split, optional ground-truth and
exclusion masks), and optional normalization constants. Paths are relative
to the manifest location.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .distance import DistanceMap, WeightMap, fast_marching_signed_distance, weight_map
from .errors import DataError, UsageError
from .formats import read_dvol, read_dvol_mask, read_nifti, write_dvol
from .volume import (AffineTransform, BinaryMask, NormalizationConstants, Volume,
                     compute_normalization, crop_to_atlas_box, mask_centroid,
                     normalize_volume)
from .warp import (DeformationField, SurfaceMesh, compose_fields,
                   marching_cubes_surface, random_smooth_field, warp_volume)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CaseEntry:
    case_id: str
    image: str
    affine: AffineTransform
    split: str
    gt_mask: str | None = None
    exclusion_mask: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"case {self.case_id!r}: bad split {self.split!r}")


@dataclass(frozen=True)
class Manifest:
    root: Path
    atlas_image: str
    atlas_mask: str
    cases: tuple[CaseEntry, ...]
    atlas_surface: str | None = None
    normalization: NormalizationConstants | None = None

    def __post_init__(self):
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate case ids {dupes}")

    def split(self, name: str) -> list[CaseEntry]:
        return [c for c in self.cases if c.split == name]

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable manifest {path}: {exc}") from exc
    known = {"atlas", "cases", "normalization"}
    unknown = set(raw) - known
    if unknown:
        raise DataError(f"unknown manifest keys {sorted(unknown)}")
    atlas = raw.get("atlas") or {}
    cases = []
    for c in raw.get("cases", []):
        cases.append(CaseEntry(
            case_id=c["id"],
            image=c["image"],
            affine=AffineTransform(np.array(c["affine"], dtype=np.float64)),
            split=c["split"],
            gt_mask=c.get("gt_mask"),
            exclusion_mask=c.get("exclusion_mask"),
        ))
    norm = None
    if raw.get("normalization") is not None:
        norm = NormalizationConstants(raw["normalization"]["i_min"],
                                      raw["normalization"]["i_max"])
    manifest = Manifest(
        root=path.parent,
        atlas_image=atlas["image"],
        atlas_mask=atlas["mask"],
        atlas_surface=atlas.get("surface"),
        cases=tuple(cases),
        normalization=norm,
    )
    missing = [str(p) for p in _referenced_paths(manifest) if not p.exists()]
    if missing:
        raise DataError(f"manifest references missing files: {missing}")
    return manifest


def _referenced_paths(m: Manifest):
    yield m.resolve(m.atlas_image)
    yield m.resolve(m.atlas_mask)
    if m.atlas_surface:
        yield m.resolve(m.atlas_surface)
    for c in m.cases:
        yield m.resolve(c.image)
        if c.gt_mask:
            yield m.resolve(c.gt_mask)
        if c.exclusion_mask:
            yield m.resolve(c.exclusion_mask)


def save_manifest(m: Manifest, path=None) -> Path:
    path = Path(path) if path else m.root / "manifest.json"
    doc = {
        "atlas": {"image": m.atlas_image, "mask": m.atlas_mask,
                  "surface": m.atlas_surface},
        "cases": [
            {
                "id": c.case_id,
                "image": c.image,
                "affine": c.affine.matrix.tolist(),
                "split": c.split,
                "gt_mask": c.gt_mask,
                "exclusion_mask": c.exclusion_mask,
            }
            for c in m.cases
        ],
        "normalization": (
            {"i_min": m.normalization.i_min, "i_max": m.normalization.i_max}
            if m.normalization else None),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_case_image(m: Manifest, entry: CaseEntry) -> Volume:
    p = m.resolve(entry.image)
    if p.suffix == ".nii":
        return read_nifti(p)
    return read_dvol(p)


# ---------------------------------------------------------------------------
# synthetic data generator


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    count_train: int = 64
    count_val: int = 8
    count_test: int = 8
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    mean_interior: float = 1.0
    mean_exterior: float = 0.0
    noise_std: float = 0.03
    warp_amplitude: float = 0.8
    warp_control_spacing: int = 8
    warp_layers: int = 6
    clutter_count: int = 3
    clutter_contrast: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.mean_interior == self.mean_exterior:
            raise UsageError("interior and exterior means must differ")
        if self.noise_std < 0:
            raise UsageError("noise_std must be >= 0")
        if self.warp_layers < 1:
            raise UsageError("warp_layers must be >= 1")
        # Per-layer amplitude stays inside the empirical fold-free bound of
        # the control-grid warp; large total warps come from composing layers.
        if self.warp_amplitude > 0.1 * self.warp_control_spacing:
            raise UsageError(
                f"warp_amplitude {self.warp_amplitude} exceeds the positive-Jacobian "
                f"bound 0.1 * control_spacing = {0.1 * self.warp_control_spacing}")


def _canonical_mask(dims) -> np.ndarray:
    """Ellipsoid with three attached lobes; asymmetric so edges are wiggly."""
    d = np.asarray(dims, dtype=np.float64)
    idx = np.stack(np.meshgrid(*(np.arange(n) + 0.5 for n in dims), indexing="ij"), axis=-1)
    center = d / 2.0

    def ellipsoid(c, radii):
        return (((idx - c) / radii) ** 2).sum(axis=-1) <= 1.0

    shape = ellipsoid(center, d * np.array([0.28, 0.22, 0.19]))
    shape |= ellipsoid(center + d * np.array([0.24, 0.02, -0.03]), d * np.array([0.12, 0.10, 0.10]))
    shape |= ellipsoid(center + d * np.array([-0.16, 0.20, 0.04]), d * np.array([0.10, 0.11, 0.09]))
    shape |= ellipsoid(center + d * np.array([0.02, -0.10, 0.23]), d * np.array([0.09, 0.09, 0.11]))
    return shape.astype(np.uint8)


def _render_image(gt: np.ndarray, cfg: SynthConfig, rng, clutter: bool) -> np.ndarray:
    img = np.where(gt > 0, cfg.mean_interior, cfg.mean_exterior).astype(np.float64)
    if clutter and cfg.clutter_count > 0:
        # clutter blobs stay clear of a 2-voxel margin around the shape
        forbidden = ndimage.binary_dilation(gt > 0, iterations=2)
        level = cfg.mean_exterior + (cfg.mean_interior - cfg.mean_exterior) * cfg.clutter_contrast
        placed = 0
        tries = 0
        dims = np.asarray(gt.shape)
        while placed < cfg.clutter_count and tries < 50 * cfg.clutter_count:
            tries += 1
            radius = rng.uniform(1.5, 3.0)
            c = rng.uniform(radius + 1, dims - radius - 1)
            idx = np.stack(np.meshgrid(*(np.arange(n) + 0.5 for n in gt.shape),
                                       indexing="ij"), axis=-1)
            blob = ((idx - c) ** 2).sum(axis=-1) <= radius * radius
            if not (blob & forbidden).any() and blob.any():
                img[blob] = level
                placed += 1
    if cfg.noise_std > 0:
        img = img + rng.normal(0.0, cfg.noise_std, size=gt.shape)
    return img


def _layered_warp(cfg: SynthConfig, rng) -> DeformationField:
    """Compose several small fold-free fields into one larger warp."""
    f = random_smooth_field(cfg.dims, cfg.warp_control_spacing, cfg.warp_amplitude,
                            int(rng.integers(2 ** 31)), cfg.spacing)
    for _ in range(cfg.warp_layers - 1):
        layer = random_smooth_field(cfg.dims, cfg.warp_control_spacing,
                                    cfg.warp_amplitude, int(rng.integers(2 ** 31)),
                                    cfg.spacing)
        f = compose_fields(layer, f)
    return f


def generate_synthetic(cfg: SynthConfig, out_dir) -> Manifest:
    """Emit a pre-aligned synthetic dataset with known ground truth.

    The atlas holds the canonical shape; each case warps it by a random
    smooth field. Images are two-level with optional background clutter and
    Gaussian noise. Deterministic in ``cfg.seed``.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "gt").mkdir(exist_ok=True)
    (out_dir / "atlas").mkdir(exist_ok=True)

    counts = {"train": cfg.count_train, "val": cfg.count_val, "test": cfg.count_test}
    n_cases = sum(counts.values())
    children = np.random.SeedSequence(cfg.seed).spawn(n_cases + 1)

    atlas_mask = _canonical_mask(cfg.dims)
    atlas_rng = np.random.Generator(np.random.PCG64(children[0]))
    atlas_img = _render_image(atlas_mask, cfg, atlas_rng, clutter=False)
    write_dvol(out_dir / "atlas" / "image.dvol", Volume(atlas_img, cfg.spacing))
    write_dvol(out_dir / "atlas" / "mask.dvol",
               BinaryMask(atlas_mask, cfg.spacing), dtype="u8")

    mask_vol = Volume(atlas_mask.astype(np.float64), cfg.spacing)
    cases = []
    i = 0
    for split in SPLITS:
        for _ in range(counts[split]):
            child = children[i + 1]
            case_rng = np.random.Generator(np.random.PCG64(child))
            f = _layered_warp(cfg, case_rng)
            gt = (warp_volume(mask_vol, f).data >= 0.5).astype(np.uint8)
            img = _render_image(gt, cfg, case_rng, clutter=True)

            cid = f"case{i:03d}"
            write_dvol(out_dir / "images" / f"{cid}.dvol", Volume(img, cfg.spacing))
            write_dvol(out_dir / "gt" / f"{cid}.dvol",
                       BinaryMask(gt, cfg.spacing), dtype="u8")
            cases.append(CaseEntry(
                case_id=cid,
                image=f"images/{cid}.dvol",
                affine=AffineTransform.identity(),
                split=split,
                gt_mask=f"gt/{cid}.dvol",
            ))
            i += 1

    manifest = Manifest(
        root=out_dir,
        atlas_image="atlas/image.dvol",
        atlas_mask="atlas/mask.dvol",
        cases=tuple(cases),
    )
    save_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# offline augmentation


def augment_dataset(manifest: Manifest, k: int, amplitude: float, seed: int,
                    control_spacing: int = 8) -> Manifest:
    """Add k randomly warped variants of every train-split image.

    Validation and test splits are never augmented. Ground-truth masks, when
    present, are warped by the identical field (soft warp, threshold 0.5).
    Augmented ids get a deterministic _aug<N> suffix.
    """
    if k < 1:
        raise UsageError("augmentation factor k must be >= 1")
    aug_dir = manifest.root / "augmented"
    aug_dir.mkdir(exist_ok=True)

    train_cases = manifest.split("train")
    children = np.random.SeedSequence(seed).spawn(len(train_cases) * k)
    new_cases = list(manifest.cases)
    ci = 0
    for entry in train_cases:
        image = load_case_image(manifest, entry)
        gt = read_dvol_mask(manifest.resolve(entry.gt_mask)) if entry.gt_mask else None
        for n in range(1, k + 1):
            field_seed = int(np.random.Generator(
                np.random.PCG64(children[ci])).integers(2 ** 31))
            ci += 1
            f = random_smooth_field(image.dims, control_spacing, amplitude,
                                    field_seed, image.spacing)
            warped = warp_volume(image, f)
            new_id = f"{entry.case_id}_aug{n}"
            img_rel = f"augmented/{new_id}.dvol"
            write_dvol(manifest.root / img_rel, warped)
            gt_rel = None
            if gt is not None:
                soft = warp_volume(gt.as_volume(), f)
                gt_rel = f"augmented/{new_id}_gt.dvol"
                write_dvol(manifest.root / gt_rel,
                           BinaryMask((soft.data >= 0.5).astype(np.uint8), gt.spacing),
                           dtype="u8")
            new_cases.append(replace(entry, case_id=new_id, image=img_rel, gt_mask=gt_rel))
    return replace(manifest, cases=tuple(new_cases))


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class CropConfig:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (2.84375, 2.84375, 2.84375)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))


def preprocess_case(source: Volume, affine: AffineTransform, atlas_centroid,
                    norm: NormalizationConstants, crop: CropConfig) -> tuple[Volume, dict]:
    """Crop to the atlas-centered box, then normalize; returns provenance."""
    cropped = crop_to_atlas_box(source, affine, atlas_centroid, crop.dims, crop.spacing)
    out = normalize_volume(cropped, norm)
    provenance = {
        "affine": affine.matrix.tolist(),
        "atlas_centroid_mm": [float(c) for c in atlas_centroid],
        "crop_dims": list(crop.dims),
        "crop_spacing_mm": list(crop.spacing),
        "i_min": norm.i_min,
        "i_max": norm.i_max,
    }
    return out, provenance


def _crop_mask(mask: BinaryMask, affine: AffineTransform, centroid, crop: CropConfig) -> BinaryMask:
    soft = crop_to_atlas_box(mask.as_volume(), affine, centroid, crop.dims, crop.spacing)
    return BinaryMask((soft.data >= 0.5).astype(np.uint8), crop.spacing)


def preprocess_dataset(manifest: Manifest, out_dir, crop: CropConfig) -> Manifest:
    """Crop + normalize every case and the atlas onto the common grid.

    Normalization constants come from the manifest when present, otherwise
    from the cropped train-split images. Writes per-case provenance sidecars.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "gt").mkdir(exist_ok=True)
    (out_dir / "atlas").mkdir(exist_ok=True)

    atlas_mask = read_dvol_mask(manifest.resolve(manifest.atlas_mask))
    atlas_image = read_dvol(manifest.resolve(manifest.atlas_image))
    centroid = mask_centroid(atlas_mask)

    identity = AffineTransform.identity()
    cropped: dict[str, Volume] = {}
    for entry in manifest.cases:
        image = load_case_image(manifest, entry)
        cropped[entry.case_id] = crop_to_atlas_box(
            image, entry.affine, centroid, crop.dims, crop.spacing)

    norm = manifest.normalization
    if norm is None:
        train_ids = [c.case_id for c in manifest.split("train")]
        if not train_ids:
            raise DataError("cannot derive normalization constants: no train split")
        norm = compute_normalization([cropped[i] for i in train_ids])

    atlas_cropped = crop_to_atlas_box(atlas_image, identity, centroid,
                                      crop.dims, crop.spacing)
    write_dvol(out_dir / "atlas" / "image.dvol", normalize_volume(atlas_cropped, norm))
    new_atlas_mask = _crop_mask(atlas_mask, identity, centroid, crop)
    write_dvol(out_dir / "atlas" / "mask.dvol", new_atlas_mask, dtype="u8")

    new_cases = []
    for entry in manifest.cases:
        image, provenance = preprocess_case(
            load_case_image(manifest, entry), entry.affine, centroid, norm, crop)
        img_rel = f"images/{entry.case_id}.dvol"
        write_dvol(out_dir / img_rel, image)
        (out_dir / f"images/{entry.case_id}.provenance.json").write_text(
            json.dumps(provenance, indent=2, sort_keys=True) + "\n")
        gt_rel = None
        if entry.gt_mask:
            gt = read_dvol_mask(manifest.resolve(entry.gt_mask))
            gt_rel = f"gt/{entry.case_id}.dvol"
            write_dvol(out_dir / gt_rel, _crop_mask(gt, entry.affine, centroid, crop),
                       dtype="u8")
        excl_rel = None
        if entry.exclusion_mask:
            excl = read_dvol_mask(manifest.resolve(entry.exclusion_mask))
            excl_rel = f"gt/{entry.case_id}_exclusion.dvol"
            write_dvol(out_dir / excl_rel, _crop_mask(excl, entry.affine, centroid, crop),
                       dtype="u8")
        new_cases.append(replace(entry, image=img_rel, affine=identity,
                                 gt_mask=gt_rel, exclusion_mask=excl_rel))

    new_manifest = Manifest(
        root=out_dir,
        atlas_image="atlas/image.dvol",
        atlas_mask="atlas/mask.dvol",
        cases=tuple(new_cases),
        normalization=norm,
    )
    save_manifest(new_manifest)
    return new_manifest


# ---------------------------------------------------------------------------
# loaded datasets and the atlas bundle


@dataclass(frozen=True)
class AtlasBundle:
    """Atlas image + segmentation with the derived distance, weight map,
    and boundary surface reused across training."""

    image: Volume
    mask: BinaryMask
    distance: DistanceMap | None
    weights: WeightMap | None
    surface: SurfaceMesh


@dataclass(frozen=True)
class Case:
    case_id: str
    image: Volume
    gt_mask: BinaryMask | None = None
    exclusion_mask: BinaryMask | None = None


@dataclass(frozen=True)
class LoadedDataset:
    atlas: AtlasBundle
    train: tuple[Case, ...]
    val: tuple[Case, ...]
    test: tuple[Case, ...]


def build_atlas_bundle(image: Volume, mask: BinaryMask, t_lower_mm: float = 1.0,
                       t_upper_mm: float = 4.0) -> AtlasBundle:
    if image.dims != mask.dims:
        raise DataError(f"atlas image {image.dims} and mask {mask.dims} differ")
    if mask.foreground_count() == 0:
        raise DataError("atlas mask is empty")
    distance = fast_marching_signed_distance(mask)
    weights = weight_map(distance, t_lower_mm, t_upper_mm)
    surface = marching_cubes_surface(mask)
    return AtlasBundle(image, mask, distance, weights, surface)


def load_dataset(manifest: Manifest, t_lower_mm: float = 1.0,
                 t_upper_mm: float = 4.0) -> LoadedDataset:
    """Load preprocessed volumes into memory and derive the atlas bundle."""
    atlas_image = read_dvol(manifest.resolve(manifest.atlas_image))
    atlas_mask = read_dvol_mask(manifest.resolve(manifest.atlas_mask))
    atlas = build_atlas_bundle(atlas_image, atlas_mask, t_lower_mm, t_upper_mm)

    splits: dict[str, list[Case]] = {s: [] for s in SPLITS}
    for entry in manifest.cases:
        image = load_case_image(manifest, entry)
        if image.dims != atlas_image.dims:
            raise DataError(
                f"case {entry.case_id} grid {image.dims} differs from atlas "
                f"{atlas_image.dims}; run preprocessing first")
        gt = read_dvol_mask(manifest.resolve(entry.gt_mask)) if entry.gt_mask else None
        excl = (read_dvol_mask(manifest.resolve(entry.exclusion_mask))
                if entry.exclusion_mask else None)
        splits[entry.split].append(Case(entry.case_id, image, gt, excl))
    return LoadedDataset(atlas, tuple(splits["train"]), tuple(splits["val"]),
                         tuple(splits["test"]))
