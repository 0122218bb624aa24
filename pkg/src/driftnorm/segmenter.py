"""Multi-atlas kNN voxel-classification segmentation.

Training registers every atlas to every other, median-fuses the per-atlas
center transforms and intensity maps, renders atlases into the shared
atlas-space grid, and collects balanced per-structure voxel samples from
dilated label unions. Segmentation registers a scan to all atlases,
optionally applies atlas affine intensity normalization, classifies every
voxel inside any structure ROI with exact kNN, assigns the argmax
structure, and measures structure volumes in the scan's native grid.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .aan import AffineIntensityMap, apply_map, fit_affine_intensity, normalize_scan
from .features import FeatureExtractor, FeatureSpec
from .registration import (
    RegistrationConfig,
    RegistrationResult,
    SimilarityTransform,
    compose,
    fuse_center_transform,
    median_transform,
    optimize_similarity,
    register_to_atlases,
    resample,
    resample_values,
)
from .volume import Volume, interior_region, load_metaimage, mean_intensity, save_metaimage


class TrainingError(Exception):
    """Invalid training inputs or failed training step."""


@dataclass
class TrainingConfig:
    structures: tuple[str, ...] = ("bone", "cartilage-medial", "cartilage-lateral")
    label_ids: dict = field(default_factory=lambda: {
        "bone": 1, "cartilage-medial": 2, "cartilage-lateral": 3})
    k: int = 25
    max_samples_per_class: int = 20000
    roi_dilation_mm: float = 5.0
    background_threshold: float = 0.5
    margin_fraction: float = 0.15
    sample_seed: int = 0
    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)

    def to_dict(self) -> dict:
        return {
            "structures": list(self.structures),
            "label_ids": dict(self.label_ids),
            "k": self.k,
            "max_samples_per_class": self.max_samples_per_class,
            "roi_dilation_mm": self.roi_dilation_mm,
            "background_threshold": self.background_threshold,
            "margin_fraction": self.margin_fraction,
            "sample_seed": self.sample_seed,
            "feature_spec": self.feature_spec.to_dict(),
            "registration": self.registration.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        kwargs = dict(d)
        kwargs["structures"] = tuple(kwargs.get("structures", ()))
        if "feature_spec" in kwargs:
            kwargs["feature_spec"] = FeatureSpec.from_dict(kwargs["feature_spec"])
        if "registration" in kwargs:
            kwargs["registration"] = RegistrationConfig.from_dict(kwargs["registration"])
        return cls(**kwargs)


@dataclass
class AtlasEntry:
    image: Volume
    center_transform: SimilarityTransform  # atlas space -> atlas center
    intensity_map: AffineIntensityMap  # atlas intensities -> center level


@dataclass
class AtlasSet:
    reference: Volume  # defines the atlas-space grid (atlas 0's grid)
    entries: list[AtlasEntry]
    rois: dict[str, np.ndarray]  # per-structure boolean masks on the reference grid
    config: TrainingConfig

    @property
    def images(self) -> list[Volume]:
        return [e.image for e in self.entries]

    @property
    def center_transforms(self) -> list[SimilarityTransform]:
        return [e.center_transform for e in self.entries]

    @property
    def intensity_maps(self) -> list[AffineIntensityMap]:
        return [e.intensity_map for e in self.entries]

    def roi_boxes(self) -> dict[str, dict]:
        boxes = {}
        for name, mask in self.rois.items():
            idx = np.argwhere(mask)
            boxes[name] = {"lo": idx.min(axis=0).tolist(),
                           "hi": (idx.max(axis=0) + 1).tolist()}
        return boxes

    def register_scan(self, scan: Volume, threads: int = 1) -> list[RegistrationResult]:
        return register_to_atlases(scan, self.images, self.config.registration, threads)

    def center_transform_for(self, registrations: list[RegistrationResult]) -> SimilarityTransform:
        return fuse_center_transform(registrations, self.center_transforms,
                                     self.reference.world_center())


@dataclass
class KnnStructure:
    samples: np.ndarray  # standardized float32 (n, d)
    positive: np.ndarray  # bool (n,)
    mean: np.ndarray
    std: np.ndarray


@dataclass
class KnnModel:
    k: int
    structures: dict[str, KnnStructure]

    def feature_length(self) -> int:
        first = next(iter(self.structures.values()))
        return first.samples.shape[1]


# ---------------------------------------------------------------------------
# Training


def _dilate_mask(mask: np.ndarray, spacing, dilation_mm: float) -> np.ndarray:
    if dilation_mm <= 0:
        return mask
    dist = ndimage.distance_transform_edt(~mask, sampling=spacing)
    return dist <= dilation_mm


def train(scans: list[Volume], labels: list[Volume], config: TrainingConfig | None = None,
          threads: int = 1) -> tuple[AtlasSet, KnnModel]:
    """Build the atlas set and kNN classifier from labeled training scans."""
    cfg = config or TrainingConfig()
    n = len(scans)
    if n < 2:
        raise TrainingError("need at least 2 training scans")
    if len(labels) != n:
        raise TrainingError("scans and labels must align")
    for name in cfg.structures:
        if name not in cfg.label_ids:
            raise TrainingError(f"structure {name!r} has no label id")
    present = set()
    for lab in labels:
        present.update(np.unique(lab.data).astype(int).tolist())
    for name in cfg.structures:
        if cfg.label_ids[name] not in present:
            raise TrainingError(f"structure {name!r} absent from every training label")

    # All-pairs registration: transform[t][u] maps atlas t space to atlas u space.
    pairs = [(t, u) for t in range(n) for u in range(n) if t != u]

    def run_pair(pair):
        t, u = pair
        return optimize_similarity(scans[t], scans[u], cfg.registration)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_pair, pairs))
    else:
        results = [run_pair(p) for p in pairs]
    reg = {}
    for (t, u), res in zip(pairs, results):
        if not res.converged:
            raise TrainingError(f"registration of training scan {t} to {u} failed")
        reg[(t, u)] = res.transform

    entries = []
    for t in range(n):
        center_t = median_transform([reg[(t, u)] for u in range(n) if u != t])
        fits = []
        for u in range(n):
            if u == t:
                continue
            vals, inside = resample_values(scans[t], scans[u], reg[(t, u)])
            moved = Volume(np.where(inside, vals, 0.0).astype(np.float32),
                           scans[u].spacing, scans[u].origin)
            fits.append(fit_affine_intensity(moved, scans[u], cfg.margin_fraction,
                                             source_inside=inside))
        from .aan import median_map
        entries.append(AtlasEntry(scans[t], center_t, median_map(fits)))

    reference = scans[0]
    atlas_images = []
    atlas_labels = []
    for t, entry in enumerate(entries):
        normalized = apply_map(entry.intensity_map, scans[t])
        atlas_images.append(resample(normalized, reference, entry.center_transform,
                                     fill="mean"))
        atlas_labels.append(resample(labels[t], reference, entry.center_transform,
                                     mode="nearest", fill=0.0))

    rois = {}
    for name in cfg.structures:
        sid = cfg.label_ids[name]
        union = np.zeros(reference.dims, dtype=bool)
        for lab in atlas_labels:
            union |= lab.data == sid
        if not union.any():
            raise TrainingError(f"structure {name!r} empty in atlas space")
        rois[name] = _dilate_mask(union, reference.spacing, cfg.roi_dilation_mm)

    extractors = [FeatureExtractor(img, cfg.feature_spec) for img in atlas_images]
    # Negatives are drawn from the union of all structure ROIs: that union is
    # the exact domain the classifier is queried on, and restricting a
    # structure's negatives to its own ROI under-represents background there.
    union_roi = np.zeros(reference.dims, dtype=bool)
    for mask in rois.values():
        union_roi |= mask
    knn_structures = {}
    for si, name in enumerate(cfg.structures):
        sid = cfg.label_ids[name]
        rng = np.random.default_rng([cfg.sample_seed, si])
        pos_all, neg_all = [], []
        for t, lab in enumerate(atlas_labels):
            is_pos = (lab.data == sid) & rois[name]
            is_neg = (lab.data != sid) & union_roi
            pos_all.append((t, np.argwhere(is_pos)))
            neg_all.append((t, np.argwhere(is_neg)))

        def collect(candidates, cap):
            counts = [len(idx) for _, idx in candidates]
            total = sum(counts)
            take = min(cap, total)
            chosen = rng.choice(total, size=take, replace=False) if take < total \
                else np.arange(total)
            chosen.sort()
            out = []
            offset = 0
            for (t, idx), cnt in zip(candidates, counts):
                sel = chosen[(chosen >= offset) & (chosen < offset + cnt)] - offset
                if len(sel):
                    out.append(extractors[t].features_at(idx[sel]))
                offset += cnt
            return np.concatenate(out, axis=0) if out else np.empty((0, cfg.feature_spec.length()))

        pos = collect(pos_all, cfg.max_samples_per_class)
        neg = collect(neg_all, cfg.max_samples_per_class)
        if len(pos) < cfg.k or len(neg) < cfg.k:
            raise TrainingError(
                f"structure {name!r} has {len(pos)} positive / {len(neg)} negative "
                f"samples, need at least k={cfg.k} of each")
        feats = np.concatenate([pos, neg], axis=0)
        mean = feats.mean(axis=0)
        std = feats.std(axis=0)
        std[std == 0] = 1.0
        standardized = ((feats - mean) / std).astype(np.float32)
        positive = np.zeros(len(feats), dtype=bool)
        positive[: len(pos)] = True
        knn_structures[name] = KnnStructure(standardized, positive, mean, std)

    atlas_set = AtlasSet(reference, entries, rois, cfg)
    return atlas_set, KnnModel(cfg.k, knn_structures)


# ---------------------------------------------------------------------------
# Classification


def classify_posteriors(model: KnnModel, structure: str, features: np.ndarray) -> np.ndarray:
    """Fraction of the k nearest training samples that are positive, for a
    batch of raw (unstandardized) feature vectors.

    Exact kNN with deterministic distance-then-insertion-order
    tie-breaking: equal distances at the k boundary admit the lowest
    sample indices first.
    """
    st = model.structures[structure]
    q = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if q.shape[1] != st.samples.shape[1]:
        raise ValueError(f"feature length {q.shape[1]} != model {st.samples.shape[1]}")
    qs = (q - st.mean) / st.std
    samples = st.samples.astype(np.float64)
    labels = st.positive
    k = min(model.k, len(samples))
    s_norm = (samples * samples).sum(axis=1)
    out = np.empty(len(qs))
    chunk = 2048
    for start in range(0, len(qs), chunk):
        block = qs[start:start + chunk]
        d2 = (block * block).sum(axis=1)[:, None] - 2.0 * (block @ samples.T) + s_norm
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1:k]
        within = d2 <= kth
        cnt = within.sum(axis=1)
        pos = (within & labels).sum(axis=1).astype(np.float64)
        # Rows with distance ties straddling the k boundary: admit the
        # lowest-index tied samples first (matches the brute-force oracle).
        ambiguous = np.flatnonzero(cnt > k)
        for row in ambiguous:
            d_row = d2[row]
            tie = d_row == kth[row, 0]
            strict = d_row < kth[row, 0]
            n_strict = int(strict.sum())
            tie_idx = np.flatnonzero(tie)[: k - n_strict]
            pos[row] = int((strict & labels).sum()) + int(labels[tie_idx].sum())
        out[start:start + chunk] = pos / k
    return out


def classify_voxel(model: KnnModel, structure: str, feature_vector: np.ndarray) -> float:
    """Posterior in [0, 1] for one feature vector."""
    return float(classify_posteriors(model, structure, feature_vector)[0])


# ---------------------------------------------------------------------------
# Segmentation


@dataclass
class SegmentationResult:
    labels: Volume  # native-grid structure labels (float data holding int ids)
    atlas_labels: Volume
    volumes_ml: dict[str, float]
    transform: SimilarityTransform  # scan -> atlas center
    aan_map: AffineIntensityMap | None
    mean_intensity: float  # raw interior mean of the input scan
    registrations: list[RegistrationResult]


def label_volume_ml(labels: Volume, structure: str, label_ids: dict) -> float:
    """Structure volume in mL: voxel count times voxel volume / 1000."""
    if structure not in label_ids:
        raise KeyError(f"unknown structure {structure!r}")
    count = int((labels.data == label_ids[structure]).sum())
    return count * labels.voxel_volume_mm3() / 1000.0


def segment(scan: Volume, atlas_set: AtlasSet, model: KnnModel, use_aan: bool = True,
            registrations: list[RegistrationResult] | None = None,
            threads: int = 1) -> SegmentationResult:
    """Segment a scan: register to all atlases, optionally normalize
    intensities, classify ROI voxels in atlas space, argmax-fuse, and
    measure volumes on the native grid."""
    cfg = atlas_set.config
    regs = registrations if registrations is not None else \
        atlas_set.register_scan(scan, threads)
    fused = atlas_set.center_transform_for(regs)
    raw_mean = mean_intensity(scan, interior_region(scan, cfg.margin_fraction))

    aan_map = None
    work = scan
    if use_aan:
        aan_map, work = normalize_scan(scan, regs, atlas_set.images,
                                       atlas_set.intensity_maps, cfg.margin_fraction)

    atlas_img = resample(work, atlas_set.reference, fused, fill="mean")
    extractor = FeatureExtractor(atlas_img, cfg.feature_spec)

    union = np.zeros(atlas_set.reference.dims, dtype=bool)
    for mask in atlas_set.rois.values():
        union |= mask
    query_idx = np.argwhere(union)
    feats = extractor.features_at(query_idx)

    structures = list(cfg.structures)
    posteriors = np.stack(
        [classify_posteriors(model, name, feats) for name in structures], axis=0)
    # A structure may only claim voxels inside its own ROI, even though all
    # posteriors are evaluated across the union.
    for i, name in enumerate(structures):
        eligible = atlas_set.rois[name][query_idx[:, 0], query_idx[:, 1], query_idx[:, 2]]
        posteriors[i, ~eligible] = -1.0
    winner = np.argmax(posteriors, axis=0)  # first structure wins posterior ties
    best = posteriors[winner, np.arange(posteriors.shape[1])]
    ids = np.array([cfg.label_ids[s] for s in structures])
    assigned = np.where(best >= cfg.background_threshold, ids[winner], 0)

    atlas_labels = np.zeros(atlas_set.reference.dims, dtype=np.float32)
    atlas_labels[query_idx[:, 0], query_idx[:, 1], query_idx[:, 2]] = assigned
    atlas_label_volume = Volume(atlas_labels, atlas_set.reference.spacing,
                                atlas_set.reference.origin)

    native = resample(atlas_label_volume, scan, fused.invert(), mode="nearest", fill=0.0)
    volumes = {name: label_volume_ml(native, name, cfg.label_ids) for name in structures}
    return SegmentationResult(native, atlas_label_volume, volumes, fused, aan_map,
                              raw_mean, regs)


# ---------------------------------------------------------------------------
# Persistence


def save_model(model_dir: str, atlas_set: AtlasSet, model: KnnModel) -> None:
    os.makedirs(model_dir, exist_ok=True)
    cfg = atlas_set.config
    atlases = []
    for i, entry in enumerate(atlas_set.entries):
        image_name = f"atlas_{i:02d}.mhd"
        save_metaimage(entry.image, os.path.join(model_dir, image_name))
        atlases.append({
            "image": image_name,
            "center_transform": entry.center_transform.to_dict(),
            "intensity_map": entry.intensity_map.to_dict(),
        })
    # ROI masks as one bitmask volume (bit i = structure i in config order)
    bitmask = np.zeros(atlas_set.reference.dims, dtype=np.float32)
    for i, name in enumerate(cfg.structures):
        bitmask += np.float32(2**i) * atlas_set.rois[name].astype(np.float32)
    save_metaimage(Volume(bitmask, atlas_set.reference.spacing, atlas_set.reference.origin),
                   os.path.join(model_dir, "roi_mask.mhd"))

    doc = {
        "reference_grid": {
            "dims": list(atlas_set.reference.dims),
            "spacing": list(atlas_set.reference.spacing),
            "origin": list(atlas_set.reference.origin),
        },
        "atlases": atlases,
        "roi_boxes": atlas_set.roi_boxes(),
        "config": cfg.to_dict(),
    }
    with open(os.path.join(model_dir, "atlasset.json"), "w", encoding="ascii") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(model_dir, "labels.json"), "w", encoding="ascii") as fh:
        json.dump({str(v): k for k, v in cfg.label_ids.items()}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")

    knn_doc = {"k": model.k, "structures": {}}
    for name, st in model.structures.items():
        samples_file = f"samples_{name}.raw"
        labels_file = f"labels_{name}.raw"
        st.samples.astype("<f4").tofile(os.path.join(model_dir, samples_file))
        st.positive.astype(np.uint8).tofile(os.path.join(model_dir, labels_file))
        knn_doc["structures"][name] = {
            "samples_file": samples_file,
            "labels_file": labels_file,
            "n_samples": int(st.samples.shape[0]),
            "n_features": int(st.samples.shape[1]),
            "mean": st.mean.tolist(),
            "std": st.std.tolist(),
        }
    with open(os.path.join(model_dir, "knn.json"), "w", encoding="ascii") as fh:
        json.dump(knn_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(model_dir: str) -> tuple[AtlasSet, KnnModel]:
    with open(os.path.join(model_dir, "atlasset.json"), "r", encoding="ascii") as fh:
        doc = json.load(fh)
    cfg = TrainingConfig.from_dict(doc["config"])
    entries = []
    for a in doc["atlases"]:
        entries.append(AtlasEntry(
            load_metaimage(os.path.join(model_dir, a["image"])),
            SimilarityTransform.from_dict(a["center_transform"]),
            AffineIntensityMap.from_dict(a["intensity_map"]),
        ))
    grid = doc["reference_grid"]
    reference = Volume(np.zeros(tuple(grid["dims"]), dtype=np.float32),
                       tuple(grid["spacing"]), tuple(grid["origin"]))
    bitmask = load_metaimage(os.path.join(model_dir, "roi_mask.mhd")).data.astype(np.int64)
    rois = {
        name: (bitmask & (2**i)) > 0
        for i, name in enumerate(cfg.structures)
    }
    atlas_set = AtlasSet(reference, entries, rois, cfg)

    with open(os.path.join(model_dir, "knn.json"), "r", encoding="ascii") as fh:
        knn_doc = json.load(fh)
    structures = {}
    for name, meta in knn_doc["structures"].items():
        samples = np.fromfile(os.path.join(model_dir, meta["samples_file"]), dtype="<f4")
        samples = samples.reshape(meta["n_samples"], meta["n_features"])
        positive = np.fromfile(os.path.join(model_dir, meta["labels_file"]),
                               dtype=np.uint8).astype(bool)
        structures[name] = KnnStructure(samples, positive,
                                        np.asarray(meta["mean"]), np.asarray(meta["std"]))
    return atlas_set, KnnModel(int(knn_doc["k"]), structures)
