"""Atlas affine intensity normalization.

A study scan's global intensity map is estimated by ordinary least squares
against each geometrically aligned atlas (inside the margin, excluding
voxels that left the atlas grid), composed with that atlas's own map to the
intensity center, and median-fused across atlases. Applying the fused map
normalizes the scan before feature extraction; the geometric registration
itself is unaffected because NMI is invariant to affine intensity maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .registration import RegistrationResult, SimilarityTransform, resample_values
from .volume import Volume, interior_region


class IntensityFitError(Exception):
    """Degenerate or underdetermined least-squares intensity fit."""


@dataclass
class AffineIntensityMap:
    """Global intensity map x -> scale * x + offset."""

    scale: float = 1.0
    offset: float = 0.0

    def __call__(self, x):
        return self.scale * x + self.offset

    def inverse(self) -> "AffineIntensityMap":
        return AffineIntensityMap(1.0 / self.scale, -self.offset / self.scale)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "offset": self.offset}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineIntensityMap":
        return cls(float(d["scale"]), float(d["offset"]))


def compose_maps(outer: AffineIntensityMap, inner: AffineIntensityMap) -> AffineIntensityMap:
    """Map equivalent to applying inner then outer:
    scale = so*si, offset = so*oi + oo."""
    return AffineIntensityMap(outer.scale * inner.scale,
                              outer.scale * inner.offset + outer.offset)


def median_map(maps: list[AffineIntensityMap]) -> AffineIntensityMap:
    """Element-wise median of scales and offsets (midpoint for even counts)."""
    if not maps:
        raise ValueError("median of empty map list")
    scales = np.array([m.scale for m in maps])
    offsets = np.array([m.offset for m in maps])
    return AffineIntensityMap(float(np.median(scales)), float(np.median(offsets)))


def apply_map(m: AffineIntensityMap, v: Volume) -> Volume:
    """Apply the intensity map voxel-wise; geometry unchanged."""
    return v.with_data(np.float32(m.scale) * v.data + np.float32(m.offset))


def fit_affine_intensity(source: Volume, target: Volume, margin_fraction: float = 0.15,
                         source_inside: np.ndarray | None = None,
                         min_pairs: int = 1000) -> AffineIntensityMap:
    """OLS fit of (scale, offset) mapping source intensities to target.

    ``source`` must already be resampled onto target's grid;
    ``source_inside`` marks voxels where the resampled value is real rather
    than an outside fill. Only interior voxels (margin excluded) enter the
    fit.
    """
    if source.dims != target.dims:
        raise ValueError("source must be resampled to the target grid first")
    region = interior_region(target, margin_fraction)
    sl = region.slices()
    s = source.data[sl].ravel().astype(np.float64)
    t = target.data[sl].ravel().astype(np.float64)
    if source_inside is not None:
        keep = source_inside[sl].ravel()
        s = s[keep]
        t = t[keep]
    if s.size < min_pairs:
        raise IntensityFitError(f"only {s.size} paired voxels, need {min_pairs}")
    s_mean = s.mean()
    t_mean = t.mean()
    ds = s - s_mean
    sxx = float(ds @ ds)
    if sxx == 0.0:
        raise IntensityFitError("source has zero variance inside the margin")
    scale = float(ds @ (t - t_mean)) / sxx
    return AffineIntensityMap(scale, t_mean - scale * s_mean)


def normalize_scan(scan: Volume,
                   registrations: list[RegistrationResult],
                   atlas_images: list[Volume],
                   atlas_maps: list[AffineIntensityMap],
                   margin_fraction: float = 0.15) -> tuple[AffineIntensityMap, Volume]:
    """Estimate and apply the scan's fused intensity map to atlas center.

    For each atlas: resample the scan into the atlas grid with its forward
    registration, fit scan->atlas by least squares, compose with the
    atlas's own map. Atlases with failed registrations or non-positive
    fitted scale (anti-correlated intensities) are dropped; the rest fuse
    by element-wise median.
    """
    if not (len(registrations) == len(atlas_images) == len(atlas_maps)):
        raise ValueError("registrations, atlas images and maps must align")
    composed = []
    for reg, img, amap in zip(registrations, atlas_images, atlas_maps):
        if not reg.converged:
            continue
        vals, inside = resample_values(scan, img, reg.transform, mode="linear")
        vals = np.where(inside, vals, 0.0)
        moved = Volume(vals.astype(np.float32), img.spacing, img.origin)
        try:
            fit = fit_affine_intensity(moved, img, margin_fraction, source_inside=inside)
        except IntensityFitError:
            continue
        if fit.scale <= 0:
            continue
        composed.append(compose_maps(amap, fit))
    if not composed:
        raise IntensityFitError("intensity fit failed against every atlas")
    fused = median_map(composed)
    return fused, apply_map(fused, scan)
