"""3D scalar volumes: MetaImage I/O, sampling, smoothing, region statistics.

The Volume is the carrier type for every image in the pipeline. Data is kept
as float32 indexed [ix, iy, iz]; world coordinates are voxel centers,
``world = origin + spacing * index``. Volumes are treated as immutable:
every operation returns a new Volume.

Samples taken outside the voxel lattice are reported with the explicit
OUTSIDE marker (NaN) rather than zero-filled, so downstream histogram and
least-squares code can exclude non-overlapping voxels.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# Marker returned for samples outside the voxel lattice.
OUTSIDE = float("nan")

_MHD_KEYS = (
    "ObjectType",
    "NDims",
    "DimSize",
    "ElementSpacing",
    "Offset",
    "ElementType",
    "ElementByteOrderMSB",
    "ElementDataFile",
)

_ELEMENT_TYPES = {
    "MET_FLOAT": np.dtype("<f4"),
    "MET_SHORT": np.dtype("<i2"),
}


class MetaImageError(Exception):
    """Raised for malformed or inconsistent MetaImage header/raw pairs."""


@dataclass
class Volume:
    """Dense 3D scalar grid with voxel spacing (mm) and world origin (mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        if not np.isfinite(data).all():
            raise ValueError("volume data contains NaN or Inf")
        self.data = data
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or len(self.origin) != 3:
            raise ValueError("spacing and origin must have 3 components")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def world_center(self) -> np.ndarray:
        """World coordinate of the grid center (mm)."""
        d = np.asarray(self.dims, dtype=np.float64)
        return np.asarray(self.origin) + np.asarray(self.spacing) * (d - 1) / 2.0

    def voxel_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + np.asarray(self.spacing) * idx

    def world_to_voxel(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def with_data(self, data: np.ndarray) -> "Volume":
        """New volume on the same grid with different voxel values."""
        return Volume(data, self.spacing, self.origin)

    def same_grid(self, other: "Volume", tol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
        )


@dataclass
class InteriorRegion:
    """Per-axis half-open voxel index ranges [lo, hi) after margin exclusion."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    margin_fraction: float = 0.0

    def voxel_count(self) -> int:
        return int(np.prod([h - l for l, h in zip(self.lo, self.hi)]))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))

    def contains_grid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Open index grids spanning the region (for vectorized evaluation)."""
        return np.ix_(*[np.arange(l, h) for l, h in zip(self.lo, self.hi)])


def interior_region(v: Volume, margin_fraction: float) -> InteriorRegion:
    """Index ranges excluding the outer ``margin_fraction`` of each axis."""
    if not (0.0 <= margin_fraction < 0.5):
        raise ValueError(f"margin_fraction must be in [0, 0.5), got {margin_fraction}")
    lo = []
    hi = []
    for d in v.dims:
        m = int(math.floor(margin_fraction * d))
        if d - 2 * m <= 0:
            raise ValueError(f"margin {margin_fraction} leaves no interior for dim {d}")
        lo.append(m)
        hi.append(d - m)
    return InteriorRegion(tuple(lo), tuple(hi), margin_fraction)


def mean_intensity(v: Volume, region: InteriorRegion | None = None) -> float:
    """Arithmetic mean over the interior region (double accumulation)."""
    if region is None:
        region = interior_region(v, 0.0)
    block = v.data[region.slices()]
    if block.size == 0:
        raise ValueError("interior region is empty")
    return float(block.mean(dtype=np.float64))


# ---------------------------------------------------------------------------
# MetaImage (.mhd + .raw) I/O


def _parse_header(path: str) -> dict[str, str]:
    header = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise MetaImageError(f"garbled header line in {path!r}: {line!r}")
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
    return header


def load_metaimage(header_path: str) -> Volume:
    """Read an .mhd/.raw pair into a float32 Volume.

    Accepts MET_FLOAT and MET_SHORT element types, little-endian only.
    Unknown header keys are ignored with a warning.
    """
    header = _parse_header(header_path)
    for key in header:
        if key not in _MHD_KEYS:
            warnings.warn(f"ignoring unknown MetaImage key {key!r} in {header_path!r}")
    try:
        ndims = int(header["NDims"])
        dims = tuple(int(t) for t in header["DimSize"].split())
        element_type = header["ElementType"]
        data_file = header["ElementDataFile"]
    except KeyError as exc:
        raise MetaImageError(f"missing MetaImage key {exc} in {header_path!r}") from exc
    if ndims != 3 or len(dims) != 3:
        raise MetaImageError(f"only 3D volumes supported, NDims={ndims}")
    if header.get("ObjectType", "Image") != "Image":
        raise MetaImageError(f"unsupported ObjectType {header.get('ObjectType')!r}")
    if header.get("ElementByteOrderMSB", "False") not in ("False", "false", "0"):
        raise MetaImageError("big-endian MetaImage data is not supported")
    if element_type not in _ELEMENT_TYPES:
        raise MetaImageError(f"unsupported ElementType {element_type!r}")
    dtype = _ELEMENT_TYPES[element_type]

    spacing = tuple(float(t) for t in header.get("ElementSpacing", "1 1 1").split())
    origin = tuple(float(t) for t in header.get("Offset", "0 0 0").split())

    raw_path = os.path.join(os.path.dirname(os.path.abspath(header_path)), data_file)
    expected = int(np.prod(dims)) * dtype.itemsize
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise MetaImageError(
            f"raw file {raw_path!r} has {actual} bytes, expected {expected} "
            f"for dims {dims} ({element_type})"
        )
    flat = np.fromfile(raw_path, dtype=dtype)
    # Raw layout is x-fastest; reshape as (z, y, x) then transpose to [ix, iy, iz].
    data = flat.reshape(dims[::-1]).transpose(2, 1, 0)
    return Volume(data.astype(np.float32), spacing, origin)


def save_metaimage(v: Volume, header_path: str) -> None:
    """Write the volume as an .mhd text header plus little-endian .raw file.

    Round-trips exactly through load_metaimage. On failure no partial
    files are left behind.
    """
    base, ext = os.path.splitext(header_path)
    if ext != ".mhd":
        raise MetaImageError(f"header path must end in .mhd, got {header_path!r}")
    raw_path = base + ".raw"
    dims = v.dims
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        f"DimSize = {dims[0]} {dims[1]} {dims[2]}",
        "ElementSpacing = " + " ".join(repr(s) for s in v.spacing),
        "Offset = " + " ".join(repr(o) for o in v.origin),
        "ElementType = MET_FLOAT",
        "ElementByteOrderMSB = False",
        f"ElementDataFile = {os.path.basename(raw_path)}",
    ]
    created = []
    try:
        with open(raw_path, "wb") as fh:
            created.append(raw_path)
            v.data.astype("<f4").transpose(2, 1, 0).tofile(fh)
        with open(header_path, "w", encoding="ascii") as fh:
            created.append(header_path)
            fh.write("\n".join(lines) + "\n")
    except OSError:
        for path in created:
            try:
                os.remove(path)
            except OSError:
                pass
        raise


# ---------------------------------------------------------------------------
# Sampling


def sample_points(v: Volume, pts_voxel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear samples at continuous voxel coordinates, vectorized.

    Returns (values, inside) where values are NaN wherever ``inside`` is
    False, i.e. any coordinate leaves [0, dim-1] on its axis.
    """
    pts = np.asarray(pts_voxel, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    dims = np.asarray(v.dims)
    inside = np.all((pts >= 0.0) & (pts <= dims - 1), axis=1)
    out = np.full(pts.shape[0], np.nan)
    if not inside.any():
        return out, inside
    p = pts[inside]
    i0 = np.floor(p).astype(np.intp)
    i0 = np.minimum(i0, dims - 2)  # keep the +1 neighbor valid at the top edge
    i0 = np.maximum(i0, 0)
    f = p - i0
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    d = v.data
    c000 = d[x0, y0, z0]
    c100 = d[x0 + 1, y0, z0]
    c010 = d[x0, y0 + 1, z0]
    c110 = d[x0 + 1, y0 + 1, z0]
    c001 = d[x0, y0, z0 + 1]
    c101 = d[x0 + 1, y0, z0 + 1]
    c011 = d[x0, y0 + 1, z0 + 1]
    c111 = d[x0 + 1, y0 + 1, z0 + 1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out[inside] = c0 * (1 - fz) + c1 * fz
    return out, inside


def trilinear_sample(v: Volume, p) -> float:
    """Trilinear interpolation at one continuous voxel coordinate.

    Coordinates outside [0, dim-1] on any axis return the OUTSIDE marker
    (NaN); being outside is a value, not an error.
    """
    values, _ = sample_points(v, np.asarray(p, dtype=np.float64))
    return float(values[0])


def sample_nearest(v: Volume, pts_voxel: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Nearest-neighbor samples (for categorical label volumes)."""
    pts = np.asarray(pts_voxel, dtype=np.float64)
    dims = np.asarray(v.dims)
    inside = np.all((pts >= -0.5) & (pts <= dims - 0.5), axis=1)
    out = np.full(pts.shape[0], fill, dtype=v.data.dtype)
    if inside.any():
        idx = np.rint(pts[inside]).astype(np.intp)
        idx = np.clip(idx, 0, dims - 1)
        out[inside] = v.data[idx[:, 0], idx[:, 1], idx[:, 2]]
    return out


# ---------------------------------------------------------------------------
# Smoothing / pyramid


def gaussian_kernel_1d(sigma_vox: float) -> np.ndarray:
    """Sampled Gaussian, truncated at 4 sigma, renormalized to sum 1."""
    if sigma_vox < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma_vox}")
    if sigma_vox == 0:
        return np.array([1.0])
    radius = max(1, int(math.ceil(4.0 * sigma_vox)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def _blur_voxels(data: np.ndarray, sigma_vox) -> np.ndarray:
    """Separable Gaussian blur with per-axis sigmas in voxel units."""
    out = data.astype(np.float32)
    for axis, s in enumerate(sigma_vox):
        if s == 0:
            continue
        k = gaussian_kernel_1d(s)
        # 'nearest' replicates edge values (clamped boundary).
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    return out


def gaussian_blur(v: Volume, sigma_mm: float) -> Volume:
    """Separable Gaussian smoothing; sigma given in mm, spacing honored."""
    if sigma_mm < 0:
        raise ValueError(f"sigma_mm must be >= 0, got {sigma_mm}")
    if sigma_mm == 0:
        return v.with_data(v.data.copy())
    sigma_vox = [sigma_mm / s for s in v.spacing]
    return v.with_data(_blur_voxels(v.data, sigma_vox))


def downsample2(v: Volume) -> Volume:
    """Halve each axis: blur at one voxel sigma, keep every second voxel."""
    if any(d < 2 for d in v.dims):
        raise ValueError(f"all dims must be >= 2 to downsample, got {v.dims}")
    blurred = _blur_voxels(v.data, (1.0, 1.0, 1.0))
    data = blurred[::2, ::2, ::2]
    spacing = tuple(2.0 * s for s in v.spacing)
    return Volume(data, spacing, v.origin)
