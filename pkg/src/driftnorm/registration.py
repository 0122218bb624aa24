"""Similarity-transform registration driven by normalized mutual information.

A transform has 7 parameters: translation (mm), Euler rotation about the
fixed volume's world center (applied Z then Y then X), and isotropic
log-scale. Multi-scale optimization runs a derivative-free simplex search
per pyramid level; multi-atlas results fuse by element-wise parameter
median, which is what keeps the small fixed-size parameterization load
bearing.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import optimize

from .volume import (
    Volume,
    downsample2,
    interior_region,
    sample_nearest,
    sample_points,
)


class InsufficientOverlapError(Exception):
    """Too few voxel pairs inside both volumes to evaluate NMI."""


def rotation_matrix(rz: float, ry: float, rx: float) -> np.ndarray:
    """Rotation applying Z, then Y, then X (R = Rx @ Ry @ Rz)."""
    ca, sa = math.cos(rz), math.sin(rz)
    cb, sb = math.cos(ry), math.sin(ry)
    cg, sg = math.cos(rx), math.sin(rx)
    rz_m = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    ry_m = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rx_m = np.array([[1.0, 0.0, 0.0], [0.0, cg, -sg], [0.0, sg, cg]])
    return rx_m @ ry_m @ rz_m


def euler_from_matrix(r: np.ndarray) -> tuple[float, float, float]:
    """Inverse of rotation_matrix; valid away from gimbal lock (|ry| < 90 deg)."""
    ry = math.asin(max(-1.0, min(1.0, r[0, 2])))
    rz = math.atan2(-r[0, 1], r[0, 0])
    rx = math.atan2(-r[1, 2], r[2, 2])
    return rz, ry, rx


@dataclass
class SimilarityTransform:
    """Maps world point p to exp(log_scale) * R * (p - center) + center + translation."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # (rz, ry, rx)
    log_scale: float = 0.0
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.log_scale = float(self.log_scale)

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "SimilarityTransform":
        return cls(center=np.asarray(center, dtype=np.float64))

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)

    def parameters(self) -> np.ndarray:
        """The 7-vector fused by median_transform: t(3), rot(3), log_scale."""
        return np.concatenate([self.translation, self.rotation, [self.log_scale]])

    def matrix(self) -> np.ndarray:
        return self.scale * rotation_matrix(*self.rotation)

    def as_affine(self) -> tuple[np.ndarray, np.ndarray]:
        """(A, b) with p -> A @ p + b."""
        a = self.matrix()
        b = self.center + self.translation - a @ self.center
        return a, b

    @classmethod
    def from_affine(cls, a: np.ndarray, b: np.ndarray, center) -> "SimilarityTransform":
        center = np.asarray(center, dtype=np.float64)
        det = np.linalg.det(a)
        if det <= 0:
            raise ValueError("affine part must be orientation-preserving")
        s = det ** (1.0 / 3.0)
        rot = euler_from_matrix(a / s)
        translation = b - center + a @ center
        return cls(translation, np.asarray(rot), math.log(s), center)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        a = self.matrix()
        return (pts - self.center) @ a.T + self.center + self.translation

    def invert(self) -> "SimilarityTransform":
        a, b = self.as_affine()
        a_inv = np.linalg.inv(a)
        return SimilarityTransform.from_affine(a_inv, -a_inv @ b, self.center)

    def to_dict(self) -> dict:
        return {
            "translation_mm": self.translation.tolist(),
            "rotation_rad": self.rotation.tolist(),
            "log_scale": self.log_scale,
            "fixed_center_mm": self.center.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(
            np.asarray(d["translation_mm"]),
            np.asarray(d["rotation_rad"]),
            float(d["log_scale"]),
            np.asarray(d["fixed_center_mm"]),
        )


def compose(outer: SimilarityTransform, inner: SimilarityTransform,
            center=None) -> SimilarityTransform:
    """Transform equivalent to applying ``inner`` then ``outer``.

    Parameters are re-extracted about ``center`` (default: outer's center)
    so that a set of compositions can share one parameterization for
    element-wise median fusion.
    """
    ao, bo = outer.as_affine()
    ai, bi = inner.as_affine()
    if center is None:
        center = outer.center
    return SimilarityTransform.from_affine(ao @ ai, ao @ bi + bo, center)


def median_transform(transforms: list[SimilarityTransform]) -> SimilarityTransform:
    """Element-wise median of the 7 parameters (midpoint for even counts)."""
    if not transforms:
        raise ValueError("median of empty transform list")
    centers = np.stack([t.center for t in transforms])
    if not np.allclose(centers, centers[0], atol=1e-6):
        raise ValueError("median fusion requires a shared parameterization center")
    params = np.stack([t.parameters() for t in transforms])
    med = np.median(params, axis=0)
    return SimilarityTransform(med[:3], med[3:6], med[6], transforms[0].center)


# ---------------------------------------------------------------------------
# NMI


def _bin_indices(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _intensity_range(v: Volume, margin_fraction: float) -> tuple[float, float]:
    """0.5..99.5 percentile range over the interior; hot-voxel robust."""
    block = v.data[interior_region(v, margin_fraction).slices()]
    lo, hi = np.percentile(block, [0.5, 99.5])
    return float(lo), float(hi)


@numba.njit(cache=True, nogil=True)
def _joint_histogram_kernel(pts, m, c, flat, nx, ny, nz, mlo, mhi, bins,
                            fb_offset, hist):
    """Fused transform + trilinear sample + joint-histogram accumulation.

    Out-of-volume samples land in the per-row trash column (index ``bins``).
    Coordinates numerically on a lattice point are snapped so that aligned
    sampling reproduces stored values exactly.
    """
    width = mhi - mlo
    if width <= 0.0:
        width = 1.0
    nynz = ny * nz
    for i in range(pts.shape[0]):
        px, py, pz = pts[i, 0], pts[i, 1], pts[i, 2]
        x = m[0, 0] * px + m[0, 1] * py + m[0, 2] * pz + c[0]
        y = m[1, 0] * px + m[1, 1] * py + m[1, 2] * pz + c[1]
        z = m[2, 0] * px + m[2, 1] * py + m[2, 2] * pz + c[2]
        xr = round(x)
        if abs(x - xr) < 1e-9:
            x = xr
        yr = round(y)
        if abs(y - yr) < 1e-9:
            y = yr
        zr = round(z)
        if abs(z - zr) < 1e-9:
            z = zr
        if x < 0.0 or x > nx - 1 or y < 0.0 or y > ny - 1 or z < 0.0 or z > nz - 1:
            hist[fb_offset[i] + bins] += 1
            continue
        i0 = int(x)
        j0 = int(y)
        k0 = int(z)
        if i0 > nx - 2:
            i0 = nx - 2
        if j0 > ny - 2:
            j0 = ny - 2
        if k0 > nz - 2:
            k0 = nz - 2
        fx = x - i0
        fy = y - j0
        fz = z - k0
        base = (i0 * ny + j0) * nz + k0
        c000 = flat[base]
        c100 = flat[base + nynz]
        c010 = flat[base + nz]
        c110 = flat[base + nynz + nz]
        c001 = flat[base + 1]
        c101 = flat[base + nynz + 1]
        c011 = flat[base + nz + 1]
        c111 = flat[base + nynz + nz + 1]
        c00 = c000 + (c100 - c000) * fx
        c10 = c010 + (c110 - c010) * fx
        c01 = c001 + (c101 - c001) * fx
        c11 = c011 + (c111 - c011) * fx
        c0 = c00 + (c10 - c00) * fy
        c1 = c01 + (c11 - c01) * fy
        val = c0 + (c1 - c0) * fz
        mb = int(math.floor((val - mlo) / width * bins))
        if mb < 0:
            mb = 0
        elif mb > bins - 1:
            mb = bins - 1
        hist[fb_offset[i] + mb] += 1


class NmiEvaluator:
    """Caches the fixed-side interior samples and binning for repeated
    NMI evaluation during optimization.

    The hot path is a single fused pass: affine map, trilinear sample, and
    joint-histogram accumulation with a trash column for outside samples.
    """

    def __init__(self, fixed: Volume, moving: Volume, bins: int = 64,
                 margin_fraction: float = 0.15, min_pairs: int = 1000):
        if bins < 8:
            raise ValueError(f"bins must be >= 8, got {bins}")
        self.moving = moving
        self.bins = bins
        self.min_pairs = min_pairs
        region = interior_region(fixed, margin_fraction)
        axes = [np.arange(l, h) for l, h in zip(region.lo, region.hi)]
        grid = np.meshgrid(*axes, indexing="ij")
        idx = np.stack([g.ravel() for g in grid], axis=1)
        self.points_world = fixed.voxel_to_world(idx)
        fixed_vals = fixed.data[region.slices()].ravel().astype(np.float64)
        flo, fhi = _intensity_range(fixed, margin_fraction)
        fb = _bin_indices(fixed_vals, flo, fhi, bins)
        # row offsets into the (bins, bins+1) histogram with trash column
        self._fb_offset = (fb * (bins + 1)).astype(np.int64)
        self.mlo, self.mhi = _intensity_range(moving, margin_fraction)
        self._m_origin = np.asarray(moving.origin)
        self._m_spacing = np.asarray(moving.spacing)
        self._flat = np.ascontiguousarray(moving.data).ravel()
        self._dims = moving.dims

    def evaluate(self, transform: SimilarityTransform) -> float:
        a, b = transform.as_affine()
        m = a / self._m_spacing[:, None]  # fold world->voxel conversion in
        c = (b - self._m_origin) / self._m_spacing
        hist = np.zeros(self.bins * (self.bins + 1), dtype=np.int64)
        _joint_histogram_kernel(
            self.points_world, m, c, self._flat,
            self._dims[0], self._dims[1], self._dims[2],
            self.mlo, self.mhi, self.bins, self._fb_offset, hist,
        )
        joint = hist.reshape(self.bins, self.bins + 1)[:, : self.bins]
        n = int(joint.sum())
        if n < self.min_pairs:
            raise InsufficientOverlapError(f"only {n} voxel pairs inside both volumes")
        joint = joint.astype(np.float64) / n
        pa = joint.sum(axis=1)
        pb = joint.sum(axis=0)

        def entropy(p):
            p = p[p > 0]
            return float(-(p * np.log(p)).sum())

        hj = entropy(joint.ravel())
        if hj == 0.0:
            return 2.0
        return (entropy(pa) + entropy(pb)) / hj


def nmi(fixed: Volume, moving: Volume, transform: SimilarityTransform | None = None,
        bins: int = 64, margin_fraction: float = 0.15) -> float:
    """Normalized mutual information (H(A)+H(B))/H(A,B) in [1, 2].

    Computed over interior fixed voxels whose transformed sample lands
    inside the moving volume; entropies in nats.
    """
    if transform is None:
        transform = SimilarityTransform.identity(fixed.world_center())
    return NmiEvaluator(fixed, moving, bins, margin_fraction).evaluate(transform)


# ---------------------------------------------------------------------------
# Optimization


@dataclass
class RegistrationConfig:
    levels: int = 3
    # Coarse pyramid levels have few interior voxels; starving a 32^2
    # histogram there measurably degrades the capture range, hence 16 bins
    # at the coarsest level and extra resolution at the finest.
    bins_per_level: tuple[int, ...] = (16, 48, 96)  # coarse -> fine
    margin_fraction: float = 0.15
    max_iterations: int = 200  # per simplex run
    # A single simplex run tends to collapse prematurely along the weakly
    # determined rotation directions; each level re-runs with a fresh
    # simplex at the current best until no further improvement.
    max_restarts: int = 2
    # Simplex steps and convergence tolerances per level, coarse -> fine,
    # in (voxel, degree, percent) units; finest tolerance is 0.01.
    level_steps: tuple[float, ...] = (3.0, 1.0, 0.3)
    level_tolerance: tuple[float, ...] = (0.05, 0.02, 0.005)
    value_tolerance: float = 1e-7
    min_pairs: int = 1000
    min_level_dim: int = 8

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "bins_per_level": list(self.bins_per_level),
            "margin_fraction": self.margin_fraction,
            "max_iterations": self.max_iterations,
            "max_restarts": self.max_restarts,
            "level_steps": list(self.level_steps),
            "level_tolerance": list(self.level_tolerance),
            "value_tolerance": self.value_tolerance,
            "min_pairs": self.min_pairs,
            "min_level_dim": self.min_level_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        cfg = cls()
        tuple_keys = {"bins_per_level", "level_steps", "level_tolerance"}
        for k, v in d.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown registration config key {k!r}")
            setattr(cfg, k, tuple(v) if k in tuple_keys else v)
        return cfg


@dataclass
class RegistrationResult:
    transform: SimilarityTransform
    converged: bool
    nmi: float
    evaluations: int = 0


def _param_units(fixed: Volume) -> np.ndarray:
    """Scaling from optimizer units (voxel, degree, percent) to native units."""
    spacing = np.asarray(fixed.spacing)
    deg = math.pi / 180.0
    return np.concatenate([spacing, [deg, deg, deg], [0.01]])


def optimize_similarity(fixed: Volume, moving: Volume,
                        config: RegistrationConfig | None = None) -> RegistrationResult:
    """Multi-scale NMI maximization of a similarity transform.

    The returned transform maps fixed-volume world points into the moving
    volume's world space (the map used to sample the moving image on the
    fixed grid). Deterministic for identical inputs and config.
    """
    cfg = config or RegistrationConfig()
    center = fixed.world_center()
    units = _param_units(fixed)

    # Build the pyramid, coarse last; stop early if a level would get too small.
    pyramid = [(fixed, moving)]
    for _ in range(cfg.levels - 1):
        f, m = pyramid[-1]
        if min(min(f.dims), min(m.dims)) // 2 < cfg.min_level_dim:
            break
        pyramid.append((downsample2(f), downsample2(m)))
    pyramid.reverse()  # coarse -> fine

    def tail(seq, n):
        out = list(seq[-n:])
        while len(out) < n:
            out.insert(0, out[0])
        return out

    n_levels = len(pyramid)
    bins = tail(cfg.bins_per_level, n_levels)
    steps = tail(cfg.level_steps, n_levels)
    tols = tail(cfg.level_tolerance, n_levels)

    u = np.zeros(7)
    total_evals = 0
    level_best = 0.0
    for li, (f_l, m_l) in enumerate(pyramid):
        evaluator = NmiEvaluator(f_l, m_l, bins[li], cfg.margin_fraction, cfg.min_pairs)

        def objective(uu):
            t = SimilarityTransform(uu[:3] * units[:3], uu[3:6] * units[3:6],
                                    uu[6] * units[6], center)
            try:
                return -evaluator.evaluate(t)
            except InsufficientOverlapError:
                # Worse than any valid value (valid objectives lie in [-2, -1]).
                return 0.0

        level_best = objective(u)
        total_evals += 1
        for _ in range(cfg.max_restarts + 1):
            simplex = np.tile(u, (8, 1))
            for i in range(7):
                simplex[i + 1, i] += steps[li]
            res = optimize.minimize(
                objective, u, method="Nelder-Mead",
                options={
                    "initial_simplex": simplex,
                    "xatol": tols[li],
                    "fatol": cfg.value_tolerance,
                    "maxiter": cfg.max_iterations,
                    "disp": False,
                },
            )
            total_evals += res.nfev
            # Only move off the incoming estimate for a strict improvement,
            # so a start already at the optimum is returned unchanged.
            if res.fun < level_best - 1e-9:
                level_best = res.fun
                u = res.x
            else:
                break

    transform = SimilarityTransform(u[:3] * units[:3], u[3:6] * units[3:6],
                                    u[6] * units[6], center)
    # Failure: the finest level never reached a valid NMI (no usable overlap).
    if level_best >= 0.0:
        return RegistrationResult(SimilarityTransform.identity(center), False,
                                  1.0, total_evals)
    return RegistrationResult(transform, True, -level_best, total_evals)


def register_to_atlases(scan: Volume, atlas_images: list[Volume],
                        config: RegistrationConfig | None = None,
                        threads: int = 1) -> list[RegistrationResult]:
    """Register one scan to every atlas (forward: scan space -> atlas space).

    Per-atlas registrations are independent; with threads > 1 they run on a
    shared pool, and results are ordered by atlas index regardless of
    scheduling.
    """
    if threads <= 1:
        return [optimize_similarity(scan, img, config) for img in atlas_images]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(optimize_similarity, scan, img, config)
                   for img in atlas_images]
        return [f.result() for f in futures]


def fuse_center_transform(registrations: list[RegistrationResult],
                          center_transforms: list[SimilarityTransform],
                          reference_center) -> SimilarityTransform:
    """Median-fuse per-atlas compositions into the scan-to-atlas-center map.

    Each successful scan->atlas registration composes with that atlas's own
    center transform; failed registrations are dropped.
    """
    comps = [
        compose(r_t, reg.transform, center=reference_center)
        for reg, r_t in zip(registrations, center_transforms)
        if reg.converged
    ]
    if not comps:
        raise RuntimeError("all per-atlas registrations failed")
    return median_transform(comps)


# ---------------------------------------------------------------------------
# Resampling


def resample_values(source: Volume, like, forward: SimilarityTransform,
                    mode: str = "linear") -> tuple[np.ndarray, np.ndarray]:
    """Pull ``source`` onto the grid of ``like`` given the forward map
    source-space -> grid-space. Returns (values, inside) arrays shaped like
    the grid; values are NaN outside for linear mode.
    """
    dims = like.dims
    inverse = forward.invert()
    axes = [np.arange(d) for d in dims]
    grid = np.meshgrid(*axes, indexing="ij")
    idx = np.stack([g.ravel() for g in grid], axis=1)
    pts = np.asarray(like.origin) + np.asarray(like.spacing) * idx
    q = inverse.apply(pts)
    vox = (q - np.asarray(source.origin)) / np.asarray(source.spacing)
    if mode == "linear":
        vals, inside = sample_points(source, vox)
    elif mode == "nearest":
        dims_s = np.asarray(source.dims)
        inside = np.all((vox >= -0.5) & (vox <= dims_s - 0.5), axis=1)
        vals = sample_nearest(source, vox, fill=0.0)
    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    return vals.reshape(dims), inside.reshape(dims)


def resample(source: Volume, like, forward: SimilarityTransform,
             mode: str = "linear", fill: float | str = 0.0) -> Volume:
    """Resampled Volume on ``like``'s grid; outside voxels get ``fill``
    (a number, or "mean" for the mean of the inside voxels)."""
    vals, inside = resample_values(source, like, forward, mode)
    if mode == "linear":
        if fill == "mean":
            fill_value = float(vals[inside].mean()) if inside.any() else 0.0
        else:
            fill_value = float(fill)
        vals = np.where(inside, vals, fill_value)
    return Volume(vals.astype(np.float32), like.spacing, like.origin)
