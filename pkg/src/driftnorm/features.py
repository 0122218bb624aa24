"""Scale-space voxel features: Gaussian derivative jets and Hessian eigenvalues.

Derivatives are taken with respect to world coordinates (mm), so anisotropic
voxel spacing is honored. Derivative kernels are moment-corrected so that the
response to a constant volume is exactly zero and responses to low-order
polynomial ramps are exact, which keeps the offset-invariance of Hessian
eigenvalues sharp even with truncated kernels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .volume import Volume, gaussian_kernel_1d

# All derivative order triples with total order 1..3 (the 3-jet has 19).
JET_ORDERS: tuple[tuple[int, int, int], ...] = tuple(
    (ox, oy, oz)
    for total in (1, 2, 3)
    for ox in range(total, -1, -1)
    for oy in range(total - ox, -1, -1)
    for oz in (total - ox - oy,)
)

_SECOND_ORDER = ((2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1), (0, 0, 2))


@dataclass
class FeatureSpec:
    """Which per-voxel features the classifier sees, in fixed order:
    position (mm), intensity, jet derivatives per scale, Hessian
    eigenvalues per scale."""

    scales_mm: tuple[float, ...] = (1.0, 2.0, 4.0)
    include_position: bool = True
    include_intensity: bool = True
    max_derivative_order: int = 3
    include_hessian_eigenvalues: bool = True

    def __post_init__(self):
        self.scales_mm = tuple(float(s) for s in self.scales_mm)
        if any(s <= 0 for s in self.scales_mm):
            raise ValueError("scales must be positive")
        if list(self.scales_mm) != sorted(set(self.scales_mm)):
            raise ValueError("scales must be strictly increasing")
        if not (0 <= self.max_derivative_order <= 3):
            raise ValueError("max_derivative_order must be in 0..3")

    def jet_orders(self) -> tuple[tuple[int, int, int], ...]:
        return tuple(o for o in JET_ORDERS if sum(o) <= self.max_derivative_order)

    def length(self) -> int:
        n = 0
        if self.include_position:
            n += 3
        if self.include_intensity:
            n += 1
        n += len(self.scales_mm) * len(self.jet_orders())
        if self.include_hessian_eigenvalues:
            n += len(self.scales_mm) * 3
        return n

    def to_dict(self) -> dict:
        return {
            "scales_mm": list(self.scales_mm),
            "include_position": self.include_position,
            "include_intensity": self.include_intensity,
            "max_derivative_order": self.max_derivative_order,
            "include_hessian_eigenvalues": self.include_hessian_eigenvalues,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(
            scales_mm=tuple(d["scales_mm"]),
            include_position=bool(d["include_position"]),
            include_intensity=bool(d["include_intensity"]),
            max_derivative_order=int(d["max_derivative_order"]),
            include_hessian_eigenvalues=bool(d["include_hessian_eigenvalues"]),
        )


@lru_cache(maxsize=256)
def derivative_kernel_1d(sigma_vox: float, order: int) -> np.ndarray:
    """1D Gaussian derivative kernel (correlation convention, voxel units).

    The sampled derivative-of-Gaussian is corrected so its discrete moments
    satisfy sum(x^m k(x)) = m! * delta(m, order) for m = 0..order, making
    constants map to exactly zero and polynomial ramps to exact derivatives.
    """
    if order == 0:
        return gaussian_kernel_1d(sigma_vox)
    if sigma_vox <= 0:
        raise ValueError(f"sigma must be > 0 for derivatives, got {sigma_vox}")
    radius = max(1, int(math.ceil(4.0 * sigma_vox)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    phi = np.exp(-0.5 * (x / sigma_vox) ** 2)
    phi /= phi.sum()
    # q_n(x)*phi(x) = d^n/dx^n phi(x) via the recurrence q_{n+1} = q_n' - (x/s^2) q_n.
    s2 = sigma_vox * sigma_vox
    q = np.array([1.0])
    for _ in range(order):
        nxt = np.zeros(len(q) + 1)
        nxt[1:] -= q / s2
        nxt[: len(q) - 1] += np.arange(1, len(q)) * q[1:]
        q = nxt
    k = np.polynomial.polynomial.polyval(x, q) * phi
    # Correlation computes sum k(t) f(x+t); the analytic derivative kernel
    # needs a (-1)^order flip to report +f' rather than -f'.
    k *= (-1.0) ** order
    # Moment correction in the span of {x^l phi}.
    powers = np.arange(order + 1)
    vand = x[None, :] ** powers[:, None]  # row m = x^m
    basis = vand * phi[None, :]  # row l = x^l phi
    moment_matrix = vand @ basis.T  # [m, l] = sum x^(m+l) phi
    target = np.zeros(order + 1)
    target[order] = math.factorial(order)
    coeffs = np.linalg.solve(moment_matrix, target - vand @ k)
    k = k + coeffs @ basis
    return k


def gaussian_derivative(v: Volume, order: tuple[int, int, int], sigma_mm: float) -> Volume:
    """Separable Gaussian derivative of the given per-axis order triple.

    The result is normalized to world units: a ramp of 2 intensity/mm has
    first derivative 2 regardless of voxel spacing.
    """
    order = tuple(int(o) for o in order)
    if len(order) != 3 or any(o < 0 for o in order):
        raise ValueError(f"order must be a non-negative triple, got {order}")
    if sum(order) > 3:
        raise ValueError(f"total derivative order must be <= 3, got {order}")
    if sigma_mm <= 0:
        raise ValueError(f"sigma_mm must be > 0, got {sigma_mm}")
    out = v.data.astype(np.float32)
    scale = 1.0
    for axis in range(3):
        sigma_vox = sigma_mm / v.spacing[axis]
        k = derivative_kernel_1d(sigma_vox, order[axis])
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
        scale /= v.spacing[axis] ** order[axis]
    if scale != 1.0:
        out = out * np.float32(scale)
    return v.with_data(out)


def symmetric_eigenvalues_3x3(xx, yy, zz, xy, xz, yz) -> np.ndarray:
    """Eigenvalues of symmetric 3x3 matrices, vectorized, sorted descending.

    Uses the trigonometric closed form (Cardano) in double precision;
    inputs are broadcast arrays of the six independent entries.
    """
    xx, yy, zz, xy, xz, yz = [np.asarray(a, dtype=np.float64) for a in (xx, yy, zz, xy, xz, yz)]
    q = (xx + yy + zz) / 3.0
    bxx, byy, bzz = xx - q, yy - q, zz - q
    p2 = (bxx * bxx + byy * byy + bzz * bzz) / 6.0 + (xy * xy + xz * xz + yz * yz) / 3.0
    p = np.sqrt(p2)
    # det(B) for symmetric B with zero trace
    det_b = (
        bxx * (byy * bzz - yz * yz)
        - xy * (xy * bzz - yz * xz)
        + xz * (xy * yz - byy * xz)
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(p > 0, det_b / (2.0 * p2 * p), 0.0)
    r = np.clip(r, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e1 = q + 2.0 * p * np.cos(phi)
    e3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e2 = 3.0 * q - e1 - e3
    return np.stack([e1, e2, e3], axis=-1)


def hessian_eigenvalues(v: Volume, sigma_mm: float) -> tuple[Volume, Volume, Volume]:
    """Per-voxel Hessian eigenvalue volumes at scale sigma_mm, descending."""
    second = {o: gaussian_derivative(v, o, sigma_mm).data for o in _SECOND_ORDER}
    eigs = symmetric_eigenvalues_3x3(
        second[(2, 0, 0)],
        second[(0, 2, 0)],
        second[(0, 0, 2)],
        second[(1, 1, 0)],
        second[(1, 0, 1)],
        second[(0, 1, 1)],
    )
    return tuple(v.with_data(eigs[..., i].astype(np.float32)) for i in range(3))


class FeatureExtractor:
    """Precomputes jet volumes for one image and gathers feature vectors.

    Hessian eigenvalues are derived on demand from the gathered second
    derivatives, so full eigen-decomposition volumes are never materialized.
    """

    def __init__(self, volume: Volume, spec: FeatureSpec):
        if spec.include_hessian_eigenvalues and spec.max_derivative_order < 2:
            raise ValueError("Hessian eigenvalues need max_derivative_order >= 2")
        self.volume = volume
        self.spec = spec
        self.jet_orders = spec.jet_orders()
        self._jets: dict[float, list[np.ndarray]] = {}
        if self.jet_orders:
            for s in spec.scales_mm:
                self._jets[s] = [gaussian_derivative(volume, o, s).data for o in self.jet_orders]

    def features_at(self, indices: np.ndarray) -> np.ndarray:
        """Feature matrix (n, spec.length()) at integer voxel indices (n, 3)."""
        idx = np.asarray(indices)
        if idx.ndim == 1:
            idx = idx[None, :]
        dims = self.volume.dims
        if (idx < 0).any() or (idx >= np.asarray(dims)).any():
            raise IndexError("voxel index out of bounds")
        ix, iy, iz = idx[:, 0], idx[:, 1], idx[:, 2]
        cols = []
        if self.spec.include_position:
            cols.append(self.volume.voxel_to_world(idx).astype(np.float64))
        if self.spec.include_intensity:
            cols.append(self.volume.data[ix, iy, iz].astype(np.float64)[:, None])
        order_pos = {o: i for i, o in enumerate(self.jet_orders)}
        for s in self.spec.scales_mm:
            jets = self._jets.get(s, [])
            if jets:
                stack = np.stack([j[ix, iy, iz] for j in jets], axis=1)
                cols.append(stack.astype(np.float64))
        if self.spec.include_hessian_eigenvalues:
            for s in self.spec.scales_mm:
                jets = self._jets[s]
                g = {o: jets[order_pos[o]][ix, iy, iz] for o in _SECOND_ORDER}
                eigs = symmetric_eigenvalues_3x3(
                    g[(2, 0, 0)], g[(0, 2, 0)], g[(0, 0, 2)],
                    g[(1, 1, 0)], g[(1, 0, 1)], g[(0, 1, 1)],
                )
                cols.append(eigs)
        return np.concatenate(cols, axis=1)


def feature_vector(extractor: FeatureExtractor, index) -> np.ndarray:
    """Single-voxel feature vector in the spec's fixed order."""
    return extractor.features_at(np.asarray(index))[0]
