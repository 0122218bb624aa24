import numpy as np
import pytest

from driftnorm.registration import SimilarityTransform
from driftnorm.volume import Volume

# Knee-like analytic test scene: bone core with asymmetric lobes inside a
# split-intensity cartilage shell, partial-volume ramps ~2.5 mm wide. The
# asymmetry pins all three rotation axes during registration tests.
SCENE_CENTER = np.array([48.0, 48.0, 48.0])
SCENE_SPACING = 1.5
SCENE_DIMS = (64, 64, 64)


def _smooth_inside(pts, center, semi, ramp=2.5):
    e = np.sqrt((((pts - np.asarray(center)) / np.asarray(semi)) ** 2).sum(axis=1))
    d = (e - 1.0) * float(np.mean(semi))
    return np.clip(0.5 - d / ramp, 0.0, 1.0)


def scene_intensity(pts):
    """Evaluate the analytic scene at world coordinates (mm)."""
    pts = np.asarray(pts, dtype=np.float64)
    c = SCENE_CENTER
    u_outer = _smooth_inside(pts, c, (30.0, 27.0, 24.0))
    u_bone = _smooth_inside(pts, c, (24.0, 21.0, 18.0))
    u_lobe1 = _smooth_inside(pts, c + np.array([18.0, 12.0, -6.0]), (10.0, 8.0, 8.0))
    u_lobe2 = _smooth_inside(pts, c + np.array([-13.0, 13.0, 11.0]), (8.0, 7.0, 9.0))
    u_lobe3 = _smooth_inside(pts, c + np.array([2.0, -16.0, 12.0]), (7.0, 9.0, 8.0))
    bone = np.maximum(np.maximum(u_bone, u_lobe1), np.maximum(u_lobe2, u_lobe3))
    cart = np.where(pts[:, 0] < c[0], 140.0, 110.0)
    out = 20.0 + (cart - 20.0) * u_outer + (60.0 - cart) * np.minimum(bone, u_outer)
    out += (60.0 - 20.0) * np.clip(bone - u_outer, 0.0, 1.0)
    return out


def render_scene(transform=None, dims=SCENE_DIMS, spacing=(SCENE_SPACING,) * 3,
                 origin=(0.0, 0.0, 0.0), noise=0.0, seed=0):
    """Render the scene onto a grid; voxel p gets scene(transform(p))."""
    axes = [np.arange(d) for d in dims]
    grid = np.meshgrid(*axes, indexing="ij")
    idx = np.stack([g.ravel() for g in grid], axis=1)
    pts = np.asarray(origin) + np.asarray(spacing) * idx
    if transform is not None:
        pts = transform.apply(pts)
    vals = scene_intensity(pts)
    if noise > 0:
        vals = vals + np.random.default_rng(seed).normal(0, noise, size=vals.shape)
    return Volume(vals.reshape(dims).astype(np.float32), spacing, origin)


@pytest.fixture(scope="session")
def scene_volume():
    return render_scene(noise=1.0, seed=17)


def make_transform(translation=(0, 0, 0), rotation_deg=(0, 0, 0), scale=1.0,
                   center=None):
    if center is None:
        center = SCENE_SPACING * (np.asarray(SCENE_DIMS) - 1) / 2.0
    rot = np.deg2rad(np.asarray(rotation_deg, dtype=np.float64))
    return SimilarityTransform(np.asarray(translation, dtype=np.float64), rot,
                               float(np.log(scale)), np.asarray(center, dtype=np.float64))
