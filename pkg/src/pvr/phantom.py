"""Ground-truth phantoms and synthetically skew-corrupted slice stacks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .niftiio import load_volume
from .volgrid import Geometry, Stack, Volume, resample

ORIENTATIONS = ("axial", "coronal", "sagittal")

# columns of the stack frame (in-plane u, in-plane v, slice normal) expressed in phantom axes
_ORIENT_FRAMES = {
    "axial": np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]], float),
    "coronal": np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], float),
    "sagittal": np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0]], float),
}

# (level, centre, radii) in units of the half field of view, painted in order.
# Every object is painted together with its mirror image.
DEFAULT_OBJECTS = (
    (0.35, (0.0, 0.02, -0.05), (0.72, 0.85, 0.75)),
    (0.80, (0.0, 0.02, -0.02), (0.62, 0.76, 0.64)),
    (1.00, (0.0, 0.05, 0.05), (0.45, 0.58, 0.45)),
    (0.20, (0.15, 0.10, 0.10), (0.08, 0.28, 0.12)),
    (0.60, (0.35, -0.40, 0.20), (0.10, 0.10, 0.10)),
    (0.60, (0.30, 0.45, -0.25), (0.12, 0.08, 0.10)),
    (0.20, (0.0, -0.20, -0.35), (0.10, 0.15, 0.08)),
    (0.60, (0.0, -0.55, 0.30), (0.18, 0.06, 0.07)),
)

LEVELS = (0.0, 0.2, 0.35, 0.6, 0.8, 1.0)
MIRRORS = ("x", "xy")


@dataclass(frozen=True)
class SkewParams:
    """Shear angle (degrees), one sign per off-diagonal entry, and slice interleave period.

    Sign order: xy, xz, yx, yz, zx, zy.
    """

    theta: float
    signs: Tuple[int, ...] = (1, 1, 1, 1, 1, 1)
    interleave: int = 1

    def __post_init__(self):
        if not abs(self.theta) < 90.0:
            raise ValueError("skew angle must satisfy |theta| < 90 degrees")
        if len(self.signs) != 6 or any(s not in (-1, 1) for s in self.signs):
            raise ValueError("signs must be six entries of +1/-1")
        if self.interleave < 1:
            raise ValueError("interleave period must be >= 1")


def skew_matrix(p: SkewParams) -> np.ndarray:
    """4x4 shear with unit diagonal and off-diagonals ``tan(+-theta)``."""
    S = np.eye(4)
    entries = ((0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1))
    for (r, c), sgn in zip(entries, p.signs):
        S[r, c] = math.tan(math.radians(sgn * p.theta))
    return S


def about(M: np.ndarray, center) -> np.ndarray:
    """Conjugate affine ``M`` so that it acts about ``center`` instead of the origin."""
    T = np.eye(4)
    T[:3, 3] = center
    Ti = np.eye(4)
    Ti[:3, 3] = -np.asarray(center, float)
    return T @ M @ Ti


def texture_objects(n: int = 300, seed: int = 7):
    """Small blobs inside the brain shell giving registration something to lock onto."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        ctr = rng.uniform(-0.6, 0.6, 3)
        if (ctr[0] / 0.62) ** 2 + (ctr[1] / 0.72) ** 2 + (ctr[2] / 0.62) ** 2 > 0.85:
            continue
        rad = rng.uniform(0.03, 0.09, 3)
        out.append((float(rng.choice(LEVELS[1:])), tuple(ctr), tuple(rad)))
    return tuple(out)


def mirror_image(a: np.ndarray, mirror: str) -> np.ndarray:
    """Reflect a volume across the plane ``x = 0`` (``"x"``) or ``x = y`` (``"xy"``)."""
    if mirror == "x":
        return a[::-1]
    if mirror == "xy":
        return a.transpose(1, 0, 2)
    raise ValueError(f"mirror must be one of {MIRRORS}")


def make_phantom(kind: str = "geometric", size: int = 64, spacing: float = 1.0, path=None,
                 smooth: float = 0.6, objects=None, mirror: str = "xy", texture: int = 300) -> Volume:
    """Ground truth volume, centred on the world origin.

    ``geometric`` paints ellipsoids at the shell levels, each together with its
    mirror image, blurs by ``smooth`` voxels and symmetrises exactly.
    The default mirror plane ``x = y`` is parallel to none of the standard
    slice orientations. ``loaded`` reads the volume at ``path``.
    """
    if kind == "loaded":
        if path is None:
            raise FileNotFoundError("loaded phantom needs a path")
        return load_volume(path)
    if kind != "geometric":
        raise ValueError(f"unknown phantom kind {kind!r}")
    if mirror not in MIRRORS:
        raise ValueError(f"mirror must be one of {MIRRORS}")
    objects = DEFAULT_OBJECTS + texture_objects(texture) if objects is None else objects
    n = int(size)
    c = (np.arange(n) - (n - 1) / 2.0) / (n / 2.0)
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    data = np.zeros((n, n, n))
    for level, ctr, rad in objects:
        inside = ((x - ctr[0]) / rad[0]) ** 2 + ((y - ctr[1]) / rad[1]) ** 2 + ((z - ctr[2]) / rad[2]) ** 2 <= 1
        data[inside | mirror_image(inside, mirror)] = level
    if smooth > 0:
        data = ndimage.gaussian_filter(data, smooth, mode="constant")
        data = 0.5 * (data + mirror_image(data, mirror))
    return Volume.from_array(data, (spacing,) * 3, centered=True)


def skewed_volume(gt: Volume, p: SkewParams, center=None, region: Optional[np.ndarray] = None) -> Volume:
    """``gt`` sheared about ``center`` (default: grid centre); only inside ``region`` if given."""
    S = skew_matrix(p)
    if np.array_equal(S, np.eye(4)):
        return gt.copy()
    center = gt.geometry.center() if center is None else center
    out, _ = resample(gt, gt.geometry, about(S, center))
    if region is not None:
        out = out.copy(np.where(region, out.data, gt.data))
    return out


def stack_geometry(gt: Geometry, orientation: str, out_spacing=(1.25, 1.25, 2.5)) -> Geometry:
    """Slice grid in the given orientation covering the voxel-centre box of ``gt``."""
    if orientation not in _ORIENT_FRAMES:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}")
    P = _ORIENT_FRAMES[orientation]
    axes = gt.axes @ P
    lengths = (np.asarray(gt.dims) - 1) * np.asarray(gt.spacing)
    stack_len = np.abs(P.T) @ lengths
    dims = tuple(int(math.floor(L / s + 1e-9)) + 1 for L, s in zip(stack_len, out_spacing))
    half = (np.asarray(dims) - 1) * np.asarray(out_spacing) / 2.0
    origin = gt.center() - axes @ half
    return Geometry(dims, tuple(out_spacing), tuple(origin), axes)


def corrupt_stack(gt: Volume, p: SkewParams, orientation: str = "axial", out_spacing=(1.25, 1.25, 2.5),
                  thickness: Optional[float] = None, noise_sigma: float = 0.0, rng=None,
                  skewed: Optional[Volume] = None, name: str = "") -> Stack:
    """Stack whose slices alternate (every ``p.interleave`` slices) between the skewed
    and the motion-free volume, even-numbered blocks skewed."""
    geom = stack_geometry(gt.geometry, orientation, out_spacing)
    skewed = skewed_volume(gt, p) if skewed is None else skewed
    clean_vals, _ = resample(gt, geom)
    skew_vals, _ = resample(skewed, geom)
    k = np.arange(geom.dims[2])
    from_skew = (k // p.interleave) % 2 == 0
    data = np.where(from_skew[None, None, :], skew_vals.data, clean_vals.data)
    if noise_sigma > 0:
        rng = np.random.default_rng(rng)
        data = data + rng.normal(0.0, noise_sigma, data.shape)
    return Stack(data, geom, thickness if thickness is not None else out_spacing[2],
                 interleave=p.interleave, name=name or orientation)


def sign_patterns(n: int, seed: int = 0):
    """Per-stack shear sign patterns; the first stack is all positive."""
    rng = np.random.default_rng(seed)
    out = [(1, 1, 1, 1, 1, 1)]
    while len(out) < n:
        out.append(tuple(int(s) for s in rng.choice([-1, 1], size=6)))
    return out


def corrupted_stacks(gt: Volume, theta: float, orientations: Sequence[str] = ORIENTATIONS,
                     interleave: int = 1, out_spacing=(1.25, 1.25, 2.5), noise_sigma: float = 0.0,
                     seed: int = 0, region: Optional[np.ndarray] = None, center=None):
    """One corrupted stack per orientation, each with its own shear sign pattern."""
    stacks = []
    rng = np.random.default_rng(seed)
    for orient, signs in zip(orientations, sign_patterns(len(orientations), seed)):
        p = SkewParams(theta, signs, interleave)
        sk = skewed_volume(gt, p, center=center, region=region)
        stacks.append(corrupt_stack(gt, p, orient, out_spacing, noise_sigma=noise_sigma, rng=rng,
                                    skewed=sk, name=orient))
    return stacks


def octant_mask(gt: Volume, octant=(1, 1, 1)) -> np.ndarray:
    """Boolean mask of one octant (sign per axis, relative to the grid centre)."""
    n = np.asarray(gt.dims)
    idx = [np.arange(d) - (d - 1) / 2.0 for d in n]
    x, y, z = np.meshgrid(*idx, indexing="ij")
    return (np.sign(x) == octant[0]) & (np.sign(y) == octant[1]) & (np.sign(z) == octant[2])
