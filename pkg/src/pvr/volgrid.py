"""Grid data model shared by every stage: volumes, slice stacks and rigid transforms.

Voxel data is stored in index order ``data[i, j, k]`` and mapped to world
millimetres by ``origin + axes @ (spacing * (i, j, k))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

ORTHO_TOL = 1e-6


def _rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(rotation: Sequence[float]) -> np.ndarray:
    """3x3 rotation for intrinsic Z-Y-X Euler angles ``(rx, ry, rz)`` in degrees.

    The composed matrix is ``Rz(rz) @ Ry(ry) @ Rx(rx)``.
    """
    rx, ry, rz = np.deg2rad(np.asarray(rotation, dtype=float))
    return _rot_z(rz) @ _rot_y(ry) @ _rot_x(rx)


def matrix_to_euler(R: np.ndarray) -> np.ndarray:
    sy = -R[2, 0]
    sy = min(1.0, max(-1.0, sy))
    ry = np.arcsin(sy)
    if abs(sy) < 1.0 - 1e-12:
        rx = np.arctan2(R[2, 1], R[2, 2])
        rz = np.arctan2(R[1, 0], R[0, 0])
    else:
        # gimbal lock: fold everything into rz
        rx = 0.0
        rz = np.arctan2(-R[0, 1], R[1, 1])
    return np.rad2deg(np.array([rx, ry, rz]))


@dataclass(frozen=True)
class RigidTransform:
    """6-DOF rigid transform: Euler rotation in degrees, translation in mm.

    ``apply(x) = R @ x + t`` with ``R = euler_to_matrix(rotation)``.
    """

    rotation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation", tuple(float(v) for v in self.rotation))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        return cls(tuple(matrix_to_euler(M[:3, :3])), tuple(M[:3, 3]))

    @property
    def params(self) -> np.ndarray:
        return np.array(self.rotation + self.translation)

    def rotation_matrix(self) -> np.ndarray:
        return euler_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix()
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "RigidTransform":
        R = self.rotation_matrix()
        M = np.eye(4)
        M[:3, :3] = R.T
        M[:3, 3] = -R.T @ np.asarray(self.translation)
        return RigidTransform.from_matrix(M)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying ``other`` first, then ``self``."""
        return RigidTransform.from_matrix(self.matrix() @ other.matrix())

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation_matrix().T + np.asarray(self.translation)

    def is_identity(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.params) <= tol))


@dataclass(frozen=True)
class Geometry:
    """Voxel grid placement: counts, spacing (mm), world origin and direction cosines."""

    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    axes: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        axes = np.array(self.axes, dtype=float).reshape(3, 3)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive counts, got {self.dims}")
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not np.allclose(axes.T @ axes, np.eye(3), atol=ORTHO_TOL):
            raise ValueError("axes must be orthonormal direction cosines")
        axes.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "axes", axes)

    def __eq__(self, other):
        if not isinstance(other, Geometry):
            return NotImplemented
        return (self.dims == other.dims and self.spacing == other.spacing
                and self.origin == other.origin and np.array_equal(self.axes, other.axes))

    def __hash__(self):
        return hash((self.dims, self.spacing, self.origin, self.axes.tobytes()))

    @property
    def affine(self) -> np.ndarray:
        """4x4 index-to-world matrix."""
        A = np.eye(4)
        A[:3, :3] = self.axes * np.asarray(self.spacing)[None, :]
        A[:3, 3] = self.origin
        return A

    @property
    def inverse_affine(self) -> np.ndarray:
        A = np.eye(4)
        A[:3, :3] = (self.axes / np.asarray(self.spacing)[None, :]).T
        A[:3, 3] = -A[:3, :3] @ np.asarray(self.origin)
        return A

    def world(self, index: np.ndarray) -> np.ndarray:
        index = np.asarray(index, dtype=float)
        return index @ self.affine[:3, :3].T + np.asarray(self.origin)

    def index(self, world: np.ndarray) -> np.ndarray:
        world = np.asarray(world, dtype=float)
        A = self.inverse_affine
        return world @ A[:3, :3].T + A[:3, 3]

    def grid_world(self) -> np.ndarray:
        """World coordinates of every voxel centre, shape ``dims + (3,)``."""
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij"), axis=-1)
        return self.world(idx)

    def center(self) -> np.ndarray:
        return self.world((np.asarray(self.dims) - 1) / 2.0)

    def corners(self) -> np.ndarray:
        hi = np.asarray(self.dims) - 1
        idx = np.array([[a, b, c] for a in (0, hi[0]) for b in (0, hi[1]) for c in (0, hi[2])], float)
        return self.world(idx)

    def with_pose(self, t: RigidTransform) -> "Geometry":
        """Geometry whose world frame is moved by ``t`` (data stays attached to the grid)."""
        M = t.matrix() @ self.affine
        return Geometry(self.dims, self.spacing, tuple(M[:3, 3]), t.rotation_matrix() @ self.axes)


@dataclass
class Volume:
    """3D scalar image on a :class:`Geometry`."""

    data: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.geometry.dims:
            raise ValueError(f"data shape {self.data.shape} does not match dims {self.geometry.dims}")

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), origin=None, axes=None, centered=False):
        """Wrap an array; ``centered=True`` puts the world origin at the grid centre."""
        data = np.asarray(data, dtype=np.float64)
        axes = np.eye(3) if axes is None else np.asarray(axes, dtype=float)
        if origin is None:
            origin = np.zeros(3)
            if centered:
                origin = -(axes * np.asarray(spacing, float)) @ ((np.asarray(data.shape) - 1) / 2.0)
        return cls(data, Geometry(data.shape, spacing, tuple(origin), axes))

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def affine(self):
        return self.geometry.affine

    def copy(self, data=None) -> "Volume":
        return Volume(self.data.copy() if data is None else data, self.geometry)


def _trilinear(data: np.ndarray, idx: np.ndarray, tol: float = 1e-9):
    """Vectorised trilinear interpolation at fractional indices ``idx`` (N, 3)."""
    dims = np.asarray(data.shape)
    valid = np.all((idx >= -tol) & (idx <= dims - 1 + tol), axis=1)
    out = np.zeros(len(idx))
    if not np.any(valid):
        return out, valid
    p = np.clip(idx[valid], 0, dims - 1)
    i0 = np.minimum(np.floor(p).astype(np.int64), np.maximum(dims - 2, 0))
    f = p - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    acc = np.zeros(len(p))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        ix = i1[:, 0] if dx else i0[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            iy = i1[:, 1] if dy else i0[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                iz = i1[:, 2] if dz else i0[:, 2]
                acc += wx * wy * wz * data[ix, iy, iz]
    out[valid] = acc
    return out, valid


def sample_points(v: Volume, points: np.ndarray):
    """Trilinear samples at world points ``(N, 3)``; returns ``(values, valid)``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return _trilinear(v.data, v.geometry.index(points))


def sample_trilinear(v: Volume, world_point) -> Optional[float]:
    """Trilinear value at one world point, or ``None`` outside the voxel-centre bounding box."""
    values, valid = sample_points(v, np.asarray(world_point, dtype=float)[None, :])
    return float(values[0]) if valid[0] else None


def resample(src: Volume, target: Geometry, t=None):
    """Resample ``src`` onto ``target``: voxel ``x`` takes ``src(t(world(x)))``.

    ``t`` is a :class:`RigidTransform` or any 4x4 affine matrix. Returns
    ``(volume, mask)``; samples falling outside ``src`` are 0 with mask False.
    """
    pts = target.grid_world().reshape(-1, 3)
    if isinstance(t, RigidTransform):
        pts = t.apply(pts)
    elif t is not None:
        M = np.asarray(t, dtype=float)
        pts = pts @ M[:3, :3].T + M[:3, 3]
    values, valid = sample_points(src, pts)
    return Volume(values.reshape(target.dims), target), valid.reshape(target.dims)


def fill_unobserved(data: np.ndarray, observed: np.ndarray, max_passes: int = 64) -> np.ndarray:
    """Fill unobserved voxels with the mean of their observed 26-neighbours, growing inwards."""
    data = np.where(observed, data, 0.0)
    observed = observed.copy()
    kernel = np.ones((3, 3, 3))
    kernel[1, 1, 1] = 0
    for _ in range(max_passes):
        if observed.all():
            break
        s = ndimage.convolve(data * observed, kernel, mode="constant")
        n = ndimage.convolve(observed.astype(float), kernel, mode="constant")
        grow = (~observed) & (n > 0)
        if not grow.any():
            break
        data[grow] = s[grow] / n[grow]
        observed = observed | grow
    return data


@dataclass
class Stack:
    """Parallel 2D slices ``data[:, :, k]`` sharing in-plane geometry, each with its own pose.

    ``geometry.spacing[2]`` is the slice-to-slice distance; ``thickness`` is the
    slice profile width used by the PSF.
    """

    data: np.ndarray
    geometry: Geometry
    thickness: float
    poses: list = None
    interleave: int = 1
    name: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape != self.geometry.dims:
            raise ValueError("stack data must be (nx, ny, nslices) matching its geometry")
        if self.thickness <= 0:
            raise ValueError("slice thickness must be positive")
        if self.poses is None:
            self.poses = [RigidTransform() for _ in range(self.n_slices)]
        if len(self.poses) != self.n_slices:
            raise ValueError("one pose per slice required")

    @property
    def n_slices(self) -> int:
        return self.data.shape[2]

    @property
    def slice_shape(self) -> Tuple[int, int]:
        return self.data.shape[:2]

    @property
    def in_plane_spacing(self) -> Tuple[float, float]:
        return self.geometry.spacing[:2]

    @property
    def normal(self) -> np.ndarray:
        return self.geometry.axes[:, 2]

    def slice(self, k: int) -> np.ndarray:
        return self.data[:, :, k]

    def pixel_world(self, k: int, ij: np.ndarray) -> np.ndarray:
        """Scanner-frame world position (before the slice pose) of pixel indices ``(N, 2)``."""
        ij = np.asarray(ij, dtype=float)
        idx = np.column_stack([ij, np.full(len(ij), float(k))])
        return self.geometry.world(idx)

    def as_volume(self) -> Volume:
        return Volume(self.data, self.geometry)

    def with_data(self, data: np.ndarray) -> "Stack":
        return replace(self, data=np.asarray(data, dtype=np.float64), poses=list(self.poses))

    def with_poses(self, poses) -> "Stack":
        return replace(self, poses=list(poses))
