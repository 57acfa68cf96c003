"""Rigid registration by cross correlation: stacks to a volume and patches to the reconstruction."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import _kernels as K
from .patches import Patch
from .superres import PatchBatch
from .volgrid import RigidTransform, Stack, Volume

log = logging.getLogger(__name__)

MIN_VALID = K.MIN_VALID
MIN_OVERLAP = 0.10
FLAG_OK, FLAG_FEW_PIXELS, FLAG_ZERO_VARIANCE = 0, 1, 2


class RegistrationError(RuntimeError):
    """Stack registration impossible (e.g. insufficient field-of-view overlap)."""


class UndefinedSimilarity(ValueError):
    """Correlation undefined: too few samples or a constant side."""


@dataclass(frozen=True)
class RegistrationConfig:
    """Gradient ascent on CC with step halving, coarse to fine.

    ``levels`` are Gaussian blur sigmas (recon voxels) applied to the target,
    coarsest first. Steps halve from one level to the next and inside a level
    whenever an iteration finds no improvement; a level ends after ``max_iter``
    accepted moves or once both steps shrink below ``min_frac`` of their
    level start.

    With ``slice_profile`` the target is first blurred along each patch's
    slice normal by its through-plane profile, so patches are compared with
    the volume as the acquisition would have seen it.
    """

    levels: Tuple[float, ...] = (2.0, 1.0, 0.0)
    max_iter: int = 20
    rot_step: float = 4.0
    trans_step: float = 2.0
    epsilon: float = 1e-9
    min_frac: float = 1.0 / 32.0
    slice_profile: bool = True

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("at least one registration level required")
        if self.rot_step <= 0 or self.trans_step <= 0 or self.epsilon <= 0:
            raise ValueError("steps and epsilon must be positive")
        if self.max_iter < 1 or not 0 < self.min_frac <= 1:
            raise ValueError("max_iter >= 1 and 0 < min_frac <= 1 required")
        object.__setattr__(self, "levels", tuple(float(s) for s in self.levels))

    @classmethod
    def with_levels(cls, n: int, **kw) -> "RegistrationConfig":
        """``n`` levels with blur sigmas ``2^(n-2), ..., 1, 0``."""
        if n < 1:
            raise ValueError("at least one registration level required")
        return cls(levels=tuple([2.0 ** (n - 2 - l) for l in range(n - 1)] + [0.0]), **kw)

    def steps(self) -> Tuple[np.ndarray, np.ndarray]:
        scale = 0.5 ** np.arange(len(self.levels))
        return self.rot_step * scale, self.trans_step * scale


def cc_similarity(fixed, moving, mask=None) -> float:
    """Pearson correlation over the masked samples; symmetric in its arguments."""
    a = np.asarray(fixed, dtype=float).ravel()
    b = np.asarray(moving, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("sample arrays differ in size")
    keep = np.isfinite(a) & np.isfinite(b)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool).ravel()
    a, b = a[keep], b[keep]
    if len(a) < 2:
        raise UndefinedSimilarity("fewer than two samples")
    da = a - a.mean()
    db = b - b.mean()
    va = np.dot(da, da)
    vb = np.dot(db, db)
    if va <= 0 or vb <= 0:
        raise UndefinedSimilarity("zero variance")
    return float(np.clip(np.dot(da, db) / np.sqrt(va * vb), -1.0, 1.0))


def blur_levels(recon: Volume, sigmas: Sequence[float]) -> np.ndarray:
    """Stack of blurred copies of ``recon`` (L, nx, ny, nz), one per sigma in voxels."""
    out = np.empty((len(sigmas),) + recon.dims)
    for i, s in enumerate(sigmas):
        out[i] = ndimage.gaussian_filter(recon.data, s, mode="nearest") if s > 0 else recon.data
    return out


def profile_blur(recon: Volume, normal, sigma_mm: float) -> np.ndarray:
    """``recon`` convolved with a 1D Gaussian of ``sigma_mm`` along the world direction ``normal``.

    Grid-aligned directions use a separable filter; oblique ones sum
    trilinearly shifted copies at half-voxel steps out to 3 sigma.
    """
    g = recon.geometry
    d = (g.axes.T @ np.asarray(normal, dtype=float)) / np.asarray(g.spacing)  # voxels per mm
    d_len = float(np.linalg.norm(d))
    if sigma_mm <= 0 or d_len == 0:
        return recon.data.copy()
    big = int(np.argmax(np.abs(d)))
    if np.all(np.abs(np.delete(d, big)) <= 1e-9 * abs(d[big])):
        return ndimage.gaussian_filter1d(recon.data, sigma_mm * abs(d[big]), axis=big, mode="nearest")
    step = 0.5 / d_len  # mm per half voxel along the normal
    t = np.arange(-np.ceil(3 * sigma_mm / step), np.ceil(3 * sigma_mm / step) + 1) * step
    w = np.exp(-0.5 * (t / sigma_mm) ** 2)
    w /= w.sum()
    out = np.zeros(recon.dims)
    for tk, wk in zip(t, w):
        out += wk * ndimage.shift(recon.data, tk * d, order=1, mode="nearest")
    return out


def _profile_groups(batch: PatchBatch) -> dict:
    """Patch indices keyed by (slice normal, through-plane sigma)."""
    groups = {}
    for m in range(batch.n_patches):
        key = tuple(np.round(batch.frames[m][:, 2], 9)) + (round(float(batch.psf[m][2]), 9),)
        groups.setdefault(key, []).append(m)
    return groups


@dataclass
class RegistrationResult:
    poses: List[RigidTransform]
    cc: np.ndarray
    flags: np.ndarray
    trace: np.ndarray  # accepted CC values per patch, NaN padded

    @property
    def registrable(self) -> np.ndarray:
        return self.flags == FLAG_OK


def _register_arrays(levels, inv, pos, vals, ptr, poses, frames, centroids, cfg, trace_len):
    M = len(ptr) - 1
    out_poses = np.empty((M, 3, 4))
    out_cc = np.empty(M)
    out_flag = np.empty(M, dtype=np.int64)
    trace = np.empty((M, max(trace_len, 1)))
    rs, ts = cfg.steps()
    K.register(levels, inv, pos, vals, ptr, poses, frames, centroids, rs, ts, int(cfg.max_iter),
               float(cfg.min_frac), float(cfg.epsilon), out_poses, out_cc, out_flag, trace)
    return out_poses, out_cc, out_flag, trace[:, :trace_len]


def _to_rigid(P34: np.ndarray) -> RigidTransform:
    M = np.eye(4)
    M[:3] = P34
    return RigidTransform.from_matrix(M)


def register_batch(batch: PatchBatch, recon: Volume, cfg: RegistrationConfig = RegistrationConfig(),
                   trace_len: int = 0) -> RegistrationResult:
    """Register every patch of ``batch`` to ``recon`` independently (in parallel)."""
    inv = np.ascontiguousarray(recon.geometry.inverse_affine[:3])
    if not cfg.slice_profile:
        P, cc, flags, trace = _register_arrays(blur_levels(recon, cfg.levels), inv, batch.pos, batch.vals,
                                               batch.ptr, batch.poses, batch.frames, batch.centroids, cfg,
                                               trace_len)
        return RegistrationResult([_to_rigid(p) for p in P], cc, flags, trace)
    M = batch.n_patches
    P = np.empty((M, 3, 4))
    cc = np.empty(M)
    flags = np.empty(M, dtype=np.int64)
    trace = np.empty((M, trace_len))
    for key, ms in _profile_groups(batch).items():
        ms = np.asarray(ms)
        target = recon.copy(profile_blur(recon, key[:3], key[3]))
        spans = [np.arange(batch.ptr[m], batch.ptr[m + 1]) for m in ms]
        pix = np.concatenate(spans)
        ptr = np.concatenate([[0], np.cumsum([len(s) for s in spans])]).astype(np.int64)
        res = _register_arrays(blur_levels(target, cfg.levels), inv, np.ascontiguousarray(batch.pos[pix]),
                               batch.vals[pix], ptr, batch.poses[ms], batch.frames[ms], batch.centroids[ms], cfg,
                               trace_len)
        P[ms], cc[ms], flags[ms], trace[ms] = res
    return RegistrationResult([_to_rigid(p) for p in P], cc, flags, trace)


def register_patches(patches: Sequence[Patch], stacks: Sequence[Stack], recon: Volume,
                     cfg: RegistrationConfig = RegistrationConfig(), trace_len: int = 0) -> RegistrationResult:
    return register_batch(PatchBatch.build(patches, stacks), recon, cfg, trace_len)


def register_patch_to_volume(patch: Patch, recon: Volume, stacks: Sequence[Stack],
                             cfg: RegistrationConfig = RegistrationConfig()) -> Tuple[RigidTransform, float, int]:
    """Pose maximising CC over the dilated pixels, starting from ``patch.pose``.

    Returns ``(pose, cc, flag)``; a nonzero flag leaves the pose unchanged.
    """
    res = register_patches([patch], stacks, recon, cfg)
    return res.poses[0], float(res.cc[0]), int(res.flags[0])


def stack_overlap(stack: Stack, target: Volume, t: Optional[RigidTransform] = None) -> float:
    """Fraction of stack voxel centres that land inside the target's voxel-centre box."""
    pts = stack.geometry.grid_world().reshape(-1, 3)
    if t is not None:
        pts = t.apply(pts)
    idx = target.geometry.index(pts)
    inside = np.all((idx >= -1e-9) & (idx <= np.asarray(target.dims) - 1 + 1e-9), axis=1)
    return float(inside.mean())


def register_stack_to_volume(stack: Stack, target: Volume, cfg: RegistrationConfig = RegistrationConfig(),
                             start: Optional[RigidTransform] = None) -> RigidTransform:
    """Rigid transform mapping stack voxels onto ``target`` with maximal CC.

    Rotations act about the stack centre, steps along the stack axes.
    """
    start = start or RigidTransform()
    if stack_overlap(stack, target, start) < MIN_OVERLAP:
        raise RegistrationError(f"stack {stack.name!r} overlaps the target by less than {MIN_OVERLAP:.0%}")
    pos = np.ascontiguousarray(stack.geometry.grid_world().reshape(-1, 3))
    vals = stack.data.ravel().astype(float)
    ptr = np.array([0, len(vals)], dtype=np.int64)
    levels = blur_levels(target, cfg.levels)
    inv = np.ascontiguousarray(target.geometry.inverse_affine[:3])
    P, cc, flags, _ = _register_arrays(levels, inv, pos, vals, ptr, start.matrix()[None, :3],
                                       stack.geometry.axes[None], stack.geometry.center()[None], cfg, 0)
    if flags[0] != FLAG_OK:
        raise RegistrationError("stack registration failed: similarity undefined on the overlap")
    log.debug("stack %s registered, CC %.4f", stack.name, cc[0])
    return _to_rigid(P[0])


def patch_increment(x, centroid, frame) -> np.ndarray:
    """4x4 increment used by the optimiser: rotate ``x[:3]`` degrees about ``centroid``
    in the slice frame, then translate ``x[3:]`` mm along the slice axes."""
    F = np.asarray(frame, dtype=float)
    Rl = RigidTransform(tuple(x[:3])).rotation_matrix()
    D = np.eye(4)
    D[:3, :3] = F @ Rl @ F.T
    g = np.asarray(centroid, dtype=float)
    D[:3, 3] = g - D[:3, :3] @ g + F @ np.asarray(x[3:], dtype=float)
    return D


def displace(pose: RigidTransform, x, centroid, frame) -> RigidTransform:
    """``pose`` followed (on the slice side) by the increment ``x``."""
    return RigidTransform.from_matrix(pose.matrix() @ patch_increment(x, centroid, frame))


def pose_error(reference: RigidTransform, pose: RigidTransform, centroid) -> Tuple[float, float]:
    """(rotation angle in degrees, centroid displacement in mm) between two patch poses."""
    M = np.linalg.inv(reference.matrix()) @ pose.matrix()
    c = np.clip((np.trace(M[:3, :3]) - 1.0) / 2.0, -1.0, 1.0)
    g = np.asarray(centroid, dtype=float)
    return float(np.degrees(np.arccos(c))), float(np.linalg.norm(M[:3, :3] @ g + M[:3, 3] - g))
