"""PSF forward model ``W = D B T``, its adjoint, and super-resolution updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import _kernels as K
from .patches import Patch
from .psf import PSF
from .volgrid import Geometry, RigidTransform, Stack, Volume, fill_unobserved

DETERMINISTIC_CHUNKS = 16
CONF_EPS = 1e-3


@dataclass
class PatchBatch:
    """Patches flattened into contiguous arrays for the compiled kernels."""

    pos: np.ndarray  # (P, 3) scanner-frame pixel positions
    vals: np.ndarray  # (P,) observed intensities
    core: np.ndarray  # (P,) undilated membership
    ptr: np.ndarray  # (M + 1,)
    poses: np.ndarray  # (M, 3, 4)
    frames: np.ndarray  # (M, 3, 3)
    psf: np.ndarray  # (M, 6)
    centroids: np.ndarray  # (M, 3)
    table: np.ndarray
    tstep: float

    @classmethod
    def build(cls, patches: Sequence[Patch], stacks: Sequence[Stack], psf_support: float = 2.0,
              eps: float = 1e-6) -> "PatchBatch":
        if not patches:
            raise ValueError("nothing to reconstruct: no patches")
        psfs = {}
        pos, vals, core = [], [], []
        ptr = [0]
        poses, frames, prm, cents = [], [], [], []
        for p in patches:
            st = stacks[p.stack_id]
            if p.stack_id not in psfs:
                psfs[p.stack_id] = PSF(st.in_plane_spacing, st.thickness, psf_support, eps)
            w = st.pixel_world(p.slice_index, p.pixels)
            pos.append(w)
            vals.append(st.data[p.pixels[:, 0], p.pixels[:, 1], p.slice_index])
            core.append(p.core)
            ptr.append(ptr[-1] + len(w))
            poses.append(p.pose.matrix()[:3])
            frames.append(st.geometry.axes)
            prm.append(psfs[p.stack_id].params())
            cents.append(w[p.core].mean(axis=0) if p.core.any() else w.mean(axis=0))
        first = next(iter(psfs.values()))
        return cls(np.ascontiguousarray(np.concatenate(pos)), np.concatenate(vals), np.concatenate(core),
                   np.asarray(ptr, dtype=np.int64), np.asarray(poses), np.asarray(frames), np.asarray(prm),
                   np.asarray(cents), first.table, first.table_step)

    @property
    def n_patches(self) -> int:
        return len(self.ptr) - 1

    @property
    def n_pixels(self) -> int:
        return len(self.vals)

    def span(self, m: int) -> slice:
        return slice(self.ptr[m], self.ptr[m + 1])

    def patch_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_patches), np.diff(self.ptr))

    def with_poses(self, poses) -> "PatchBatch":
        poses = np.asarray([p.matrix()[:3] if isinstance(p, RigidTransform) else p for p in poses], float)
        return replace(self, poses=np.ascontiguousarray(poses.reshape(-1, 3, 4)))


def _vol_mats(geometry: Geometry):
    return (np.ascontiguousarray(geometry.affine[:3]), np.ascontiguousarray(geometry.inverse_affine[:3]))


def chunk_bounds(batch: PatchBatch, n_chunks: int) -> np.ndarray:
    """Split patches into at most ``n_chunks`` contiguous groups of similar pixel count."""
    M = batch.n_patches
    n_chunks = max(1, min(int(n_chunks), M))
    cum = batch.ptr[1:]
    targets = np.arange(1, n_chunks) * batch.n_pixels / n_chunks
    cuts = np.searchsorted(cum, targets, side="left") + 1
    bounds = np.unique(np.concatenate([[0], np.clip(cuts, 1, M - 1) if M > 1 else [], [M]])).astype(np.int64)
    return bounds


def forward(X: Volume, batch: PatchBatch, use: Optional[np.ndarray] = None):
    """Simulated intensities ``W X`` for every pixel (NaN where unobserved) and raw kernel sums."""
    aff, inv = _vol_mats(X.geometry)
    out = np.empty(batch.n_pixels)
    wsum = np.empty(batch.n_pixels)
    use = np.ones(batch.n_pixels, dtype=bool) if use is None else np.asarray(use, dtype=bool)
    K.simulate(np.ascontiguousarray(X.data), aff, inv, batch.pos, batch.ptr, batch.poses, batch.frames,
               batch.psf, batch.table, batch.tstep, use, out, wsum)
    return out, wsum


def adjoint(geometry: Geometry, batch: PatchBatch, q: np.ndarray, scale: Optional[np.ndarray] = None,
            n_chunks: int = DETERMINISTIC_CHUNKS, absolute: bool = False):
    """``(W^T (scale * q), W^T scale)`` as volumes-shaped arrays; NaN entries of ``q`` are skipped.

    ``absolute`` swaps the second term for ``|W|^T scale``, a normaliser that
    stays positive where only negative PSF lobes reach a voxel.
    """
    q = np.asarray(q, dtype=float)
    scale = np.ones(batch.n_pixels) if scale is None else np.asarray(scale, dtype=float).copy()
    bad = ~np.isfinite(q)
    if bad.any():
        scale[bad] = 0.0
        q = np.where(bad, 0.0, q)
    aff, inv = _vol_mats(geometry)
    bounds = chunk_bounds(batch, n_chunks)
    C = len(bounds) - 1
    nvox = int(np.prod(geometry.dims))
    acc = np.zeros((C, nvox))
    conf = np.zeros((C, nvox))
    K.scatter(np.asarray(geometry.dims, dtype=np.int64), aff, inv, batch.pos, batch.ptr, batch.poses,
              batch.frames, batch.psf, batch.table, batch.tstep, q, scale, bounds, acc, conf, absolute)
    total, ctotal = acc[0].copy(), conf[0].copy()
    for c in range(1, C):
        total += acc[c]
        ctotal += conf[c]
    return total.reshape(geometry.dims), ctotal.reshape(geometry.dims)


def single_batch(patch: Patch, stacks, psf_support=2.0, eps=1e-6) -> PatchBatch:
    return PatchBatch.build([patch], stacks, psf_support, eps)


def simulate_patch(recon: Volume, patch: Patch, stacks, psf_support: float = 2.0, eps: float = 1e-6):
    """Simulated intensities over the patch's dilated pixels at its current pose (NaN = unobserved)."""
    return forward(recon, single_batch(patch, stacks, psf_support, eps))[0]


@dataclass
class ReconState:
    recon: Volume
    confidence: np.ndarray
    iteration: int = 0
    alpha: float = 0.9
    lam: float = 0.01

    @property
    def observed(self) -> np.ndarray:
        return observed_mask(self.confidence)


def observed_mask(conf: np.ndarray) -> np.ndarray:
    cmax = conf.max() if conf.size else 0.0
    return conf > CONF_EPS * cmax if cmax > 0 else np.zeros(conf.shape, dtype=bool)


def scatter_patch(state: ReconState, patch: Patch, stacks, residual, posteriors=None, score=None,
                  psf_support: float = 2.0, eps: float = 1e-6) -> ReconState:
    """Fold one patch's residual into the volume, weighted by posterior x patch score.

    Each touched voxel moves by the weighted mean of the residuals reaching it;
    the same weights accumulate into the confidence map.
    """
    p = np.ones(patch.n_pixels) if posteriors is None else np.asarray(posteriors, float)
    pbar = patch.score if score is None else score
    batch = single_batch(patch, stacks, psf_support, eps)
    num, den = adjoint(state.recon.geometry, batch, residual, p * pbar * patch.core, n_chunks=1,
                       absolute=True)
    data = state.recon.data.copy()
    hit = den > 0
    data[hit] += num[hit] / den[hit]
    return replace(state, recon=state.recon.copy(data), confidence=state.confidence + den)


def laplacian(X: np.ndarray) -> np.ndarray:
    return ndimage.laplace(X, mode="nearest")


def data_gradient(X: Volume, batch: PatchBatch, y: np.ndarray, scale: np.ndarray,
                  n_chunks: int = DETERMINISTIC_CHUNKS) -> np.ndarray:
    """Gradient of ``0.5 * sum scale * (y - W X)^2`` with respect to the voxels of ``X``."""
    sim, _ = forward(X, batch, use=scale != 0)
    g, _ = adjoint(X.geometry, batch, y - sim, scale, n_chunks)
    return -g


def sr_iteration(state: ReconState, batch: PatchBatch, scale: np.ndarray, alpha: Optional[float] = None,
                 lam: Optional[float] = None, n_chunks: int = DETERMINISTIC_CHUNKS,
                 confidence: Optional[np.ndarray] = None) -> ReconState:
    """One confidence-normalised gradient step on the data term plus Laplacian smoothing."""
    alpha = state.alpha if alpha is None else alpha
    lam = state.lam if lam is None else lam
    if alpha == 0:
        return replace(state, iteration=state.iteration + 1)
    X = state.recon
    sim, _ = forward(X, batch, use=scale != 0)
    num, conf = adjoint(X.geometry, batch, batch.vals - sim, scale, n_chunks, absolute=True)
    if confidence is not None:
        conf = confidence
    obs = observed_mask(conf)
    data = X.data.copy()
    data[obs] += alpha * num[obs] / conf[obs]
    if lam:
        data += alpha * lam * laplacian(X.data)
    data = fill_unobserved(data, obs)
    return replace(state, recon=state.recon.copy(data), confidence=conf, iteration=state.iteration + 1,
                   alpha=alpha, lam=lam)


def recon_geometry(stacks: Sequence[Stack], spacing: float, axes: Optional[np.ndarray] = None,
                   mask: Optional[Volume] = None, margin: Optional[float] = None) -> Geometry:
    """Isotropic grid aligned with ``axes`` covering every posed slice pixel (or the mask's support).

    ``margin`` (mm, default 1.5 x the thickest slice) pads the box so PSF
    kernels of border pixels stay inside the grid.
    """
    if spacing <= 0:
        raise ValueError("target spacing must be positive")
    axes = stacks[0].geometry.axes if axes is None else np.asarray(axes, float)
    if mask is not None:
        idx = np.argwhere(mask.data > 0.5)
        if len(idx) == 0:
            raise ValueError("mask is empty")
        pts = mask.geometry.world(idx)
    else:
        pts = []
        for st in stacks:
            nx, ny = st.slice_shape
            corners = np.array([[0, 0], [nx - 1, 0], [0, ny - 1], [nx - 1, ny - 1]], float)
            for k in range(st.n_slices):
                pts.append(st.poses[k].apply(st.pixel_world(k, corners)))
        pts = np.concatenate(pts)
    if margin is None:
        margin = 1.5 * max(st.thickness for st in stacks)
    local = pts @ axes
    lo, hi = local.min(axis=0) - margin, local.max(axis=0) + margin
    dims = tuple(int(math.floor((h - l) / spacing + 1e-6)) + 1 for l, h in zip(lo, hi))
    extent = (np.asarray(dims) - 1) * spacing
    lo = (lo + hi) / 2 - extent / 2
    return Geometry(dims, (spacing,) * 3, tuple(axes @ lo), axes)


def initialize_recon(geometry: Geometry, batch: PatchBatch, scale: Optional[np.ndarray] = None,
                     alpha: float = 0.9, lam: float = 0.01, n_chunks: int = DETERMINISTIC_CHUNKS) -> ReconState:
    """PSF-weighted average of all observations at their current poses; holes get neighbour means."""
    if batch.n_patches == 0:
        raise ValueError("nothing to reconstruct")
    scale = batch.core.astype(float) if scale is None else scale
    num, conf = adjoint(geometry, batch, batch.vals, scale, n_chunks)
    _, aconf = adjoint(geometry, batch, np.zeros(batch.n_pixels), scale, n_chunks, absolute=True)
    # voxels reached mostly through negative lobes are left to the neighbour fill
    obs = observed_mask(aconf) & (conf > 0.5 * aconf)
    data = np.zeros(geometry.dims)
    data[obs] = num[obs] / conf[obs]
    data = fill_unobserved(data, obs)
    return ReconState(Volume(data, geometry), aconf, 0, alpha, lam)
