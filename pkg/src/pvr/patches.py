"""Decomposition of slices into square patches or dilated SLIC superpixels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volgrid import RigidTransform

MIN_SCALED_SIZE = 8
_EIGHT = np.ones((3, 3), dtype=bool)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class Patch:
    """A 2D pixel subset of one slice plus the registration/EM state attached to it.

    ``pixels`` lists the dilated set in row-major order; ``core`` flags the
    undilated members.
    """

    stack_id: int
    slice_index: int
    slice_shape: Tuple[int, int]
    pixels: np.ndarray
    core: np.ndarray
    dilation: int = 0
    size: int = 0
    scale_index: int = 0
    pose: RigidTransform = field(default_factory=RigidTransform)
    weights: Optional[np.ndarray] = None
    score: float = 1.0
    inlier: bool = True
    registrable: bool = True

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        self.core = np.asarray(self.core, dtype=bool)
        if len(self.pixels) == 0:
            raise ValueError("empty patch")
        if len(self.core) != len(self.pixels):
            raise ValueError("core flags must match pixel list")
        nx, ny = self.slice_shape
        if (self.pixels.min(axis=0) < 0).any() or self.pixels[:, 0].max() >= nx or self.pixels[:, 1].max() >= ny:
            raise ValueError("patch pixels out of slice bounds")
        if self.weights is None:
            self.weights = np.ones(len(self.pixels))

    @property
    def n_pixels(self) -> int:
        return len(self.pixels)

    @property
    def bbox(self) -> Tuple[int, int, int, int]:
        lo = self.pixels.min(axis=0)
        hi = self.pixels.max(axis=0) + 1
        return int(lo[0]), int(hi[0]), int(lo[1]), int(hi[1])

    def core_mask(self) -> np.ndarray:
        m = np.zeros(self.slice_shape, dtype=bool)
        c = self.pixels[self.core]
        m[c[:, 0], c[:, 1]] = True
        return m

    def dilated_mask(self) -> np.ndarray:
        m = np.zeros(self.slice_shape, dtype=bool)
        m[self.pixels[:, 0], self.pixels[:, 1]] = True
        return m


def _patch_from_masks(core: np.ndarray, dilated: np.ndarray, **kw) -> Patch:
    pixels = np.argwhere(dilated)
    return Patch(pixels=pixels, core=core[pixels[:, 0], pixels[:, 1]], slice_shape=core.shape, **kw)


def dilate(mask: np.ndarray, gamma: int) -> np.ndarray:
    """Grow ``mask`` by ``gamma`` pixels with repeated 8-connected dilation, clipped to the slice."""
    if gamma <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=_EIGHT, iterations=int(gamma))


def window_starts(dim: int, a: int, omega: int) -> List[int]:
    """Window origins at stride ``omega``, plus a final window clamped to the edge."""
    if a > dim:
        raise ValueError(f"patch size {a} exceeds slice dimension {dim}")
    if omega < 1 or omega > a:
        raise ValueError("stride must satisfy 1 <= omega <= a")
    starts = list(range(0, dim - a + 1, omega))
    if starts[-1] != dim - a:
        starts.append(dim - a)
    return starts


def extract_square(slice_img, a: int, omega: int, gamma: int = 0, *, stack_id=0, slice_index=0,
                   pose=None, mask=None, scale_index=0) -> List[Patch]:
    """Overlapping ``a x a`` windows at stride ``omega``, each grown by ``gamma`` pixels."""
    shape = np.shape(slice_img)[:2]
    nx, ny = shape
    pose = pose or RigidTransform()
    out = []
    for x0 in window_starts(nx, a, omega):
        for y0 in window_starts(ny, a, omega):
            if mask is not None and not mask[x0:x0 + a, y0:y0 + a].any():
                continue
            dx0, dx1 = max(0, x0 - gamma), min(nx, x0 + a + gamma)
            dy0, dy1 = max(0, y0 - gamma), min(ny, y0 + a + gamma)
            gi, gj = np.meshgrid(np.arange(dx0, dx1), np.arange(dy0, dy1), indexing="ij")
            pixels = np.column_stack([gi.ravel(), gj.ravel()])
            core = ((pixels[:, 0] >= x0) & (pixels[:, 0] < x0 + a)
                    & (pixels[:, 1] >= y0) & (pixels[:, 1] < y0 + a))
            out.append(Patch(stack_id, slice_index, shape, pixels, core, dilation=gamma, size=a,
                             scale_index=scale_index, pose=pose))
    return out


def whole_slice(slice_img, *, stack_id=0, slice_index=0, pose=None, mask=None) -> List[Patch]:
    """One patch holding every pixel (slice-to-volume mode)."""
    shape = np.shape(slice_img)[:2]
    if mask is not None and not mask.any():
        return []
    full = np.ones(shape, dtype=bool)
    return [_patch_from_masks(full, full, stack_id=stack_id, slice_index=slice_index,
                              size=max(shape), pose=pose or RigidTransform())]


# --- SLIC ---------------------------------------------------------------

@dataclass
class SlicResult:
    labels: np.ndarray
    centers: np.ndarray  # (K, 3): x, y, intensity
    cost: List[float]  # sum of D over pixels after each assignment
    cost_sq: List[float]  # sum of D^2
    iterations: int


def _seed_grid(nx, ny, a):
    cx = [(k * a + min((k + 1) * a, nx) - 1) / 2.0 for k in range(math.ceil(nx / a))]
    cy = [(k * a + min((k + 1) * a, ny) - 1) / 2.0 for k in range(math.ceil(ny / a))]
    return np.array([(x, y) for x in cx for y in cy], dtype=float)


def slic(img, a: int, t: float, max_iter: int = 10, tol: float = 0.5) -> SlicResult:
    """Grey-level SLIC minimising ``D = sqrt(d_c^2 + (d_s / a)^2 t^2)``.

    Each centre searches a ``2a x 2a`` window; pixels no window reaches fall
    back to the globally nearest centre.
    """
    img = np.asarray(img, dtype=float)
    nx, ny = img.shape
    seeds = _seed_grid(nx, ny, a)
    xi = np.clip(np.round(seeds[:, 0]).astype(int), 0, nx - 1)
    yi = np.clip(np.round(seeds[:, 1]).astype(int), 0, ny - 1)
    centers = np.column_stack([seeds, img[xi, yi]])
    gx, gy = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float), indexing="ij")
    wt = (t / a) ** 2
    cost, cost_sq = [], []
    labels = np.full((nx, ny), -1, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        best = np.full((nx, ny), np.inf)
        labels[:] = -1
        for k, (cx, cy, ci) in enumerate(centers):
            x0, x1 = max(0, int(math.floor(cx - a))), min(nx, int(math.ceil(cx + a)) + 1)
            y0, y1 = max(0, int(math.floor(cy - a))), min(ny, int(math.ceil(cy + a)) + 1)
            if x0 >= x1 or y0 >= y1:
                continue
            d2 = ((img[x0:x1, y0:y1] - ci) ** 2
                  + wt * ((gx[x0:x1, y0:y1] - cx) ** 2 + (gy[x0:x1, y0:y1] - cy) ** 2))
            sub = best[x0:x1, y0:y1]
            upd = d2 < sub
            sub[upd] = d2[upd]
            labels[x0:x1, y0:y1][upd] = k
        lost = labels < 0
        if lost.any():
            px, py = gx[lost], gy[lost]
            d2 = ((img[lost][:, None] - centers[None, :, 2]) ** 2
                  + wt * ((px[:, None] - centers[None, :, 0]) ** 2 + (py[:, None] - centers[None, :, 1]) ** 2))
            labels[lost] = np.argmin(d2, axis=1)
            best[lost] = d2.min(axis=1)
        cost.append(float(np.sqrt(best).sum()))
        cost_sq.append(float(best.sum()))
        flat = labels.ravel()
        K = len(centers)
        cnt = np.bincount(flat, minlength=K).astype(float)
        live = cnt > 0
        new = centers.copy()
        for col, src in enumerate((gx, gy, img)):
            sums = np.bincount(flat, weights=src.ravel(), minlength=K)
            new[live, col] = sums[live] / cnt[live]
        shift = np.max(np.hypot(new[:, 0] - centers[:, 0], new[:, 1] - centers[:, 1]))
        centers = new
        if shift < tol:
            break
    return SlicResult(labels, centers, cost, cost_sq, it)


def enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Relabel into connected clusters; fragments smaller than ``min_size`` join
    the largest adjacent cluster."""
    out = np.full(labels.shape, -1, dtype=np.int64)
    next_label = 0
    sizes = {}
    for lab in np.unique(labels):
        comp, n = ndimage.label(labels == lab, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
        for c in range(1, n + 1):
            m = comp == c
            out[m] = next_label
            sizes[next_label] = int(m.sum())
            next_label += 1
    changed = True
    while changed and len(sizes) > 1:
        changed = False
        for lab in sorted(sizes, key=lambda k: (sizes[k], k)):
            if sizes[lab] >= min_size:
                break
            m = out == lab
            ring = ndimage.binary_dilation(m, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])) & ~m
            neigh = np.unique(out[ring])
            neigh = neigh[neigh != lab]
            if len(neigh) == 0:
                continue
            target = max(neigh, key=lambda k: (sizes[k], -k))
            out[m] = target
            sizes[target] += sizes.pop(lab)
            changed = True
            break
    # compact label ids in first-occurrence order
    _, first = np.unique(out.ravel(), return_index=True)
    order = out.ravel()[np.sort(first)]
    lut = np.zeros(out.max() + 1, dtype=np.int64)
    lut[order] = np.arange(len(order))
    return lut[out]


def superpixel_labels(slice_img, a: int, t: float, max_iter: int = 10) -> np.ndarray:
    res = slic(slice_img, a, t, max_iter=max_iter)
    return enforce_connectivity(res.labels, max(1, (a * a) // 4))


def extract_superpixels(slice_img, a: int, t: float, gamma: int = 0, *, stack_id=0, slice_index=0,
                        pose=None, mask=None, scale_index=0) -> List[Patch]:
    """SLIC clusters of ``slice_img`` as patches, each dilated by ``gamma`` pixels."""
    shape = np.shape(slice_img)[:2]
    if a > min(shape):
        raise ValueError(f"superpixel size {a} exceeds slice dimension {min(shape)}")
    labels = superpixel_labels(slice_img, a, t)
    pose = pose or RigidTransform()
    out = []
    for lab in range(labels.max() + 1):
        core = labels == lab
        if not core.any() or (mask is not None and not (core & mask).any()):
            continue
        out.append(_patch_from_masks(core, dilate(core, gamma), stack_id=stack_id, slice_index=slice_index,
                                     dilation=gamma, size=a, scale_index=scale_index, pose=pose))
    return out


# --- plans ----------------------------------------------------------------

@dataclass
class PatchPlan:
    """Patch decomposition parameters.

    ``dilation`` is in pixels, or a percentage of the current size ``a`` when
    ``dilation_percent`` is set. ``compactness`` is in intensity units.
    ``shape='slice'`` yields one patch per slice.
    """

    shape: str = "square"
    a: int = 32
    omega: int = 16
    dilation: float = 60.0
    dilation_percent: bool = True
    compactness: float = 0.1
    schedule: str = "fixed"
    scales: Tuple[float, ...] = (1.0, 0.75, 0.5625)

    def __post_init__(self):
        if self.shape not in ("square", "superpixel", "slice"):
            raise ValueError(f"unknown patch shape {self.shape!r}")
        if self.schedule not in ("fixed", "multiscale"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.shape == "square" and not 1 <= self.omega <= self.a:
            raise ValueError("square patches need 1 <= omega <= a")
        if self.schedule == "multiscale" and not all(0 < s <= 1 for s in self.scales):
            raise ValueError("multiscale factors must lie in (0, 1]")
        self.scales = tuple(float(s) for s in self.scales)

    @staticmethod
    def geometric_scales(n: int, factor: float = 0.75) -> Tuple[float, ...]:
        return tuple(factor ** i for i in range(n))

    def size_at(self, iteration: int) -> int:
        if self.schedule == "fixed":
            return self.a
        if iteration >= len(self.scales):
            raise ValueError(f"iteration {iteration} beyond multiscale schedule of {len(self.scales)}")
        return max(MIN_SCALED_SIZE, round_half_up(self.scales[iteration] * self.a))

    def stride_at(self, iteration: int) -> int:
        a_i = self.size_at(iteration)
        return max(1, min(a_i, round_half_up(self.omega * a_i / self.a)))

    def dilation_at(self, iteration: int) -> int:
        if self.dilation_percent:
            return round_half_up(self.dilation / 100.0 * self.size_at(iteration))
        return int(round(self.dilation))


def extract_slice(plan: PatchPlan, slice_img, iteration: int = 0, **kw) -> List[Patch]:
    if plan.shape == "slice":
        kw.pop("scale_index", None)
        return whole_slice(slice_img, **kw)
    a = min(plan.size_at(iteration), *np.shape(slice_img)[:2])
    gamma = plan.dilation_at(iteration)
    if plan.shape == "square":
        omega = min(plan.stride_at(iteration), a)
        return extract_square(slice_img, a, omega, gamma, **kw)
    return extract_superpixels(slice_img, a, plan.compactness, gamma, **kw)


def plan_iteration(plan: PatchPlan, iteration: int, stacks, masks=None) -> List[Patch]:
    """Patches of every slice of every stack for one reconstruction iteration.

    ``masks``, when given, is one boolean array per stack (slice-index last);
    patches missing the mask entirely are dropped.
    """
    out = []
    for s, st in enumerate(stacks):
        for k in range(st.n_slices):
            m = None if masks is None else masks[s][:, :, k]
            if m is not None and not m.any():
                continue
            out.extend(extract_slice(plan, st.slice(k), iteration, stack_id=s, slice_index=k,
                                     pose=st.poses[k], mask=m, scale_index=iteration))
    return out


def overhead_report(patches: Sequence[Patch]) -> Tuple[int, float]:
    """(patch count, overhead %) where overhead counts dilated pixels beyond one per slice pixel."""
    if not patches:
        return 0, 0.0
    slices = {}
    for p in patches:
        slices[(p.stack_id, p.slice_index)] = p.slice_shape
    distinct = sum(int(np.prod(s)) for s in slices.values())
    total = sum(p.n_pixels for p in patches)
    return len(patches), 100.0 * (total - distinct) / distinct
