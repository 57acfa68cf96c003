"""Image quality metrics between acquired slices and slices simulated from a reconstruction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .patches import Patch, window_starts
from .register import UndefinedSimilarity, cc_similarity
from .superres import PatchBatch, forward
from .volgrid import Stack, Volume

log = logging.getLogger(__name__)

K1, K2 = 0.01, 0.03
WINDOW, STRIDE = 8, 4


class EmptyReport(ValueError):
    """No pixel survived the evaluation mask."""


def _pair(I, J):
    I = np.asarray(I, dtype=float)
    J = np.asarray(J, dtype=float)
    if I.shape != J.shape:
        raise ValueError(f"image dims differ: {I.shape} vs {J.shape}")
    return I, J


def psnr(I, J) -> float:
    """``10 log10(max(I)^2 / MSE)`` with ``I`` the original; ``inf`` when the images agree."""
    I, J = _pair(I, J)
    if not np.any(I):
        raise ValueError("original image is all zero")
    mse = float(np.mean((I - J) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(float(I.max()) ** 2 / mse)


def cc_metric(I, J) -> float:
    return cc_similarity(I, J)


def dynamic_range(I) -> float:
    I = np.asarray(I, dtype=float)
    return float(I.max() - I.min())


def ssim(I, J, L: Optional[float] = None, k1: float = K1, k2: float = K2) -> float:
    """Structural similarity from whole-image statistics.

    ``L`` defaults to the dynamic range of the original ``I``.
    """
    I, J = _pair(I, J)
    L = dynamic_range(I) if L is None else float(L)
    if L <= 0:
        raise ValueError("dynamic range L must be positive")
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    mi, mj = float(I.mean()), float(J.mean())
    di, dj = I - mi, J - mj
    n = I.size
    vi, vj = float(np.sum(di * di)) / n, float(np.sum(dj * dj)) / n
    cov = float(np.sum(di * dj)) / n
    return ((2 * mi * mj + c1) * (2 * cov + c2)) / ((mi * mi + mj * mj + c1) * (vi + vj + c2))


def _window_grid(shape, window, stride):
    w = min(window, *shape)
    s = min(stride, w)
    return w, window_starts(shape[0], w, s), window_starts(shape[1], w, s)


def ssim_windows(I, J, L: Optional[float] = None, window: int = WINDOW, stride: int = STRIDE,
                 k1: float = K1, k2: float = K2) -> np.ndarray:
    """SSIM of every ``window x window`` block at the given stride (blocks clamped to the edge)."""
    I, J = _pair(I, J)
    L = dynamic_range(I) if L is None else float(L)
    w, xs, ys = _window_grid(I.shape, window, stride)
    out = np.empty((len(xs), len(ys)))
    for a, x0 in enumerate(xs):
        for b, y0 in enumerate(ys):
            out[a, b] = ssim(I[x0:x0 + w, y0:y0 + w], J[x0:x0 + w, y0:y0 + w], L, k1, k2)
    return out


def ssim_windowed(I, J, L: Optional[float] = None, window: int = WINDOW, stride: int = STRIDE) -> float:
    """Mean-pooled windowed SSIM."""
    return float(np.mean(ssim_windows(I, J, L, window, stride)))


def dssim(I, J, L: Optional[float] = None) -> float:
    return (1.0 - ssim(I, J, L)) / 2.0


def dssim_map(I, J, L: Optional[float] = None, window: int = WINDOW, stride: int = STRIDE):
    """Per-pixel DSSIM heat map and the mean over windows.

    Each window value sits at its centre; pixels between centres are filled
    bilinearly and pixels beyond the outermost centres take the nearest value.
    """
    I, J = _pair(I, J)
    vals = (1.0 - ssim_windows(I, J, L, window, stride)) / 2.0
    mean = float(np.mean(vals))
    w, xs, ys = _window_grid(I.shape, window, stride)
    cx = np.asarray(xs, float) + (w - 1) / 2.0
    cy = np.asarray(ys, float) + (w - 1) / 2.0
    gx, gy = np.meshgrid(np.arange(I.shape[0], dtype=float), np.arange(I.shape[1], dtype=float), indexing="ij")
    if len(cx) == 1 and len(cy) == 1:
        heat = np.full(I.shape, vals[0, 0])
    else:
        # duplicate a lone centre so the interpolator has two nodes per axis
        if len(cx) == 1:
            cx, vals = np.array([cx[0], cx[0] + 1.0]), np.vstack([vals, vals])
        if len(cy) == 1:
            cy, vals = np.array([cy[0], cy[0] + 1.0]), np.hstack([vals, vals])
        interp = RegularGridInterpolator((cx, cy), vals, method="linear")
        pts = np.column_stack([np.clip(gx.ravel(), cx[0], cx[-1]), np.clip(gy.ravel(), cy[0], cy[-1])])
        heat = interp(pts).reshape(I.shape)
    return heat, mean


@dataclass
class SliceMetrics:
    stack: int
    slice: int
    region: str
    cc: float
    psnr: float
    ssim: float
    dssim: float
    n_pixels: int

    @property
    def slice_id(self) -> str:
        return f"{self.stack}:{self.slice}"


@dataclass
class MetricReport:
    """Per-slice metrics, their averages and per-stack DSSIM heat maps."""

    rows: List[SliceMetrics]
    region: str = "whole"
    heatmaps: Dict[int, Volume] = field(default_factory=dict)
    simulated: Dict[int, np.ndarray] = field(default_factory=dict)

    def mean(self, name: str) -> float:
        v = np.array([getattr(r, name) for r in self.rows], dtype=float)
        v = v[np.isfinite(v)]
        return float(v.mean()) if v.size else math.nan

    @property
    def summary(self) -> Dict[str, float]:
        return {k: self.mean(k) for k in ("cc", "psnr", "ssim", "dssim")}


def simulate_slices(stacks: Sequence[Stack], recon: Volume, patches: Sequence[Patch], psf_support: float = 2.0,
                    eps: float = 1e-6, batch: Optional[PatchBatch] = None) -> Dict[int, np.ndarray]:
    """Simulated stacks: every pixel averages the simulations of the patches whose core covers it.

    Pixels no core covers, or whose simulation is undefined, are NaN.
    """
    batch = PatchBatch.build(patches, stacks, psf_support, eps) if batch is None else batch
    sim, _ = forward(recon, batch, use=batch.core)
    acc = {s: np.zeros(st.data.shape) for s, st in enumerate(stacks)}
    cnt = {s: np.zeros(st.data.shape) for s, st in enumerate(stacks)}
    for m, p in enumerate(patches):
        sl = batch.span(m)
        v = sim[sl]
        keep = p.core & np.isfinite(v)
        px = p.pixels[keep]
        np.add.at(acc[p.stack_id], (px[:, 0], px[:, 1], np.full(len(px), p.slice_index)), v[keep])
        np.add.at(cnt[p.stack_id], (px[:, 0], px[:, 1], np.full(len(px), p.slice_index)), 1.0)
    out = {}
    for s in acc:
        with np.errstate(invalid="ignore", divide="ignore"):
            out[s] = np.where(cnt[s] > 0, acc[s] / np.maximum(cnt[s], 1), np.nan)
    return out


def evaluate_reconstruction(stacks: Sequence[Stack], recon: Volume, patches: Sequence[Patch],
                            masks: Optional[Sequence[np.ndarray]] = None, region: str = "whole",
                            psf_support: float = 2.0, eps: float = 1e-6, window: int = WINDOW,
                            stride: int = STRIDE, batch: Optional[PatchBatch] = None) -> MetricReport:
    """Compare every acquired slice with its simulation from ``recon`` at the final patch poses.

    Scalar metrics use the pixels that are simulated and inside ``masks``; the
    heat map covers the full slice with unsimulated pixels set to the original.
    Slices with fewer than two pixels, a constant original or an all-zero
    original are skipped.
    """
    sims = simulate_slices(stacks, recon, patches, psf_support, eps, batch)
    rows = []
    heat = {}
    total = 0
    for s, st in enumerate(stacks):
        hm = np.zeros(st.data.shape)
        for k in range(st.n_slices):
            I = st.data[:, :, k]
            J = sims[s][:, :, k]
            keep = np.isfinite(J)
            if masks is not None:
                keep &= np.asarray(masks[s][:, :, k], dtype=bool)
            total += int(keep.sum())
            if keep.sum() < 2:
                continue
            a, b = I[keep], J[keep]
            L = dynamic_range(a)
            if L <= 0 or not np.any(a):
                continue
            try:
                cc = cc_similarity(a, b)
            except UndefinedSimilarity:
                cc = math.nan
            filled = np.where(keep, J, I)
            hm[:, :, k], dmean = dssim_map(I, filled, L, window, stride)
            rows.append(SliceMetrics(s, k, region, cc, psnr(a, b), ssim(a, b, L), dmean, int(keep.sum())))
        heat[s] = Volume(hm, st.geometry)
    if total == 0 or not rows:
        raise EmptyReport("no pixels to evaluate")
    return MetricReport(rows, region, heat, sims)
