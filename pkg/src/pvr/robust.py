"""Robust statistics: Gaussian-plus-uniform mixture EM over intensity residuals,
patch scores and the rigidity map."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .superres import DETERMINISTIC_CHUNKS, PatchBatch, adjoint, observed_mask
from .volgrid import Geometry, Volume

log = logging.getLogger(__name__)

ZERO_SPREAD_DENSITY = 1e12
SIGMA2_FLOOR = 1e-6
DEFAULT_THRESHOLD = 0.5


def uniform_density(e) -> float:
    """Outlier density ``1 / (max e - min e)``; a large sentinel when all residuals agree."""
    e = np.asarray(e, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("no residuals")
    spread = float(e.max() - e.min())
    return 1.0 / spread if spread > 0 else ZERO_SPREAD_DENSITY


def gaussian(e, sigma: float):
    return np.exp(-0.5 * (np.asarray(e, dtype=float) / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))


def pixel_posterior(e, sigma: float, c: float, m: float):
    """Inlier posterior ``G c / (G c + m (1 - c))``; 0 where the denominator vanishes."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    num = gaussian(e, sigma) * c
    den = num + m * (1.0 - c)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(p) if np.ndim(p) == 0 else p


def patch_score(p) -> float:
    """Root mean square of the pixel posteriors of one patch."""
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        raise ValueError("empty patch")
    return float(np.sqrt(np.sum(p * p) / p.size))


def log_likelihood(e, sigma2: float, c: float, m: float) -> float:
    lik = gaussian(e, math.sqrt(sigma2)) * c + m * (1.0 - c)
    return float(np.sum(np.log(np.maximum(lik, 1e-300))))


@dataclass(frozen=True)
class EMState:
    """Mixture parameters plus per-pixel posteriors and per-patch scores.

    ``inlier`` holds the patch labels (score at or above the threshold).
    ``loglik`` records the log-likelihood before the first and after every round.
    """

    sigma2: float
    c: float
    m: float
    posteriors: np.ndarray
    scores: np.ndarray
    inlier: np.ndarray
    loglik: List[float] = field(default_factory=list)
    rounds: int = 0
    zero_spread: bool = False

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    @property
    def n_excluded(self) -> int:
        return int(np.sum(~self.inlier))


def scores_from_posteriors(p: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    """``sqrt(sum p^2 / N)`` per patch for posteriors grouped by ``ptr``."""
    counts = np.diff(ptr)
    pidx = np.repeat(np.arange(len(counts)), counts)
    sq = np.bincount(pidx, weights=p * p, minlength=len(counts))
    return np.sqrt(sq / np.maximum(counts, 1))


def em_update(residuals, ptr, state: Optional[EMState] = None, threshold: float = DEFAULT_THRESHOLD,
              max_rounds: int = 20, tol: float = 1e-6, intensity_range: Optional[float] = None) -> EMState:
    """Fit the inlier Gaussian / uniform outlier mixture to ``residuals``.

    ``ptr`` groups the residuals into patches (M + 1 offsets). Rounds alternate
    posteriors with ``sigma^2 = sum p e^2 / sum p`` and ``c = mean p`` until the
    log-likelihood gains less than ``tol`` or ``max_rounds`` is reached. The
    outlier density is fixed from the residual range for the whole call.
    """
    e = np.asarray(residuals, dtype=float).ravel()
    ptr = np.asarray(ptr, dtype=np.int64)
    if e.size == 0:
        raise ValueError("no residuals")
    if ptr[-1] != e.size:
        raise ValueError("patch offsets do not match the residual count")
    m = uniform_density(e)
    spread = float(e.max() - e.min())
    M = len(ptr) - 1
    if spread == 0:
        p = np.ones_like(e)
        sigma2 = state.sigma2 if state is not None else 1.0
        c = state.c if state is not None else 1.0
        return EMState(sigma2, c, m, p, np.ones(M), np.ones(M, dtype=bool), [], 0, True)
    rng_ = spread if intensity_range is None else float(intensity_range)
    floor = SIGMA2_FLOOR * rng_ * rng_
    if state is not None and not state.zero_spread:
        sigma2, c = max(state.sigma2, floor), min(max(state.c, 1e-3), 1.0 - 1e-3)
    else:
        sigma2, c = max(float(np.mean(e * e)), floor), 0.9
    ll = [log_likelihood(e, sigma2, c, m)]
    p = pixel_posterior(e, math.sqrt(sigma2), c, m)
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        sp = float(p.sum())
        if sp <= 0:
            break
        sigma2 = max(float(np.dot(p, e * e) / sp), floor)
        c = sp / e.size
        ll.append(log_likelihood(e, sigma2, c, m))
        p = pixel_posterior(e, math.sqrt(sigma2), c, m)
        if ll[-1] - ll[-2] < tol:
            break
    scores = scores_from_posteriors(p, ptr)
    inlier = scores >= threshold
    log.debug("EM: sigma %.4g c %.3f rounds %d excluded %d/%d", math.sqrt(sigma2), c, rounds,
              int((~inlier).sum()), M)
    return EMState(sigma2, c, m, p, scores, inlier, ll, rounds, False)


def rigidity_map(geometry: Geometry, batch: PatchBatch, posteriors: np.ndarray, scores: np.ndarray,
                 live: Optional[np.ndarray] = None, n_chunks: int = DETERMINISTIC_CHUNKS) -> Volume:
    """Confidence-normalised PSF integration of ``p * pbar`` over core pixels, clipped to [0, 1].

    ``live`` (per patch) drops unregistrable patches; unobserved voxels are 0.
    """
    pidx = batch.patch_index()
    weight = batch.core.astype(float)
    if live is not None:
        weight = weight * np.asarray(live, dtype=float)[pidx]
    q = np.asarray(posteriors, dtype=float) * np.asarray(scores, dtype=float)[pidx]
    num, conf = adjoint(geometry, batch, q, weight, n_chunks, absolute=True)
    obs = observed_mask(conf)
    out = np.zeros(geometry.dims)
    out[obs] = num[obs] / conf[obs]
    return Volume(np.clip(out, 0.0, 1.0), geometry)
