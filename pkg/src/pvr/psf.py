"""Point-spread function of a slice acquisition.

In-plane the profile is a sinc evaluated through its alternating Taylor
series; through-plane it is a Gaussian slice profile whose FWHM equals the
slice thickness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def taylor_sinc(R, eps: float = 1e-6, max_terms: int = 400):
    """sin(R)/R from the series 1 - R^2/3! + R^4/5! - ...

    Terms are added until the next one, relative to the partial sum, drops
    below ``eps`` (the alternating-series remainder bound, only trusted once
    the terms have started shrinking). Near the zeros of sinc the partial sum
    is floored at ``eps`` so the loop terminates. Accepts scalars or arrays.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    R = np.asarray(R, dtype=float)
    x2 = R * R
    total = np.ones_like(R)
    term = np.ones_like(R)
    active = np.ones(R.shape, dtype=bool)
    for n in range(1, max_terms + 1):
        nxt = term * (-x2 / ((2 * n) * (2 * n + 1)))
        shrinking = np.abs(nxt) <= np.abs(term)
        done = shrinking & (np.abs(nxt) < eps * np.maximum(np.abs(total), eps))
        active &= ~done
        if not active.any():
            break
        total = np.where(active, total + nxt, total)
        term = np.where(active, nxt, term)
    return float(total) if total.ndim == 0 else total


def slice_profile(w, thickness: float):
    """Gaussian through-plane profile (unnormalised, peak 1) with FWHM = thickness."""
    sigma = thickness * FWHM_TO_SIGMA
    return np.exp(-0.5 * (np.asarray(w, dtype=float) / sigma) ** 2)


@dataclass
class PSF:
    """Separable PSF in slice-local millimetres ``(u, v, w)``.

    The support box is ``|u| <= support * su``, ``|v| <= support * sv`` and
    ``|w| <= 1.5 * support * sigma_w`` (3 sigma at the default support of 2).
    """

    in_plane: tuple
    thickness: float
    support: float = 2.0
    eps: float = 1e-6
    table_size: int = 20001
    table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.support <= 0 or self.thickness <= 0 or min(self.in_plane) <= 0:
            raise ValueError("PSF widths must be positive")
        xs = np.linspace(0.0, self.support, self.table_size)
        self.table = taylor_sinc(np.pi * xs, self.eps)

    @property
    def sigma(self) -> float:
        return self.thickness * FWHM_TO_SIGMA

    @property
    def radii(self) -> tuple:
        su, sv = self.in_plane
        return (self.support * su, self.support * sv, 1.5 * self.support * self.sigma)

    @property
    def table_step(self) -> float:
        return self.support / (self.table_size - 1)

    def params(self) -> np.ndarray:
        """Row consumed by the compiled kernels: su, sv, sigma, ru, rv, rw."""
        su, sv = self.in_plane
        return np.array([su, sv, self.sigma, *self.radii])

    def __call__(self, u, v, w):
        """Exact (series-evaluated) weight at local offsets; zero outside the support box."""
        su, sv = self.in_plane
        ru, rv, rw = self.radii
        u, v, w = (np.asarray(a, dtype=float) for a in (u, v, w))
        inside = (np.abs(u) <= ru) & (np.abs(v) <= rv) & (np.abs(w) <= rw)
        val = (taylor_sinc(np.pi * u / su, self.eps) * taylor_sinc(np.pi * v / sv, self.eps)
               * slice_profile(w, self.thickness))
        return np.where(inside, val, 0.0)
