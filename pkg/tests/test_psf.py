import numpy as np
import pytest

from pvr.psf import FWHM_TO_SIGMA, PSF, slice_profile, taylor_sinc


def test_taylor_sinc_matches_sinc():
    R = np.linspace(0.0, 4 * np.pi, 4001)
    approx = taylor_sinc(R, 1e-6)
    exact = np.sinc(R / np.pi)
    assert np.max(np.abs(approx - exact)) < 1e-6


def test_taylor_sinc_scalar_and_zero():
    assert taylor_sinc(0.0) == 1.0
    assert isinstance(taylor_sinc(1.0), float)
    with pytest.raises(ValueError):
        taylor_sinc(1.0, eps=0.0)


def test_tighter_eps_is_more_accurate():
    R = np.linspace(0.1, 4 * np.pi, 500)
    exact = np.sinc(R / np.pi)
    e3 = np.max(np.abs(taylor_sinc(R, 1e-3) - exact))
    e9 = np.max(np.abs(taylor_sinc(R, 1e-9) - exact))
    assert e9 < e3


def test_slice_profile_fwhm():
    t = 2.5
    assert slice_profile(t / 2, t) == pytest.approx(0.5)
    assert FWHM_TO_SIGMA * 2.354820045 == pytest.approx(1.0, rel=1e-8)


def test_psf_support_and_values():
    psf = PSF((1.25, 1.25), 2.5)
    ru, rv, rw = psf.radii
    assert ru == pytest.approx(2.5) and rw == pytest.approx(3 * psf.sigma)
    assert psf(0, 0, 0) == pytest.approx(1.0)
    assert psf(ru + 1e-6, 0, 0) == 0.0
    assert psf(1.25, 0, 0) == pytest.approx(0.0, abs=1e-6)
    assert psf(1.8, 0, 0) < 0  # negative lobe kept
    assert len(psf.params()) == 6


def test_psf_validation():
    with pytest.raises(ValueError):
        PSF((1.0, 1.0), 0.0)
