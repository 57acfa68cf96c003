import math

import numpy as np
import pytest

from pvr.phantom import (SkewParams, about, corrupt_stack, corrupted_stacks, make_phantom, mirror_image,
                         octant_mask, sign_patterns, skew_matrix, skewed_volume, stack_geometry)


def test_phantom_symmetric_and_centred():
    gt = make_phantom(size=32)
    assert np.array_equal(gt.data, mirror_image(gt.data, "xy"))
    assert np.allclose(gt.geometry.center(), 0.0)
    assert gt.data.max() <= 1.0 + 1e-9 and gt.data.min() >= -1e-9
    gx = make_phantom(size=32, mirror="x")
    assert np.array_equal(gx.data, gx.data[::-1])


def test_phantom_kinds(tmp_path):
    from pvr.niftiio import save_volume

    gt = make_phantom(size=16, texture=0)
    save_volume(gt, tmp_path / "g.nii")
    assert make_phantom("loaded", path=tmp_path / "g.nii").dims == gt.dims
    with pytest.raises(FileNotFoundError):
        make_phantom("loaded")
    with pytest.raises(ValueError):
        make_phantom("blob")


def test_skew_matrix():
    S = skew_matrix(SkewParams(8.0, (1, -1, 1, 1, 1, -1)))
    t = math.tan(math.radians(8))
    assert np.allclose(np.diag(S), 1.0)
    assert S[0, 1] == pytest.approx(t) and S[0, 2] == pytest.approx(-t) and S[2, 1] == pytest.approx(-t)
    with pytest.raises(ValueError):
        SkewParams(90.0)
    with pytest.raises(ValueError):
        SkewParams(1.0, (1, 1))
    c = np.array([1.0, 2.0, 3.0])
    M = about(S, c)
    assert np.allclose(M[:3, :3] @ c + M[:3, 3], c)


def test_zero_skew_is_identity():
    gt = make_phantom(size=24)
    assert np.array_equal(skewed_volume(gt, SkewParams(0.0)).data, gt.data)


def test_region_limits_skew():
    gt = make_phantom(size=24)
    reg = octant_mask(gt, (1, 1, 1))
    sk = skewed_volume(gt, SkewParams(8.0), region=reg)
    assert np.array_equal(sk.data[~reg], gt.data[~reg])
    assert not np.array_equal(sk.data[reg], gt.data[reg])
    assert reg.sum() == (24 // 2) ** 3


def test_stack_geometry_and_interleave():
    gt = make_phantom(size=32)
    for o in ("axial", "coronal", "sagittal"):
        g = stack_geometry(gt.geometry, o)
        assert np.allclose(g.center(), gt.geometry.center())
        assert np.isclose(np.linalg.det(g.axes), 1.0)
    st = corrupt_stack(gt, SkewParams(6.0, interleave=2), "axial")
    clean = corrupt_stack(gt, SkewParams(0.0), "axial")
    same = [np.array_equal(st.data[:, :, k], clean.data[:, :, k]) for k in range(st.n_slices)]
    assert same[:4] == [False, False, True, True]
    assert st.interleave == 2 and st.thickness == 2.5
    with pytest.raises(ValueError):
        stack_geometry(gt.geometry, "oblique")


def test_sign_patterns_and_stacks():
    pats = sign_patterns(3, seed=0)
    assert pats[0] == (1,) * 6 and len(pats) == 3
    assert sign_patterns(3, seed=0) == pats
    gt = make_phantom(size=32)
    stacks = corrupted_stacks(gt, 4.0)
    assert [s.name for s in stacks] == ["axial", "coronal", "sagittal"]
    assert stacks[0].data.shape == (25, 25, 13)
