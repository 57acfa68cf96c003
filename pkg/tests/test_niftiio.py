import numpy as np
import pytest

from pvr.niftiio import NiftiError, load_stack, load_volume, save_stack, save_volume
from pvr.volgrid import Geometry, Stack, Volume, euler_to_matrix


def test_volume_roundtrip(tmp_path):
    g = Geometry((4, 5, 6), (1.0, 1.5, 2.0), (3.0, -2.0, 1.0), euler_to_matrix((10, -20, 30)))
    v = Volume(np.random.default_rng(0).normal(size=g.dims), g)
    p = tmp_path / "v.nii.gz"
    save_volume(v, p)
    w = load_volume(p)
    assert w.dims == v.dims
    assert np.allclose(w.data, v.data.astype(np.float32))
    assert np.allclose(w.affine, v.affine, atol=1e-5)


def test_stack_roundtrip_keeps_thickness_and_interleave(tmp_path):
    g = Geometry((4, 4, 3), (1.25, 1.25, 2.5))
    s = Stack(np.ones(g.dims), g, 3.0, interleave=2)
    p = tmp_path / "s.nii"
    save_stack(s, p)
    t = load_stack(p)
    assert t.thickness == pytest.approx(3.0) and t.interleave == 2
    assert load_stack(p, thickness=1.0).thickness == 1.0


def test_missing_file_raises(tmp_path):
    with pytest.raises(NiftiError):
        load_volume(tmp_path / "nope.nii")


def test_garbage_file_raises(tmp_path):
    p = tmp_path / "bad.nii"
    p.write_bytes(b"not a nifti")
    with pytest.raises(NiftiError):
        load_volume(p)
