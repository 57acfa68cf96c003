import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvr.volgrid import (Geometry, RigidTransform, Stack, Volume, euler_to_matrix, fill_unobserved,
                         matrix_to_euler, resample, sample_points, sample_trilinear)

angles = st.floats(-179.0, 179.0)
small = st.floats(-80.0, 80.0)


@settings(max_examples=60, deadline=None)
@given(angles, small, angles)
def test_euler_roundtrip(rx, ry, rz):
    R = euler_to_matrix((rx, ry, rz))
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    assert np.allclose(euler_to_matrix(matrix_to_euler(R)), R, atol=1e-10)


def test_euler_order_is_zyx():
    R = euler_to_matrix((10, 20, 30))
    rx, ry, rz = np.deg2rad([10, 20, 30])
    Rx = np.array([[1, 0, 0], [0, np.cos(rx), -np.sin(rx)], [0, np.sin(rx), np.cos(rx)]])
    Ry = np.array([[np.cos(ry), 0, np.sin(ry)], [0, 1, 0], [-np.sin(ry), 0, np.cos(ry)]])
    Rz = np.array([[np.cos(rz), -np.sin(rz), 0], [np.sin(rz), np.cos(rz), 0], [0, 0, 1]])
    assert np.allclose(R, Rz @ Ry @ Rx)


@settings(max_examples=40, deadline=None)
@given(angles, small, angles, small, small, small)
def test_inverse_and_compose(rx, ry, rz, tx, ty, tz):
    T = RigidTransform((rx, ry, rz), (tx, ty, tz))
    I = T.compose(T.inverse())
    assert np.allclose(I.matrix(), np.eye(4), atol=1e-9)
    pts = np.random.default_rng(0).normal(size=(5, 3))
    U = RigidTransform((5, -3, 2), (1, 2, 3))
    assert np.allclose(T.compose(U).apply(pts), T.apply(U.apply(pts)))


def test_identity():
    assert RigidTransform.identity().is_identity()
    assert not RigidTransform((0, 0, 1e-3)).is_identity()


def test_geometry_roundtrip():
    g = Geometry((4, 5, 6), (1.0, 2.0, 3.0), (1, -2, 3), euler_to_matrix((10, 20, 30)))
    idx = np.random.default_rng(1).uniform(0, 4, size=(10, 3))
    assert np.allclose(g.index(g.world(idx)), idx)
    assert np.allclose(g.affine @ g.inverse_affine, np.eye(4))


def test_geometry_validation():
    with pytest.raises(ValueError):
        Geometry((0, 2, 2))
    with pytest.raises(ValueError):
        Geometry((2, 2, 2), (1, -1, 1))
    with pytest.raises(ValueError):
        Geometry((2, 2, 2), axes=np.ones((3, 3)))


def test_trilinear_reproduces_linear_function():
    v = Volume.from_array(np.zeros((5, 6, 7)), (1.0, 2.0, 0.5))
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in v.dims], indexing="ij"), -1).reshape(-1, 3)
    v.data[...] = (idx @ np.array([1.0, -2.0, 0.5])).reshape(v.dims) + 3
    pts = v.geometry.world(np.random.default_rng(2).uniform(0, 4, size=(20, 3)))
    vals, ok = sample_points(v, pts)
    assert ok.all()
    assert np.allclose(vals, v.geometry.index(pts) @ np.array([1.0, -2.0, 0.5]) + 3)


def test_sample_outside_is_none():
    v = Volume.from_array(np.ones((3, 3, 3)))
    assert sample_trilinear(v, (10, 0, 0)) is None
    assert sample_trilinear(v, (1, 1, 1)) == pytest.approx(1.0)


def test_resample_identity_and_shift():
    data = np.random.default_rng(3).normal(size=(6, 6, 6))
    v = Volume.from_array(data)
    out, mask = resample(v, v.geometry)
    assert np.allclose(out.data, data) and mask.all()
    out, mask = resample(v, v.geometry, RigidTransform(translation=(1, 0, 0)))
    assert np.allclose(out.data[:-1], data[1:])
    assert not mask[-1].any()


def test_fill_unobserved_uses_neighbour_mean():
    data = np.zeros((3, 3, 3))
    obs = np.ones((3, 3, 3), bool)
    obs[1, 1, 1] = False
    data[obs] = 2.0
    assert fill_unobserved(data, obs)[1, 1, 1] == pytest.approx(2.0)


def test_stack_accessors():
    g = Geometry((4, 5, 3), (1.0, 1.0, 2.0))
    s = Stack(np.arange(60.0).reshape(4, 5, 3), g, 2.0)
    assert s.n_slices == 3 and s.slice_shape == (4, 5)
    assert np.allclose(s.pixel_world(2, np.array([[1, 1]])), [[1, 1, 4]])
    assert np.allclose(s.normal, [0, 0, 1])
    with pytest.raises(ValueError):
        Stack(np.zeros((4, 5, 3)), g, 0.0)
    with pytest.raises(ValueError):
        Stack(np.zeros((4, 5, 3)), g, 1.0, poses=[RigidTransform()])
