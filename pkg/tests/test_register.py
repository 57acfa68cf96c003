import numpy as np
import pytest
from scipy import ndimage

from pvr.patches import PatchPlan, extract_square, plan_iteration
from pvr.register import (FLAG_FEW_PIXELS, FLAG_OK, FLAG_ZERO_VARIANCE, RegistrationConfig, RegistrationError,
                          UndefinedSimilarity, cc_similarity, displace, patch_increment, pose_error,
                          register_batch, register_patch_to_volume, register_stack_to_volume, stack_overlap)
from pvr.superres import PatchBatch, forward
from pvr.volgrid import Geometry, RigidTransform, Stack, Volume


def test_cc_properties():
    rng = np.random.default_rng(0)
    a = rng.normal(size=100)
    b = rng.normal(size=100)
    assert cc_similarity(a, a) == pytest.approx(1.0)
    assert cc_similarity(a, -a) == pytest.approx(-1.0)
    assert cc_similarity(a, b) == pytest.approx(cc_similarity(b, a))
    assert cc_similarity(a, 3 * a + 2) == pytest.approx(1.0)
    with pytest.raises(UndefinedSimilarity):
        cc_similarity(a, np.ones(100))
    with pytest.raises(UndefinedSimilarity):
        cc_similarity([1.0], [2.0])


def test_config_levels_and_validation():
    cfg = RegistrationConfig.with_levels(4)
    assert cfg.levels == (4.0, 2.0, 1.0, 0.0)
    rs, ts = RegistrationConfig().steps()
    assert np.allclose(rs, [4, 2, 1]) and np.allclose(ts, [2, 1, 0.5])
    with pytest.raises(ValueError):
        RegistrationConfig(levels=())
    with pytest.raises(ValueError):
        RegistrationConfig(rot_step=0)


def test_increment_rotates_about_centroid():
    g = np.array([3.0, -1.0, 2.0])
    D = patch_increment([10, 20, 30, 0, 0, 0], g, np.eye(3))
    assert np.allclose(D[:3, :3] @ g + D[:3, 3], g)
    T = displace(RigidTransform(), [0, 0, 0, 1, 2, 3], g, np.eye(3))
    deg, mm = pose_error(RigidTransform(), T, g)
    assert deg == pytest.approx(0.0, abs=1e-9) and mm == pytest.approx(np.sqrt(14))


def _setup(small_phantom, small_stacks, a=16):
    plan = PatchPlan("square", a, a, 0, False)
    patches = plan_iteration(plan, 0, small_stacks)
    batch = PatchBatch.build(patches, small_stacks)
    return patches, batch


def _assert_identity(batch, target, cfg):
    res = register_batch(batch, target, cfg)
    ok = res.registrable & (batch.vals[batch.ptr[:-1]] >= 0)
    assert ok.sum() >= 20
    errs = np.array([pose_error(RigidTransform(), res.poses[m], batch.centroids[m]) for m in np.flatnonzero(ok)])
    assert np.all(errs[:20] < 0.5)
    assert np.mean(np.all(errs < 0.5, axis=1)) >= 0.95


def test_identity_start_stays_put(small_phantom, small_stacks):
    # point samples match the unblurred target
    _, batch = _setup(small_phantom, small_stacks)
    _assert_identity(batch, small_phantom, RegistrationConfig(slice_profile=False))
    # slices drawn from the volume blurred by each stack's slice profile match the default target
    from pvr.phantom import corrupted_stacks
    from pvr.register import profile_blur

    profiled = []
    for k, st in enumerate(small_stacks):
        normal = st.geometry.axes[:, 2]
        sigma = batch.psf[np.flatnonzero([p.stack_id == k for p in _setup(small_phantom, small_stacks)[0]])[0]][2]
        blurred = small_phantom.copy(profile_blur(small_phantom, normal, sigma))
        profiled.append(corrupted_stacks(blurred, 0.0, out_spacing=(2.5, 2.5, 5.0))[k])
    _, batch = _setup(small_phantom, profiled)
    _assert_identity(batch, small_phantom, RegistrationConfig())


def test_recovers_displacement():
    from pvr.phantom import corrupted_stacks, make_phantom

    gt = make_phantom(size=64)
    stacks = corrupted_stacks(gt, 0.0)
    patches = plan_iteration(PatchPlan("square", 32, 16, 60, True), 0, stacks)
    batch = PatchBatch.build(patches, stacks)
    sim, _ = forward(gt, batch)
    fg = np.array([np.mean(np.nan_to_num(sim[batch.span(m)]) > 0.05) for m in range(batch.n_patches)])
    rng = np.random.default_rng(4)
    cand = set(rng.choice(np.flatnonzero(fg >= 0.5), 12, replace=False).tolist())
    starts = []
    for m in range(batch.n_patches):
        x = np.r_[rng.uniform(-4, 4, 3), rng.uniform(-3, 3, 3)] if m in cand else np.zeros(6)
        starts.append(displace(RigidTransform(), x, batch.centroids[m], batch.frames[m]))
    res = register_batch(batch.with_poses(starts), gt)
    good = 0
    for m in cand:
        deg, mm = pose_error(RigidTransform(), res.poses[m], batch.centroids[m])
        good += deg < 1.0 and mm < 0.5
    assert good >= 11


def test_flags(small_phantom):
    g = Geometry((8, 8, 1), (2.5, 2.5, 5.0), (-10, -10, 0))
    flat = Stack(np.ones(g.dims), g, 5.0)
    (p,) = extract_square(flat.slice(0), 8, 8, 0)
    _, _, flag = register_patch_to_volume(p, small_phantom, [flat])
    assert flag == FLAG_ZERO_VARIANCE
    far = Geometry((8, 8, 1), (2.5, 2.5, 5.0), (500, 500, 500))
    out = Stack(np.random.default_rng(0).normal(size=far.dims), far, 5.0)
    (p,) = extract_square(out.slice(0), 8, 8, 0)
    pose, _, flag = register_patch_to_volume(p, small_phantom, [out])
    assert flag == FLAG_FEW_PIXELS and pose.is_identity()
    assert FLAG_OK == 0


def test_stack_registration_recovers_shift(small_phantom, small_stacks):
    st = small_stacks[0]
    T = RigidTransform((0, 0, 0), (2.0, -1.5, 0.0))
    moved = Stack(st.data, st.geometry.with_pose(T.inverse()), st.thickness)
    cfg = RegistrationConfig(levels=(1.0, 0.0), rot_step=1.0, trans_step=1.0)
    est = register_stack_to_volume(moved, small_phantom, cfg)
    assert np.allclose(est.translation, T.translation, atol=0.5)


def test_stack_registration_rejects_no_overlap(small_phantom, small_stacks):
    st = small_stacks[0]
    far = Stack(st.data, st.geometry.with_pose(RigidTransform(translation=(1000, 0, 0))), st.thickness)
    assert stack_overlap(far, small_phantom) == 0.0
    with pytest.raises(RegistrationError):
        register_stack_to_volume(far, small_phantom)


def test_profile_blur_axis_aligned_and_oblique():
    from pvr.register import profile_blur

    rng = np.random.default_rng(1)
    vol = Volume.from_array(rng.normal(size=(16, 16, 16)), (1.0, 1.0, 1.0), centered=True)
    ref = ndimage.gaussian_filter1d(vol.data, 1.2, axis=2, mode="nearest")
    assert np.allclose(profile_blur(vol, (0, 0, 1), 1.2), ref)
    assert np.allclose(profile_blur(vol, (0, 0, -1), 1.2), ref)
    assert np.array_equal(profile_blur(vol, (0, 0, 1), 0.0), vol.data)
    smooth = Volume.from_array(np.fromfunction(lambda i, j, k: 0.3 * i + 0.2 * j - 0.1 * k, (16, 16, 16)),
                               (1.0, 1.0, 1.0))
    n = np.array([1.0, 1.0, 1.0]) / np.sqrt(3)
    out = profile_blur(smooth, n, 1.0)
    # a symmetric kernel leaves a linear ramp unchanged away from the borders
    assert np.allclose(out[5:11, 5:11, 5:11], smooth.data[5:11, 5:11, 5:11], atol=1e-9)


def test_slice_profile_target_is_optional(small_phantom, small_stacks):
    patches, batch = _setup(small_phantom, small_stacks)
    a = register_batch(batch, small_phantom, RegistrationConfig(slice_profile=True))
    b = register_batch(batch, small_phantom, RegistrationConfig(slice_profile=False))
    assert len(a.poses) == len(b.poses) == batch.n_patches
    assert np.array_equal(a.flags, b.flags)
