import time

import numpy as np
import pytest

from conftest import random_case
from oracles import dense_W
from pvr.patches import PatchPlan, plan_iteration
from pvr.superres import (DETERMINISTIC_CHUNKS, PatchBatch, ReconState, adjoint, data_gradient, forward,
                          initialize_recon, laplacian, recon_geometry, scatter_patch, simulate_patch,
                          single_batch, sr_iteration)
from pvr.volgrid import RigidTransform, Volume


def test_simulate_patch_matches_dense_operator():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    checked = 0
    for case in range(20):
        vol, st, patch = random_case(rng)
        W = dense_W(vol.geometry, st, patch)
        ref = W @ vol.data.ravel()
        got = simulate_patch(vol, patch, [st])
        assert np.array_equal(np.isnan(ref), np.isnan(got)), f"case {case}: observed sets differ"
        ok = np.isfinite(ref)
        scale = np.maximum(np.abs(ref[ok]), np.abs(vol.data).max())
        assert np.all(np.abs(got[ok] - ref[ok]) <= 1e-6 * scale), f"case {case}"
        checked += int(ok.sum())
    assert checked > 100
    assert time.perf_counter() - t0 < 10.0


def test_adjoint_identity():
    rng = np.random.default_rng(5)
    for _ in range(10):
        vol, st, patch = random_case(rng)
        b = single_batch(patch, [st])
        x = rng.normal(size=vol.dims)
        y = rng.normal(size=patch.n_pixels)
        Wx, _ = forward(Volume(x, vol.geometry), b)
        obs = np.isfinite(Wx)
        WTy, _ = adjoint(vol.geometry, b, np.where(obs, y, np.nan))
        lhs = float(np.dot(Wx[obs], y[obs]))
        rhs = float(np.sum(x * WTy))
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-12)


def test_rows_sum_to_one(small_stacks):
    g = recon_geometry(small_stacks, 2.5, small_stacks[0].geometry.axes)
    patches = plan_iteration(PatchPlan("square", 8, 4, 0), 0, small_stacks)
    b = PatchBatch.build(patches, small_stacks)
    ones, _ = forward(Volume(np.ones(g.dims), g), b)
    ok = np.isfinite(ones)
    assert ok.mean() > 0.9
    assert np.max(np.abs(ones[ok] - 1.0)) < 1e-9


def test_gradient_finite_difference():
    rng = np.random.default_rng(11)
    vol, st, patch = random_case(rng, patch_px=6)
    b = single_batch(patch, [st])
    y = rng.normal(size=patch.n_pixels)
    sim, _ = forward(vol, b)
    scale = np.where(np.isfinite(sim), rng.uniform(0.2, 1.0, patch.n_pixels), 0.0)

    def f(X):
        s, _ = forward(X, b, use=scale != 0)
        r = np.where(scale != 0, y - s, 0.0)
        return 0.5 * float(np.sum(scale * r * r))

    g = data_gradient(vol, b, y, scale)
    h = 1e-6
    flat = np.argsort(-np.abs(g).ravel())[:10]
    for i in flat:
        d = np.zeros(vol.dims)
        d.ravel()[i] = h
        fd = (f(vol.copy(vol.data + d)) - f(vol.copy(vol.data - d))) / (2 * h)
        assert fd == pytest.approx(g.ravel()[i], rel=1e-4, abs=1e-8)


def test_adjoint_chunking_is_bit_identical(small_stacks):
    g = recon_geometry(small_stacks, 2.5, small_stacks[0].geometry.axes)
    patches = plan_iteration(PatchPlan("square", 8, 4, 2), 0, small_stacks)
    b = PatchBatch.build(patches, small_stacks)
    q = np.random.default_rng(0).normal(size=b.n_pixels)
    a1, c1 = adjoint(g, b, q, None, DETERMINISTIC_CHUNKS)
    a2, c2 = adjoint(g, b, q, None, DETERMINISTIC_CHUNKS)
    assert np.array_equal(a1, a2) and np.array_equal(c1, c2)
    a3, _ = adjoint(g, b, q, None, 3)
    assert np.allclose(a1, a3, atol=1e-10)


def test_initialize_constant_volume(small_stacks):
    stacks = [s.with_data(np.full(s.data.shape, 2.0)) for s in small_stacks]
    g = recon_geometry(stacks, 2.5, stacks[0].geometry.axes)
    b = PatchBatch.build(plan_iteration(PatchPlan(shape="slice"), 0, stacks), stacks)
    state = initialize_recon(g, b)
    assert np.allclose(state.recon.data, 2.0, atol=1e-9)


def test_sr_iteration_reduces_residual(small_stacks):
    g = recon_geometry(small_stacks, 2.5, small_stacks[0].geometry.axes)
    b = PatchBatch.build(plan_iteration(PatchPlan(shape="slice"), 0, small_stacks), small_stacks)
    state = initialize_recon(g, b)
    scale = b.core.astype(float)

    def rms(s):
        sim, _ = forward(s.recon, b)
        return float(np.sqrt(np.nanmean((b.vals - sim) ** 2)))

    before = rms(state)
    for _ in range(4):
        state = sr_iteration(state, b, scale, 0.9, 0.0)
    assert rms(state) < before
    assert state.iteration == 4


def test_sr_alpha_zero_is_noop(small_stacks):
    g = recon_geometry(small_stacks, 2.5, small_stacks[0].geometry.axes)
    b = PatchBatch.build(plan_iteration(PatchPlan(shape="slice"), 0, small_stacks), small_stacks)
    state = initialize_recon(g, b)
    out = sr_iteration(state, b, b.core.astype(float), alpha=0.0)
    assert np.array_equal(out.recon.data, state.recon.data)


def test_laplacian_of_constant_is_zero():
    assert np.allclose(laplacian(np.full((5, 6, 7), 3.0)), 0.0)


def test_scatter_patch_zero_residual_keeps_volume():
    rng = np.random.default_rng(2)
    vol, st, patch = random_case(rng)
    state = ReconState(vol, np.zeros(vol.dims))
    out = scatter_patch(state, patch, [st], np.zeros(patch.n_pixels))
    assert np.array_equal(out.recon.data, vol.data)
    assert out.confidence.sum() > 0


def test_recon_geometry_rejects_bad_spacing(small_stacks):
    with pytest.raises(ValueError):
        recon_geometry(small_stacks, 0.0)


def test_batch_requires_patches(small_stacks):
    with pytest.raises(ValueError):
        PatchBatch.build([], small_stacks)
