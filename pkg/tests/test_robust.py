import math

import numpy as np
import pytest

from oracles import em_reference
from pvr.robust import (SIGMA2_FLOOR, ZERO_SPREAD_DENSITY, em_update, gaussian, log_likelihood, patch_score,
                        pixel_posterior, rigidity_map, scores_from_posteriors, uniform_density)


def test_uniform_density():
    assert uniform_density([-1.0, 3.0]) == pytest.approx(0.25)
    assert uniform_density([2.0, 2.0]) == ZERO_SPREAD_DENSITY
    with pytest.raises(ValueError):
        uniform_density([])


def test_posterior_oracle():
    e = np.array([0.0, 0.1, 1.0, -2.0])
    s, c, m = 0.3, 0.8, 0.25
    g = np.exp(-0.5 * (e / s) ** 2) / (s * math.sqrt(2 * math.pi))
    assert np.allclose(pixel_posterior(e, s, c, m), g * c / (g * c + m * (1 - c)))
    assert pixel_posterior(0.0, 1.0, 1.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        pixel_posterior(e, 0.0, c, m)


def test_patch_score():
    assert patch_score([1, 1, 1]) == 1.0
    assert patch_score([0.6, 0.8]) == pytest.approx(math.sqrt(0.5))
    ptr = np.array([0, 2, 5])
    p = np.array([0.6, 0.8, 1, 1, 1.0])
    assert np.allclose(scores_from_posteriors(p, ptr), [math.sqrt(0.5), 1.0])


def test_em_matches_reference_loop():
    rng = np.random.default_rng(0)
    e = np.r_[rng.normal(0, 0.1, 300), rng.uniform(-2, 2, 30)]
    ptr = np.array([0, 100, 200, 330])
    st = em_update(e, ptr, max_rounds=5, tol=-np.inf)
    floor = SIGMA2_FLOOR * (e.max() - e.min()) ** 2
    s2, c, p, ll = em_reference(e, ptr, 5, float(np.mean(e * e)), 0.9, floor)
    assert st.rounds == 5
    assert st.sigma2 == pytest.approx(s2, rel=1e-9) and st.c == pytest.approx(c, rel=1e-9)
    assert np.allclose(st.posteriors, p, atol=1e-12)
    assert np.allclose(st.loglik, ll, rtol=1e-10)


def test_em_loglik_non_decreasing():
    rng = np.random.default_rng(1)
    for seed in range(5):
        e = np.r_[rng.normal(0, 0.05, 500), rng.normal(1.0, 0.3, 60)]
        st = em_update(e, np.array([0, len(e)]))
        assert np.all(np.diff(st.loglik) >= -1e-9)


def test_em_zero_spread():
    st = em_update(np.zeros(10), np.array([0, 5, 10]))
    assert st.zero_spread and st.inlier.all() and np.all(st.posteriors == 1.0)


def test_em_warm_start_and_validation():
    e = np.random.default_rng(2).normal(0, 0.1, 100)
    first = em_update(e, np.array([0, 100]), max_rounds=2)
    second = em_update(e, np.array([0, 100]), first)
    assert second.loglik[0] >= first.loglik[0] - 1e-9
    with pytest.raises(ValueError):
        em_update(e, np.array([0, 50]))


def test_gaussian_and_loglik():
    assert gaussian(0.0, 1.0) == pytest.approx(1 / math.sqrt(2 * math.pi))
    e = np.array([0.0, 1.0])
    assert log_likelihood(e, 1.0, 1.0, 0.5) == pytest.approx(float(np.sum(np.log(gaussian(e, 1.0)))))


def test_rigidity_map_bounds(small_stacks):
    from pvr.patches import PatchPlan, plan_iteration
    from pvr.superres import PatchBatch, recon_geometry

    patches = plan_iteration(PatchPlan("square", 8, 8, 0), 0, small_stacks)
    b = PatchBatch.build(patches, small_stacks)
    g = recon_geometry(small_stacks, 2.5)
    ones = rigidity_map(g, b, np.ones(b.n_pixels), np.ones(b.n_patches))
    obs = ones.data > 0
    assert obs.mean() > 0.5
    assert np.allclose(ones.data[obs], 1.0)
    zero = rigidity_map(g, b, np.zeros(b.n_pixels), np.ones(b.n_patches))
    assert np.all(zero.data == 0)
