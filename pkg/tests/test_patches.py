import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvr.patches import (PatchPlan, dilate, enforce_connectivity, extract_slice, extract_square,
                         extract_superpixels, overhead_report, plan_iteration, round_half_up, slic,
                         superpixel_labels, whole_slice, window_starts)


def test_round_half_up():
    assert round_half_up(2.5) == 3 and round_half_up(9.6) == 10 and round_half_up(2.4) == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(8, 80), st.integers(1, 8), st.integers(1, 8))
def test_window_starts_cover(dim, a, omega):
    a = min(a * 4, dim)
    omega = min(omega, a)
    starts = window_starts(dim, a, omega)
    covered = np.zeros(dim, bool)
    for s in starts:
        covered[s:s + a] = True
    assert covered.all() and starts[-1] == dim - a


def test_square_cores_cover_slice():
    img = np.zeros((40, 37))
    patches = extract_square(img, 16, 8, gamma=3)
    count = np.zeros(img.shape, int)
    for p in patches:
        count += p.core_mask()
        assert p.n_pixels >= p.core.sum()
    assert (count > 0).all()
    assert all(p.dilation == 3 for p in patches)


def test_dilation_is_eight_connected():
    m = np.zeros((9, 9), bool)
    m[4, 4] = True
    assert dilate(m, 2).sum() == 25
    assert dilate(m, 0).sum() == 1


def test_whole_slice():
    (p,) = whole_slice(np.zeros((5, 6)))
    assert p.n_pixels == 30 and p.core.all()
    assert whole_slice(np.zeros((5, 6)), mask=np.zeros((5, 6), bool)) == []


def _blocks():
    img = np.zeros((48, 48))
    img[:24, :24] = 1.0
    img[24:, 24:] = 0.5
    return img + np.random.default_rng(0).normal(0, 0.01, img.shape)


def test_slic_cost_non_increasing():
    res = slic(_blocks(), 12, 0.1, max_iter=10, tol=0.0)
    c = np.array(res.cost_sq)
    assert np.all(np.diff(c) <= 1e-9 * c[0])


def test_superpixels_partition_and_are_connected():
    from scipy import ndimage

    img = _blocks()
    lab = superpixel_labels(img, 12, 0.1)
    for k in range(lab.max() + 1):
        _, n = ndimage.label(lab == k, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        assert n == 1
    patches = extract_superpixels(img, 12, 0.1, gamma=3)
    cover = sum(p.core_mask().astype(int) for p in patches)
    assert (cover == 1).all()


def test_superpixels_follow_edges():
    img = _blocks()
    lab = superpixel_labels(img, 12, 0.05)
    # no cluster straddles the strong vertical edge at row 24 in the top half
    top = lab[:, :24]
    left, right = set(np.unique(top[:24])), set(np.unique(top[24:]))
    assert len(left & right) <= 1


def test_enforce_connectivity_merges_fragments():
    lab = np.zeros((10, 10), int)
    lab[5:, :] = 1
    lab[0, 0] = 1  # isolated fragment
    out = enforce_connectivity(lab, 4)
    assert len(np.unique(out)) == 2
    assert out[0, 0] == out[1, 1]


def test_plan_schedules():
    p = PatchPlan("square", 32, 16, 60, True, schedule="multiscale", scales=(1.0, 0.75, 0.5))
    assert [p.size_at(i) for i in range(3)] == [32, 24, 16]
    assert [p.stride_at(i) for i in range(3)] == [16, 12, 8]
    assert [p.dilation_at(i) for i in range(3)] == [19, 14, 10]
    with pytest.raises(ValueError):
        p.size_at(3)
    assert PatchPlan("square", 32, 16, 5, False).dilation_at(0) == 5
    with pytest.raises(ValueError):
        PatchPlan("hexagon")
    with pytest.raises(ValueError):
        PatchPlan("square", 8, 9)


def test_overhead_report():
    img = np.zeros((32, 32))
    patches = extract_square(img, 16, 16, 0)
    assert overhead_report(patches) == (4, 0.0)
    patches = extract_square(img, 16, 8, 0)
    M, pct = overhead_report(patches)
    assert M == 9 and pct == pytest.approx(100.0 * (9 * 256 - 1024) / 1024)
    assert overhead_report([]) == (0, 0.0)


def test_plan_iteration_over_stacks(small_stacks):
    plan = PatchPlan("superpixel", 8, dilation=50)
    patches = plan_iteration(plan, 0, small_stacks)
    assert {p.stack_id for p in patches} == {0, 1, 2}
    assert all(p.dilation == 4 for p in patches)
    sl = extract_slice(PatchPlan(shape="slice"), small_stacks[0].slice(0))
    assert len(sl) == 1
