import sys

import numpy as np
import pytest

from pvr.patches import Patch
from pvr.volgrid import Geometry, RigidTransform, Stack, Volume, euler_to_matrix


def random_case(rng, n=8, patch_px=4):
    """Random 8^3 volume, a randomly oriented stack near it and one posed patch."""
    vol = Volume.from_array(rng.normal(size=(n, n, n)), (1.0, 1.0, 1.0), centered=True)
    axes = euler_to_matrix(rng.uniform(-180, 180, 3))
    sp = (rng.uniform(0.8, 1.5), rng.uniform(0.8, 1.5), rng.uniform(1.0, 2.5))
    dims = (6, 6, 3)
    half = (np.array(dims) - 1) * np.array(sp) / 2
    g = Geometry(dims, sp, tuple(rng.normal(0, 0.5, 3) - axes @ half), axes)
    st = Stack(rng.normal(size=dims), g, thickness=sp[2] * rng.uniform(0.8, 1.2))
    pose = RigidTransform(tuple(rng.uniform(-10, 10, 3)), tuple(rng.uniform(-1, 1, 3)))
    x0, y0 = rng.integers(0, dims[0] - patch_px + 1, 2)
    gi, gj = np.meshgrid(np.arange(x0, x0 + patch_px), np.arange(y0, y0 + patch_px), indexing="ij")
    px = np.column_stack([gi.ravel(), gj.ravel()])
    core = np.ones(len(px), bool)
    patch = Patch(0, int(rng.integers(0, dims[2])), dims[:2], px, core, pose=pose)
    return vol, st, patch


@pytest.fixture(scope="session")
def small_phantom():
    from pvr.phantom import make_phantom

    return make_phantom(size=40, spacing=2.0)


@pytest.fixture(scope="session")
def small_stacks(small_phantom):
    from pvr.phantom import corrupted_stacks

    return corrupted_stacks(small_phantom, 0.0, out_spacing=(2.5, 2.5, 5.0))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
