import numpy as np
import pytest

from slabrecon.core import Affine2, Affine3, apply_affine2_3d, compose_affine3, embed_affine2, pixel_grid
from slabrecon.phantom import make_phantom
from slabrecon.predict import CoordMap2D
from slabrecon.synth import pose_from_params

# filled by test_acceptance; printed once at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.split(".")[0]), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def phantom48():
    return make_phantom(48)


@pytest.fixture(scope="session")
def phantom96():
    return make_phantom(96)


def random_stack(rng, K=8, size=64, noise=0.0, translation=0.1):
    """Coordinate maps generated exactly by a known global and per-slab affines.

    Returns ``(maps, s_values, A, per_slab)``. The global affine respects the
    acceptance bounds: rotations within 15 degrees, scales in [0.8, 1.2] and
    shears within 0.2.
    """
    pose = pose_from_params(rng.uniform(-15, 15, 3), rng.uniform(0.8, 1.2, 3),
                            rng.uniform(-0.2, 0.2, 3))
    A = Affine3(pose.linear, rng.uniform(-translation, translation, 3))
    s_values = [k / (K - 1) for k in range(K)] if K > 1 else [0.5]
    X = pixel_grid(size, size).reshape(-1, 2)
    maps, per_slab = [], []
    for s in s_values:
        a2 = Affine2(np.eye(2) + rng.uniform(-0.1, 0.1, (2, 2)), rng.uniform(-0.05, 0.05, 2),
                     2 * s - 1)
        Y = A(apply_affine2_3d(a2, X)).reshape(size, size, 3)
        if noise:
            Y = Y + noise * rng.standard_normal(Y.shape)
        maps.append(CoordMap2D(Y, np.ones((size, size), bool)))
        per_slab.append(a2)
    return maps, s_values, A, per_slab


def truth_composites(A, per_slab):
    return [compose_affine3(A, embed_affine2(a2)) for a2 in per_slab]


def plane_map(composite, plane):
    """3x3 map (u, v, 1) -> xyz of a composite restricted to its slab plane."""
    L = composite.linear
    return np.c_[L[:, 0], L[:, 2], L[:, 1] * plane + composite.translation]
