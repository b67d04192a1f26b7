import numpy as np
import pytest

from slabrecon.assemble import OutputGrid, build_volume, default_thickness, project_labels
from slabrecon.core import Affine3, Volume3D, invert_affine3
from slabrecon.errors import SingularTransform
from slabrecon.predict import CoordMap2D, PredictorSpec, predict
from slabrecon.recon import initial_result, reconstruct
from slabrecon.synth import SynthConfig, generate_case


def test_single_slab_identity_embeds_image():
    img = np.arange(16, dtype=float).reshape(4, 4) + 1
    res = initial_result([0.5])  # plane y = 0
    grid = OutputGrid((4, 5, 4))  # y centers -0.8, -0.4, 0, 0.4, 0.8
    vol = build_volume([img], res, grid, thickness_norm=0.4)
    filled = np.flatnonzero(np.any(vol.data != 0, axis=(0, 2)))
    assert list(filled) == [2]
    np.testing.assert_allclose(vol.data[:, 2, :], img)


def test_tie_goes_to_lower_index():
    a, b = np.full((4, 4), 1.0), np.full((4, 4), 2.0)
    res = initial_result([0.0, 1.0])
    res.per_slab[0] = type(res.per_slab[0]).identity(-0.25)
    res.per_slab[1] = type(res.per_slab[1]).identity(0.25)
    res.composite = [Affine3.identity(), Affine3.identity()]
    grid = OutputGrid((4, 1, 4), lo=(-1, -0.1, -1), hi=(1, 0.1, 1))  # center y = 0
    vol = build_volume([a, b], res, grid, thickness_norm=1.0)
    assert np.all(vol.data == 1.0)


def test_conservation_identity_transforms():
    K, n = 4, 8
    rng = np.random.default_rng(0)
    masks = [rng.random((n, n)) > 0.4 for _ in range(K)]
    imgs = [m.astype(float) for m in masks]
    s = [k / (K - 1) for k in range(K)]
    res = initial_result(s)
    # grid whose y layers straddle the planes -1, -1/3, 1/3, 1: 3 layers per slab pitch
    ny = 3 * K
    grid = OutputGrid((n, ny, n), lo=(-1, -1 - 1 / 3, -1), hi=(1, 1 + 1 / 3, 1))
    vol = build_volume(imgs, res, grid)
    winner = vol.meta["winner"]
    layers = [np.count_nonzero(np.all(winner == i, axis=(0, 2))) for i in range(K)]
    assert layers == [3] * K
    assert np.count_nonzero(vol.data) == sum(m.sum() * 3 for m in masks)


def test_default_thickness():
    assert default_thickness([0.0, 0.5, 1.0, 1.0]) == 0.5
    assert default_thickness([0.3]) == 0.0


def test_singular_composite():
    res = initial_result([0.5])
    res.composite = [Affine3(np.diag([1.0, 0.0, 1.0]), np.zeros(3))]
    with pytest.raises(SingularTransform):
        build_volume([np.ones((3, 3))], res, OutputGrid((4, 4, 4)))


def test_winner_within_half_thickness(phantom48):
    L, Y = phantom48
    case = generate_case(L, Y, SynthConfig(), 2)
    maps = [predict(PredictorSpec(), s) for s in case.slabs]
    res = reconstruct(maps, [s.s for s in case.slabs])
    grid = OutputGrid((32, 32, 32))
    imgs = [s.image for s in case.slabs]
    vol = build_volume(imgs, res, grid)
    again = build_volume(imgs, res, grid)
    assert vol.data.tobytes() == again.data.tobytes()
    winner = vol.meta["winner"].ravel()
    half = vol.meta["thickness_norm"] / 2
    centers = grid.centers()
    for i in np.unique(winner[winner >= 0]):
        p = invert_affine3(res.composite[i])(centers[winner == i])
        assert np.all(np.abs(p[:, 1] - res.per_slab[i].plane_coord) <= half + 1e-12)


def test_covering_grid_contains_planes():
    res = initial_result([0.0, 1.0])
    g = OutputGrid.covering(res, (8, 8, 8))
    assert g.lo[1] <= -1 and g.hi[1] >= 1


def test_project_labels_rules():
    atlas = Volume3D(np.full((4, 4, 4), 7, np.int32), kind="label")
    data = np.zeros((3, 3, 3))
    data[0, 0] = [5.0, 0, 0]  # outside the atlas
    mask = np.ones((3, 3), bool)
    mask[2, 2] = False
    out = project_labels(CoordMap2D(data, mask), atlas)
    assert out[0, 0] == 0 and out[2, 2] == 0
    assert np.all(out[mask & (np.arange(9).reshape(3, 3) != 0)] == 7)
    assert set(np.unique(out)) <= {0, 7}
    with pytest.raises(ValueError):
        project_labels(CoordMap2D(data, mask), Volume3D(np.zeros((2, 2, 2))))


def test_project_labels_self_atlas(phantom48):
    # exact when pixels sit on voxel centers of the warped volume (no deformation)
    L, Y = phantom48
    case = generate_case(L, Y, SynthConfig(deform=False), 5)
    for slab in case.slabs[::3]:
        proj = project_labels(predict(PredictorSpec(), slab), L)
        assert np.array_equal(proj, slab.labels)
