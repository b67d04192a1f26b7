import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slabrecon.errors import ConstantInput, DimMismatch, EmptyMask, ZeroReferenceVolume
from slabrecon.metrics import (
    dice,
    masked_mae,
    masked_mse,
    pearson,
    relative_volume_diff,
    ssim3d,
    structure_volumes,
    volume_mse,
)


def brute_mae_mse(p, g, m):
    sa = sq = 0.0
    n = 0
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            if m[i, j]:
                n += 1
                for c in range(3):
                    d = p[i, j, c] - g[i, j, c]
                    sa += abs(d)
                    sq += d * d
    return sa / n, sq / n


def ssim_scalar(x, y, win=7, k1=0.01, k2=0.03):
    """Direct transcription: loop over interior windows, sample covariances."""
    L = max(x.max(), y.max()) - min(x.min(), y.min())
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    vals = []
    nx, ny, nz = x.shape
    for i in range(nx - win + 1):
        for j in range(ny - win + 1):
            for k in range(nz - win + 1):
                a = x[i:i + win, j:j + win, k:k + win].ravel()
                b = y[i:i + win, j:j + win, k:k + win].ravel()
                ma, mb = a.mean(), b.mean()
                va, vb = a.var(ddof=1), b.var(ddof=1)
                cab = ((a - ma) * (b - mb)).sum() / (a.size - 1)
                vals.append((2 * ma * mb + c1) * (2 * cab + c2)
                            / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_masked_errors_trivial():
    rng = np.random.default_rng(0)
    g = rng.random((6, 5, 3))
    m = rng.random((6, 5)) > 0.3
    assert masked_mae(g, g, m) == 0 and masked_mse(g, g, m) == 0
    assert masked_mae(g + 0.2, g, m) == pytest.approx(0.6)
    off = g.copy()
    off[..., 0] += 3.0
    assert masked_mse(off, g, m) == pytest.approx(9.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_masked_errors_brute_force(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.standard_normal((16, 16, 3)), rng.standard_normal((16, 16, 3))
    m = rng.random((16, 16)) > 0.5
    m[0, 0] = True
    mae, mse = brute_mae_mse(p, g, m)
    assert abs(masked_mae(p, g, m) - mae) < 1e-12
    assert abs(masked_mse(p, g, m) - mse) < 1e-12
    # Cauchy-Schwarz: mean |d|_1 <= sqrt(3 * mean |d|_2^2)
    assert masked_mae(p, g, m) <= np.sqrt(3 * masked_mse(p, g, m)) + 1e-12


def test_masked_errors_scale_and_errors():
    g = np.zeros((2, 2, 3))
    p = np.ones((2, 2, 3)) * 0.1
    m = np.ones((2, 2), bool)
    assert masked_mse(p, g, m, scale=[10, 10, 10]) == pytest.approx(3.0)
    with pytest.raises(EmptyMask):
        masked_mae(p, g, np.zeros((2, 2), bool))
    with pytest.raises(DimMismatch):
        masked_mse(p, g[:1], m)


def test_dice_cases():
    a = np.zeros((4, 4), int)
    a[:, :2] = 1
    assert dice(a, a, 1) == 1.0
    assert dice(a, 1 - a, 1) == 0.0
    b = np.zeros((4, 4), int)
    b[:2, :] = 1  # 8 pixels, 4 shared with a
    assert dice(a, b, 1) == 0.5
    assert dice(a, b, 5) == 1.0  # both empty
    assert dice(a, b, 1) == dice(b, a, 1)


def test_ssim_identity_and_anticorrelation():
    rng = np.random.default_rng(1)
    v = rng.random((10, 10, 10))
    assert ssim3d(v, v) == 1.0
    g = np.indices((16, 16, 16)).sum(0)
    binary = (g % 2).astype(float)
    assert ssim3d(binary, 1 - binary) < 0.1
    with pytest.raises(DimMismatch):
        ssim3d(v, v[:9])


def test_ssim_matches_scalar_reference():
    rng = np.random.default_rng(2)
    x, y = rng.random((8, 8, 8)), rng.random((8, 8, 8))
    assert abs(ssim3d(x, y) - ssim_scalar(x, y)) < 1e-10
    assert abs(ssim3d(x, y) - ssim3d(y, x)) < 1e-12


def test_ssim_agrees_with_scikit_image():
    metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(3)
    x = rng.random((12, 11, 10))
    y = x + 0.2 * rng.random((12, 11, 10))
    rng_ = max(x.max(), y.max()) - min(x.min(), y.min())
    ref = metrics.structural_similarity(x, y, win_size=7, data_range=rng_,
                                        use_sample_covariance=True, gaussian_weights=False)
    assert abs(ssim3d(x, y) - ref) < 1e-10


def test_volumes_and_relative_difference():
    lab = np.zeros((4, 4, 4), int)
    lab[:2] = 1
    lab[2:, :1] = 2
    v = structure_volumes(lab, spacing=(1, 2, 0.5))
    assert v == {1: 32.0, 2: 8.0}
    assert relative_volume_diff(v, v, 1) == 0.0
    assert relative_volume_diff({1: 110.0}, {1: 100.0}, 1) == pytest.approx(10.0)
    assert relative_volume_diff({1: 220.0}, {1: 200.0}, 1) == pytest.approx(10.0)
    with pytest.raises(ZeroReferenceVolume):
        relative_volume_diff(v, v, 9)


def test_pearson():
    rng = np.random.default_rng(4)
    u, v = rng.random(20), rng.random(20)
    assert pearson(u, u) == 1.0
    assert pearson(u, -u) == -1.0
    assert pearson(u, 2 * u + 3) == pytest.approx(1.0, abs=1e-12)
    assert abs(pearson(u, -3 * v + 1) + pearson(u, v)) < 1e-12
    with pytest.raises(ConstantInput):
        pearson(u, np.ones(20))
    with pytest.raises(ValueError):
        pearson([1.0], [2.0])


def test_volume_mse():
    assert volume_mse(np.zeros((2, 2, 2)), np.ones((2, 2, 2))) == 1.0
