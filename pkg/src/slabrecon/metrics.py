"""Evaluation metrics: coordinate errors, overlap, structural similarity, volumes."""

import numpy as np
from scipy import ndimage

from .errors import ConstantInput, DimMismatch, EmptyMask, ZeroReferenceVolume

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 7


def _masked_diff(pred, gt, mask):
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    g = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if p.shape != g.shape or p.shape[:2] != m.shape:
        raise DimMismatch(f"shapes differ: {p.shape}, {g.shape}, mask {m.shape}")
    n = int(m.sum())
    if n == 0:
        raise EmptyMask("mask has no foreground pixels")
    return (p - g)[m], n


def masked_mae(pred, gt, mask):
    """Sum of absolute channel errors over the mask, divided by the mask size."""
    d, n = _masked_diff(pred, gt, mask)
    return float(np.abs(d).sum() / n)


def masked_mse(pred, gt, mask, scale=None):
    """Mean over masked pixels of the squared error norm (channels summed).

    ``scale`` (scalar or per-channel) converts normalized units to mm first.
    """
    d, n = _masked_diff(pred, gt, mask)
    if scale is not None:
        d = d * np.asarray(scale, dtype=np.float64)
    return float(np.einsum("ij,ij->", d, d) / n)


def dice(a, b, label):
    """Dice overlap of ``label`` in two label maps; 1.0 when both lack it."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimMismatch(f"{a.shape} != {b.shape}")
    ia = a == label
    ib = b == label
    denom = int(ia.sum()) + int(ib.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ia, ib).sum()) / denom


def ssim3d(x, y, win_size=SSIM_WINDOW, k1=SSIM_K1, k2=SSIM_K2, data_range=None):
    """Mean local SSIM of two volumes over a uniform cubic window.

    Local statistics use sample (n-1) covariances; the mean is taken over
    voxels whose window lies fully inside the volume. ``data_range`` defaults
    to ``max - min`` over both volumes.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    if x.shape != y.shape:
        raise DimMismatch(f"{x.shape} != {y.shape}")
    if min(x.shape) < win_size:
        raise ValueError(f"volumes must be at least {win_size} voxels per axis")
    if data_range is None:
        data_range = max(x.max(), y.max()) - min(x.min(), y.min())
        if data_range == 0:
            data_range = 1.0
    npts = win_size**x.ndim
    cov_norm = npts / (npts - 1.0)
    mx = ndimage.uniform_filter(x, win_size)
    my = ndimage.uniform_filter(y, win_size)
    mxx = ndimage.uniform_filter(x * x, win_size)
    myy = ndimage.uniform_filter(y * y, win_size)
    mxy = ndimage.uniform_filter(x * y, win_size)
    vx = cov_norm * (mxx - mx * mx)
    vy = cov_norm * (myy - my * my)
    vxy = cov_norm * (mxy - mx * my)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    pad = (win_size - 1) // 2
    core = s[tuple(slice(pad, n - pad) for n in s.shape)]
    return float(core.mean(dtype=np.float64))


def volume_mse(x, y):
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    if x.shape != y.shape:
        raise DimMismatch(f"{x.shape} != {y.shape}")
    return float(np.mean((x - y) ** 2))


def structure_volumes(labels, spacing=None):
    """Map label -> volume in mm^3 (voxel count times voxel volume), background excluded."""
    data = np.asarray(getattr(labels, "data", labels))
    if spacing is None:
        spacing = getattr(labels, "spacing", (1.0, 1.0, 1.0))
    voxel = float(np.prod(spacing))
    ids, counts = np.unique(data, return_counts=True)
    return {int(i): float(c) * voxel for i, c in zip(ids, counts) if i != 0}


def relative_volume_diff(a, b, label):
    """``|V_a - V_b| / V_b`` in percent for one structure; ``b`` is the reference."""
    ref = b.get(label, 0.0)
    if not ref > 0:
        raise ZeroReferenceVolume(f"reference volume of label {label} is zero")
    return abs(a.get(label, 0.0) - ref) / ref * 100.0


def pearson(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1 or len(u) < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    du = u - u.mean()
    dv = v - v.mean()
    suu = du @ du
    svv = dv @ dv
    if suu == 0 or svv == 0:
        raise ConstantInput("pearson correlation of a constant vector")
    r = float((du @ dv) / np.sqrt(suu * svv))
    return max(-1.0, min(1.0, r))
