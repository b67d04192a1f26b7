"""Vectorized numpy implementations of the sampling kernels.

These are the fallback used when the compiled extension is unavailable and
the reference the compiled kernels are tested against. All point arrays are in
normalized cell-centered coordinates, where voxel ``i`` of an axis with ``n``
voxels sits at ``2 * (i + 0.5) / n - 1``.
"""

import numpy as np


def _continuous_index(pts, dims):
    """Map normalized points to continuous voxel indices and an in-domain flag."""
    dims_arr = np.asarray(dims, dtype=np.float64)
    inside = np.all((pts >= -1.0) & (pts <= 1.0), axis=1)
    f = (pts + 1.0) * (dims_arr / 2.0) - 0.5
    return f, inside


def nearest_index(dims, pts):
    """Flat C-order index of the voxel containing each point, -1 outside."""
    pts = np.asarray(pts, dtype=np.float64)
    dims_arr = np.asarray(dims, dtype=np.int64)
    inside = np.all((pts >= -1.0) & (pts <= 1.0), axis=1)
    idx = np.floor((pts + 1.0) * (dims_arr / 2.0)).astype(np.int64)
    idx = np.clip(idx, 0, dims_arr - 1)
    flat = np.ravel_multi_index(idx.T, tuple(int(d) for d in dims))
    flat[~inside] = -1
    return flat


def _corners(f, dims):
    dims_arr = np.asarray(dims, dtype=np.int64)
    f = np.clip(f, 0.0, dims_arr - 1.0)
    i0 = np.floor(f).astype(np.int64)
    i0 = np.minimum(i0, np.maximum(dims_arr - 2, 0))
    frac = f - i0
    i1 = np.minimum(i0 + 1, dims_arr - 1)
    return i0, i1, frac


def trilinear(data, pts, background=0.0):
    """Trilinear samples of ``data`` (nx, ny, nz, C) at normalized ``pts``."""
    pts = np.asarray(pts, dtype=np.float64)
    dims = data.shape[:3]
    f, inside = _continuous_index(pts, dims)
    i0, i1, t = _corners(f, dims)
    out = np.zeros((pts.shape[0], data.shape[3]), dtype=np.float64)
    for cx in (0, 1):
        ix = i1[:, 0] if cx else i0[:, 0]
        wx = t[:, 0] if cx else 1.0 - t[:, 0]
        for cy in (0, 1):
            iy = i1[:, 1] if cy else i0[:, 1]
            wy = t[:, 1] if cy else 1.0 - t[:, 1]
            for cz in (0, 1):
                iz = i1[:, 2] if cz else i0[:, 2]
                wz = t[:, 2] if cz else 1.0 - t[:, 2]
                out += (wx * wy * wz)[:, None] * data[ix, iy, iz, :]
    out[~inside] = background
    return out


def trilinear_masked(data, valid, pts, background=0.0):
    """Trilinear where all eight neighbours are valid, nearest voxel otherwise."""
    pts = np.asarray(pts, dtype=np.float64)
    dims = data.shape[:3]
    f, inside = _continuous_index(pts, dims)
    i0, i1, _ = _corners(f, dims)
    ok = np.ones(pts.shape[0], dtype=bool)
    for ix in (i0[:, 0], i1[:, 0]):
        for iy in (i0[:, 1], i1[:, 1]):
            for iz in (i0[:, 2], i1[:, 2]):
                ok &= valid[ix, iy, iz].astype(bool)
    out = trilinear(data, pts, background)
    near = ~ok & inside
    if np.any(near):
        flat = nearest_index(dims, pts[near])
        out[near] = data.reshape(-1, data.shape[3])[flat]
    return out


def bilinear(img, pts, background=0.0):
    """Bilinear samples of ``img`` (w, h, C) at normalized 2D ``pts``."""
    pts = np.asarray(pts, dtype=np.float64)
    dims = img.shape[:2]
    dims_arr = np.asarray(dims, dtype=np.float64)
    inside = np.all((pts >= -1.0) & (pts <= 1.0), axis=1)
    f = (pts + 1.0) * (dims_arr / 2.0) - 0.5
    i0, i1, t = _corners(f, dims)
    out = np.zeros((pts.shape[0], img.shape[2]), dtype=np.float64)
    for cu in (0, 1):
        iu = i1[:, 0] if cu else i0[:, 0]
        wu = t[:, 0] if cu else 1.0 - t[:, 0]
        for cv in (0, 1):
            iv = i1[:, 1] if cv else i0[:, 1]
            wv = t[:, 1] if cv else 1.0 - t[:, 1]
            out += (wu * wv)[:, None] * img[iu, iv, :]
    out[~inside] = background
    return out


def assign_slabs(pts, inv_linear, inv_translation, planes, half_thickness):
    """Pick, per output point, the closest slab plane within half a slab.

    Returns the winning slab index (-1 when uncovered) and the in-plane
    coordinates of the point in that slab's frame. Ties keep the lower index.
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = pts.shape[0]
    winner = np.full(n, -1, dtype=np.int64)
    best = np.full(n, np.inf)
    uv = np.zeros((n, 2), dtype=np.float64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    for i in range(len(planes)):
        # explicit sums in a fixed order keep results bit-identical to the
        # compiled kernel (a BLAS matmul may reorder or fuse them)
        M, t = inv_linear[i], inv_translation[i]
        p = np.stack([M[j, 0] * x + M[j, 1] * y + M[j, 2] * z + t[j] for j in range(3)], axis=1)
        dist = np.abs(p[:, 1] - planes[i])
        take = (
            (dist <= half_thickness)
            & (dist < best)
            & (np.abs(p[:, 0]) <= 1.0)
            & (np.abs(p[:, 2]) <= 1.0)
        )
        winner[take] = i
        best[take] = dist[take]
        uv[take, 0] = p[take, 0]
        uv[take, 1] = p[take, 2]
    return winner, uv
