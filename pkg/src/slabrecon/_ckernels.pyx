# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sampling kernels.

Same contracts as :mod:`slabrecon._pykernels`; inputs must already be
C-contiguous float64 (uint8 for validity masks).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, INFINITY

cnp.import_array()


cdef inline bint _inside3(double x, double y, double z) nogil:
    return -1.0 <= x <= 1.0 and -1.0 <= y <= 1.0 and -1.0 <= z <= 1.0


cdef inline void _corner(double p, Py_ssize_t n, Py_ssize_t* i0,
                         Py_ssize_t* i1, double* t) nogil:
    cdef double f = (p + 1.0) * (n / 2.0) - 0.5
    cdef Py_ssize_t lo
    if f < 0.0:
        f = 0.0
    elif f > n - 1.0:
        f = n - 1.0
    lo = <Py_ssize_t>floor(f)
    if n >= 2 and lo > n - 2:
        lo = n - 2
    if n < 2:
        lo = 0
    i0[0] = lo
    i1[0] = lo + 1 if lo + 1 < n else n - 1
    t[0] = f - lo


cdef inline Py_ssize_t _cell(double p, Py_ssize_t n) nogil:
    cdef Py_ssize_t i = <Py_ssize_t>floor((p + 1.0) * (n / 2.0))
    if i < 0:
        return 0
    if i > n - 1:
        return n - 1
    return i


def nearest_index(dims, const double[:, ::1] pts):
    cdef Py_ssize_t nx = dims[0], ny = dims[1], nz = dims[2]
    cdef Py_ssize_t n = pts.shape[0], k
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] o = out
    with nogil:
        for k in range(n):
            if not _inside3(pts[k, 0], pts[k, 1], pts[k, 2]):
                o[k] = -1
            else:
                o[k] = (_cell(pts[k, 0], nx) * ny + _cell(pts[k, 1], ny)) * nz \
                    + _cell(pts[k, 2], nz)
    return out


cdef inline void _tri_one(const double[:, :, :, ::1] data, double x, double y,
                          double z, double* out) nogil:
    cdef Py_ssize_t nx = data.shape[0], ny = data.shape[1], nz = data.shape[2]
    cdef Py_ssize_t nc = data.shape[3], c
    cdef Py_ssize_t x0, x1, y0, y1, z0, z1
    cdef double tx, ty, tz, w000, w001, w010, w011, w100, w101, w110, w111
    _corner(x, nx, &x0, &x1, &tx)
    _corner(y, ny, &y0, &y1, &ty)
    _corner(z, nz, &z0, &z1, &tz)
    w000 = (1 - tx) * (1 - ty) * (1 - tz)
    w001 = (1 - tx) * (1 - ty) * tz
    w010 = (1 - tx) * ty * (1 - tz)
    w011 = (1 - tx) * ty * tz
    w100 = tx * (1 - ty) * (1 - tz)
    w101 = tx * (1 - ty) * tz
    w110 = tx * ty * (1 - tz)
    w111 = tx * ty * tz
    for c in range(nc):
        out[c] = (w000 * data[x0, y0, z0, c] + w001 * data[x0, y0, z1, c]
                  + w010 * data[x0, y1, z0, c] + w011 * data[x0, y1, z1, c]
                  + w100 * data[x1, y0, z0, c] + w101 * data[x1, y0, z1, c]
                  + w110 * data[x1, y1, z0, c] + w111 * data[x1, y1, z1, c])


def trilinear(const double[:, :, :, ::1] data, const double[:, ::1] pts,
              double background=0.0):
    cdef Py_ssize_t n = pts.shape[0], nc = data.shape[3], k, c
    out = np.empty((n, nc), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for k in range(n):
            if _inside3(pts[k, 0], pts[k, 1], pts[k, 2]):
                _tri_one(data, pts[k, 0], pts[k, 1], pts[k, 2], &o[k, 0])
            else:
                for c in range(nc):
                    o[k, c] = background
    return out


def trilinear_masked(const double[:, :, :, ::1] data,
                     const cnp.uint8_t[:, :, ::1] valid,
                     const double[:, ::1] pts, double background=0.0):
    cdef Py_ssize_t nx = data.shape[0], ny = data.shape[1], nz = data.shape[2]
    cdef Py_ssize_t n = pts.shape[0], nc = data.shape[3], k, c
    cdef Py_ssize_t x0, x1, y0, y1, z0, z1
    cdef double tx, ty, tz
    cdef bint ok
    out = np.empty((n, nc), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for k in range(n):
            if not _inside3(pts[k, 0], pts[k, 1], pts[k, 2]):
                for c in range(nc):
                    o[k, c] = background
                continue
            _corner(pts[k, 0], nx, &x0, &x1, &tx)
            _corner(pts[k, 1], ny, &y0, &y1, &ty)
            _corner(pts[k, 2], nz, &z0, &z1, &tz)
            ok = (valid[x0, y0, z0] and valid[x0, y0, z1] and valid[x0, y1, z0]
                  and valid[x0, y1, z1] and valid[x1, y0, z0]
                  and valid[x1, y0, z1] and valid[x1, y1, z0]
                  and valid[x1, y1, z1])
            if ok:
                _tri_one(data, pts[k, 0], pts[k, 1], pts[k, 2], &o[k, 0])
            else:
                x0 = _cell(pts[k, 0], nx)
                y0 = _cell(pts[k, 1], ny)
                z0 = _cell(pts[k, 2], nz)
                for c in range(nc):
                    o[k, c] = data[x0, y0, z0, c]
    return out


def bilinear(const double[:, :, ::1] img, const double[:, ::1] pts,
             double background=0.0):
    cdef Py_ssize_t w = img.shape[0], h = img.shape[1], nc = img.shape[2]
    cdef Py_ssize_t n = pts.shape[0], k, c, u0, u1, v0, v1
    cdef double tu, tv
    out = np.empty((n, nc), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for k in range(n):
            if not (-1.0 <= pts[k, 0] <= 1.0 and -1.0 <= pts[k, 1] <= 1.0):
                for c in range(nc):
                    o[k, c] = background
                continue
            _corner(pts[k, 0], w, &u0, &u1, &tu)
            _corner(pts[k, 1], h, &v0, &v1, &tv)
            for c in range(nc):
                o[k, c] = ((1 - tu) * (1 - tv) * img[u0, v0, c]
                           + (1 - tu) * tv * img[u0, v1, c]
                           + tu * (1 - tv) * img[u1, v0, c]
                           + tu * tv * img[u1, v1, c])
    return out


def assign_slabs(const double[:, ::1] pts, const double[:, :, ::1] inv_linear,
                 const double[:, ::1] inv_translation,
                 const double[::1] planes, double half_thickness):
    cdef Py_ssize_t n = pts.shape[0], ns = planes.shape[0], k, i
    cdef double px, py, pz, d, best
    winner = np.full(n, -1, dtype=np.int64)
    uv = np.zeros((n, 2), dtype=np.float64)
    cdef long long[::1] wv = winner
    cdef double[:, ::1] o = uv
    with nogil:
        for k in range(n):
            best = INFINITY
            for i in range(ns):
                py = (inv_linear[i, 1, 0] * pts[k, 0] + inv_linear[i, 1, 1] * pts[k, 1]
                      + inv_linear[i, 1, 2] * pts[k, 2] + inv_translation[i, 1])
                d = fabs(py - planes[i])
                if d > half_thickness or not d < best:
                    continue
                px = (inv_linear[i, 0, 0] * pts[k, 0] + inv_linear[i, 0, 1] * pts[k, 1]
                      + inv_linear[i, 0, 2] * pts[k, 2] + inv_translation[i, 0])
                pz = (inv_linear[i, 2, 0] * pts[k, 0] + inv_linear[i, 2, 1] * pts[k, 1]
                      + inv_linear[i, 2, 2] * pts[k, 2] + inv_translation[i, 2])
                if fabs(px) > 1.0 or fabs(pz) > 1.0:
                    continue
                best = d
                wv[k] = i
                o[k, 0] = px
                o[k, 1] = pz
    return winner, uv
