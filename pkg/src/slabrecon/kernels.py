"""Backend selection for the hot sampling kernels.

The compiled Cython extension is used when it imports; otherwise the numpy
implementations in :mod:`slabrecon._pykernels` take over. Setting
``SLABRECON_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _pykernels

_compiled = None
if os.environ.get("SLABRECON_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def _impl(backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    if backend == "python":
        return _pykernels
    raise ValueError(f"unknown backend {backend!r}")


def _pts(pts, ndim):
    pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, ndim)
    return pts


def nearest_index(dims, pts, backend=None):
    return _impl(backend).nearest_index(tuple(int(d) for d in dims), _pts(pts, 3))


def trilinear(data, pts, background=0.0, backend=None):
    data = np.ascontiguousarray(data, dtype=np.float64)
    if data.ndim == 3:
        data = data[..., None]
    return _impl(backend).trilinear(data, _pts(pts, 3), float(background))


def trilinear_masked(data, valid, pts, background=0.0, backend=None):
    data = np.ascontiguousarray(data, dtype=np.float64)
    if data.ndim == 3:
        data = data[..., None]
    valid = np.ascontiguousarray(valid, dtype=np.uint8)
    return _impl(backend).trilinear_masked(data, valid, _pts(pts, 3), float(background))


def bilinear(img, pts, background=0.0, backend=None):
    img = np.ascontiguousarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    return _impl(backend).bilinear(img, _pts(pts, 2), float(background))


def assign_slabs(pts, inv_linear, inv_translation, planes, half_thickness, backend=None):
    return _impl(backend).assign_slabs(
        _pts(pts, 3),
        np.ascontiguousarray(inv_linear, dtype=np.float64),
        np.ascontiguousarray(inv_translation, dtype=np.float64),
        np.ascontiguousarray(planes, dtype=np.float64),
        float(half_thickness),
    )
