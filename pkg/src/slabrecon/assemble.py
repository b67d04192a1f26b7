"""Volume assembly from fitted slab transforms, and atlas label projection."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import Volume3D, invert_affine3, normalized_axis, sample_volume


@dataclass(frozen=True)
class OutputGrid:
    """Regular grid over ``[lo, hi]`` per axis, in normalized atlas units."""

    dims: tuple = (96, 96, 96)
    lo: tuple = (-1.0, -1.0, -1.0)
    hi: tuple = (1.0, 1.0, 1.0)
    background: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if min(self.dims) < 1 or any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("invalid output grid")

    def axes(self):
        return [l + (normalized_axis(n) + 1.0) * (h - l) / 2.0
                for n, l, h in zip(self.dims, self.lo, self.hi)]

    def centers(self):
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1).reshape(-1, 3)

    def voxel_size(self):
        return tuple((h - l) / n for n, l, h in zip(self.dims, self.lo, self.hi))

    @classmethod
    def covering(cls, result, dims, margin=0.05, background=0.0):
        """Smallest box holding every transformed slab square, plus ``margin``."""
        corners = []
        for comp, a2 in zip(result.composite, result.per_slab):
            for u in (-1.0, 1.0):
                for v in (-1.0, 1.0):
                    corners.append(comp(np.array([u, a2.plane_coord, v])))
        corners = np.array(corners)
        return cls(dims, tuple(corners.min(0) - margin), tuple(corners.max(0) + margin),
                   background)


def default_thickness(planes):
    """Median spacing between distinct slab planes (0 when fewer than two)."""
    p = np.unique(np.asarray(planes, dtype=np.float64))
    if len(p) < 2:
        return 0.0
    return float(np.median(np.diff(p)))


def _images(slabs):
    return [np.asarray(getattr(s, "image", s), dtype=np.float64) for s in slabs]


def build_volume(slabs, result, grid=None, thickness_norm=None, interpolation="bilinear",
                 mm_per_unit=1.0, backend=None):
    """Pull every output voxel back into the nearest slab plane and sample it.

    ``slabs`` are 2D images (or objects with an ``image`` attribute) aligned
    with ``result.per_slab``. A voxel is filled when its preimage lies within
    ``thickness_norm / 2`` of a slab plane and inside that slab's square; the
    closest plane wins, ties going to the lower index.
    """
    images = _images(slabs)
    if len(images) != len(result.composite):
        raise ValueError("need one image per fitted slab")
    grid = grid or OutputGrid()
    planes = np.array([a.plane_coord for a in result.per_slab])
    if thickness_norm is None:
        thickness_norm = default_thickness(planes)
        if thickness_norm == 0.0:
            thickness_norm = grid.voxel_size()[1]
    invs = [invert_affine3(c) for c in result.composite]
    inv_lin = np.stack([a.linear for a in invs])
    inv_t = np.stack([a.translation for a in invs])
    centers = grid.centers()
    winner, uv = kernels.assign_slabs(centers, inv_lin, inv_t, planes, thickness_norm / 2.0,
                                      backend=backend)
    out = np.full(len(centers), float(grid.background))
    for i, img in enumerate(images):
        sel = np.flatnonzero(winner == i)
        if not len(sel):
            continue
        if interpolation == "nearest":
            w, h = img.shape
            pts = np.c_[uv[sel, 0], np.zeros(len(sel)), uv[sel, 1]]
            flat = kernels.nearest_index((w, 1, h), pts, backend=backend)
            out[sel] = img.reshape(-1)[flat]
        else:
            out[sel] = kernels.bilinear(img, uv[sel], grid.background, backend=backend)[:, 0]
    scale = np.broadcast_to(np.asarray(mm_per_unit, dtype=np.float64), (3,))
    spacing = tuple(float(v * s) for v, s in zip(grid.voxel_size(), scale))
    kind = "label" if interpolation == "nearest" and all(
        np.issubdtype(np.asarray(getattr(s, "image", s)).dtype, np.integer) for s in slabs
    ) else "intensity"
    data = out.reshape(grid.dims)
    if kind == "label":
        data = data.astype(np.int32)
    meta = {"thickness_norm": float(thickness_norm), "grid_lo": grid.lo, "grid_hi": grid.hi,
            "winner": winner.reshape(grid.dims)}
    return Volume3D(data, spacing=spacing, kind=kind, meta=meta)


def project_labels(coords, atlas_seg, mask=None):
    """Atlas labels at each foreground pixel's predicted coordinate (nearest).

    Background pixels and coordinates outside ``[-1, 1]^3`` get label 0.
    """
    if atlas_seg.kind != "label":
        raise ValueError("atlas segmentation must be a label volume")
    data = np.asarray(coords.data, dtype=np.float64)
    mask = coords.mask if mask is None else np.asarray(mask, dtype=bool)
    out = np.zeros(mask.shape, dtype=atlas_seg.data.dtype)
    if mask.any():
        out[mask] = sample_volume(atlas_seg, data[mask], mode="nearest")
    return out
