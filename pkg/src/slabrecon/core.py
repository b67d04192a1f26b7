"""Geometry and sampling primitives.

Coordinate conventions used throughout the package:

* Volumes are indexed ``data[x, y, z]`` with x = left-right,
  y = posterior-anterior (the slab stacking axis) and z = inferior-superior.
* Voxel ``i`` of an axis with ``n`` voxels has normalized coordinate
  ``2 * (i + 0.5) / n - 1`` so every grid spans ``[-1, 1]`` edge to edge.
* Images are indexed ``data[u, v]`` where u runs along x and v along z of the
  plane they were cut from.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .errors import ModeMismatch, SingularTransform

COORD_SENTINEL = -2.0
KINDS = ("intensity", "label", "coordinates")


def make_rng(seed, *keys):
    """Return a PCG64 generator keyed by ``seed`` and an optional path of child keys.

    Child generators for parallel work are derived from ``(seed, key, ...)``
    before fan-out, so results do not depend on scheduling.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def normalized_axis(n):
    """Cell-centered normalized coordinates of ``n`` samples."""
    return 2.0 * (np.arange(n, dtype=np.float64) + 0.5) / n - 1.0


def pixel_grid(w, h):
    """Normalized (u, v) coordinates of every pixel, shape (w, h, 2)."""
    u, v = np.meshgrid(normalized_axis(w), normalized_axis(h), indexing="ij")
    return np.stack([u, v], axis=-1)


def voxel_grid(dims):
    """Normalized (x, y, z) coordinates of every voxel, shape (nx, ny, nz, 3)."""
    axes = [normalized_axis(n) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _finite(*arrays):
    return all(np.all(np.isfinite(a)) for a in arrays)


@dataclass(frozen=True, eq=False)
class Affine3:
    """3D affine map ``p -> linear @ p + translation`` in normalized units."""

    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        lin = np.array(self.linear, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not _finite(lin, t):
            raise ValueError("affine entries must be finite")
        lin.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m

    def det(self):
        return float(np.linalg.det(self.linear))

    def __call__(self, p):
        return apply_affine3(self, p)

    def __matmul__(self, other):
        return compose_affine3(self, other)

    def inverse(self):
        return invert_affine3(self)

    def __repr__(self):
        return f"Affine3(linear={self.linear.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class Affine2:
    """In-plane affine plus the fixed out-of-plane position of its slab plane."""

    linear: np.ndarray = field(default_factory=lambda: np.eye(2))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    plane_coord: float = 0.0

    def __post_init__(self):
        lin = np.array(self.linear, dtype=np.float64).reshape(2, 2)
        t = np.array(self.translation, dtype=np.float64).reshape(2)
        c = float(self.plane_coord)
        if not _finite(lin, t, c):
            raise ValueError("affine entries must be finite")
        lin.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "plane_coord", c)

    @classmethod
    def identity(cls, plane_coord=0.0):
        return cls(np.eye(2), np.zeros(2), plane_coord)

    def det(self):
        return float(np.linalg.det(self.linear))

    def params(self):
        """Row-major 6-vector ``(m00, m01, t0, m10, m11, t1)``."""
        return np.c_[self.linear, self.translation].ravel()

    @classmethod
    def from_params(cls, theta, plane_coord):
        theta = np.asarray(theta, dtype=np.float64).reshape(2, 3)
        return cls(theta[:, :2], theta[:, 2], plane_coord)

    def __repr__(self):
        return (
            f"Affine2(linear={self.linear.tolist()}, translation={self.translation.tolist()}, "
            f"plane_coord={self.plane_coord!r})"
        )


def apply_affine3(A, p):
    """Apply ``A`` to one point (3,) or a batch (..., 3)."""
    p = np.asarray(p, dtype=np.float64)
    return p @ A.linear.T + A.translation


def compose_affine3(A, B):
    """Affine equal to applying ``B`` first, then ``A``."""
    return Affine3(A.linear @ B.linear, A.linear @ B.translation + A.translation)


def invert_affine3(A, tol=1e-12):
    d = np.linalg.det(A.linear)
    if not abs(d) > tol:
        raise SingularTransform(f"determinant {d:.3e} below {tol:.0e}")
    inv = np.linalg.inv(A.linear)
    return Affine3(inv, -inv @ A.translation)


def embed_affine2(A2):
    """Lift an in-plane affine to 3D.

    The result leaves y untouched and acts on (x, z) as ``A2`` acts on (u, v);
    an in-plane point (u, v) is lifted to ``(u, plane_coord, v)`` before the map
    is applied (see :func:`lift_points`).
    """
    m = A2.linear
    lin = np.array([[m[0, 0], 0.0, m[0, 1]], [0.0, 1.0, 0.0], [m[1, 0], 0.0, m[1, 1]]])
    t = np.array([A2.translation[0], 0.0, A2.translation[1]])
    return Affine3(lin, t)


def lift_points(uv, plane_coord):
    """Place in-plane points (..., 2) on the plane ``y = plane_coord``."""
    uv = np.asarray(uv, dtype=np.float64)
    y = np.full(uv.shape[:-1] + (1,), float(plane_coord))
    return np.concatenate([uv[..., :1], y, uv[..., 1:2]], axis=-1)


def apply_affine2_3d(A2, uv):
    """Map in-plane points to canonical 3D points: ``embed(A2)(lift(uv))``."""
    return apply_affine3(embed_affine2(A2), lift_points(uv, A2.plane_coord))


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A scalar, label or 3-channel coordinate grid.

    ``data`` has shape (nx, ny, nz) or (nx, ny, nz, 3); ``spacing`` is in mm per
    voxel. ``meta`` carries free-form provenance such as ``mm_per_unit``.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    kind: str = "intensity"
    affine: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if data.ndim not in (3, 4) or (data.ndim == 4 and data.shape[3] not in (1, 3)):
            raise ValueError(f"volume data must be (nx,ny,nz[,C]), got {data.shape}")
        if data.ndim == 4 and data.shape[3] == 1:
            data = data[..., 0]
        if min(data.shape[:3]) < 1:
            raise ValueError("volume dims must be >= 1")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError("spacing must be three positive numbers")
        if self.kind == "label" and not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.mod(data, 1) == 0):
                raise ValueError("label volumes must be integer valued")
            data = data.astype(np.int32)
        if self.kind == "coordinates":
            if data.ndim != 4:
                raise ValueError("coordinate volumes need 3 channels")
            if not np.all(np.isfinite(data)):
                raise ValueError("coordinate volumes must be finite")
        if self.affine is not None:
            aff = np.asarray(self.affine, dtype=np.float64).reshape(4, 4)
            object.__setattr__(self, "affine", aff)
        if not data.flags.writeable and data.flags.c_contiguous:
            ro = data
        else:
            ro = np.array(data, copy=True, order="C")
            ro.flags.writeable = False
        object.__setattr__(self, "data", ro)
        object.__setattr__(self, "spacing", spacing)
        meta = dict(self.meta)
        meta.setdefault("mm_per_unit", tuple(d * s / 2.0 for d, s in zip(ro.shape[:3], spacing)))
        object.__setattr__(self, "meta", meta)

    @property
    def dims(self):
        return tuple(self.data.shape[:3])

    @property
    def channels(self):
        return 1 if self.data.ndim == 3 else self.data.shape[3]

    @property
    def background(self):
        return COORD_SENTINEL if self.kind == "coordinates" else 0

    def replace(self, data, **kw):
        args = dict(spacing=self.spacing, kind=self.kind, affine=self.affine, meta=self.meta)
        args.update(kw)
        return Volume3D(data, **args)


@dataclass(frozen=True, eq=False)
class Image2D:
    """Single-channel image indexed ``data[u, v]`` on the normalized square."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"Image2D must be 2D, got shape {data.shape}")
        if np.issubdtype(data.dtype, np.floating) and not np.all(np.isfinite(data)):
            raise ValueError("image intensities must be finite")
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        return tuple(self.data.shape)


def sample_volume(vol, p, mode=None):
    """Sample ``vol`` at normalized point(s) ``p``.

    Labels default to (and require) nearest sampling; other kinds default to
    trilinear. Points outside ``[-1, 1]^3`` get the volume's background value.
    """
    if mode is None:
        mode = "nearest" if vol.kind == "label" else "trilinear"
    if mode not in ("nearest", "trilinear"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if vol.kind == "label" and mode == "trilinear":
        raise ModeMismatch("trilinear sampling of a label volume")
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    if mode == "nearest":
        flat = kernels.nearest_index(vol.dims, pts)
        table = vol.data.reshape(-1, vol.channels) if vol.channels > 1 else vol.data.reshape(-1)
        out = table[np.maximum(flat, 0)].copy()
        out[flat < 0] = vol.background
    else:
        out = kernels.trilinear(vol.data, pts, vol.background)
        if vol.channels == 1:
            out = out[:, 0]
    if single:
        return out[0]
    return out.reshape(p.shape[:-1] + out.shape[1:])


def constant_sampler(value):
    def sample(rng, shape):
        return np.full(shape, float(value))

    return sample


def gaussian_sampler(sigma, mean=0.0):
    def sample(rng, shape):
        return mean + sigma * rng.standard_normal(shape)

    return sample


def _upsample_axis(lattice, n, axis):
    g = lattice.shape[axis]
    pos = np.arange(n, dtype=np.float64) * ((g - 1) / (n - 1)) if n > 1 else np.zeros(1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), g - 2)
    t = pos - i0
    a = np.take(lattice, i0, axis=axis)
    b = np.take(lattice, i0 + 1, axis=axis)
    shape = [1] * lattice.ndim
    shape[axis] = n
    return a + t.reshape(shape) * (b - a)


def smooth_random_field(dims, grid, per_cell_sampler: Callable, rng, channels=1):
    """Sample a coarse lattice and bilinearly upsample it to ``dims``.

    Lattice nodes coincide with the corner pixels of the output. Returns an
    array of shape ``(w, h)`` or ``(w, h, channels)``.
    """
    w, h = (int(d) for d in dims)
    gw, gh = (int(g) for g in grid)
    if gw < 2 or gh < 2:
        raise ValueError("lattice must be at least 2x2")
    if w < gw or h < gh:
        raise ValueError("output dims must be at least the lattice size")
    shape = (gw, gh) if channels == 1 else (gw, gh, channels)
    lattice = np.asarray(per_cell_sampler(rng, shape), dtype=np.float64)
    return _upsample_axis(_upsample_axis(lattice, w, 0), h, 1)


def _coerce(value, default):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, tuple):
        parts = text.replace(",", " ").split()
        kind = type(default[0])
        return tuple(kind(p) if kind is not int else int(float(p)) for p in parts)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, int):
        return int(text)
    return text


def config_from_mapping(cls, mapping):
    """Instantiate a config dataclass from flat (often string) values.

    Strings are coerced to the type of each field's default. Unknown keys
    raise ``KeyError`` naming the key.
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in fields:
            raise KeyError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(value, fields[key].default)
    return cls(**kwargs)
