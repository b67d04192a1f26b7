"""Domain-randomized synthetic slab generator.

Given a label volume ``L`` and a coordinate field ``Y`` (atlas coordinates of
every voxel), a synthetic case is produced in four steps: a random pose warp of
both volumes, digital slicing into slabs along y, per-slab in-plane deformation
and cropping, and rendering of a photograph-like image from the label slice.
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .core import (
    COORD_SENTINEL,
    Affine3,
    Volume3D,
    apply_affine3,
    config_from_mapping,
    gaussian_sampler,
    make_rng,
    normalized_axis,
    smooth_random_field,
    voxel_grid,
)
from .errors import DimMismatch, EmptyForeground, NoValidCrop

log = logging.getLogger(__name__)

CROP_MODES = ("none", "central", "random")
MIN_CROP_RETENTION = 0.98

# RNG stream keys; every random step of every slab owns an independent stream.
_POSE, _SLAB = 0, 1
_DEFORM, _CROP, _RENDER, _ILLUM = 0, 1, 2, 3


@dataclass(frozen=True)
class SynthConfig:
    alpha_r: float = 15.0
    beta_s: float = 0.2
    gamma_h: float = 0.2
    sigma_max: float = 4.0
    mu_min: float = 0.02
    mu_max: float = 0.04
    sigma_min: float = 0.1
    sigma_max_gmm: float = 0.6
    sigma_illum: float = 0.1
    slab_thickness_mm: float = 4.0
    deform_grid: tuple = (8, 8)
    illum_grid: tuple = (4, 4)
    crop_mode: str = "random"
    crop_fraction_range: tuple = (0.85, 1.0)
    # ablation switches; all on reproduces the full engine
    random_pose: bool = True
    deform: bool = True
    random_intensity: bool = True

    def __post_init__(self):
        for name in ("alpha_r", "beta_s", "gamma_h", "sigma_max", "mu_min", "mu_max",
                     "sigma_min", "sigma_max_gmm", "sigma_illum"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.mu_min > self.mu_max:
            raise ValueError("mu_min must not exceed mu_max")
        if self.sigma_min > self.sigma_max_gmm:
            raise ValueError("sigma_min must not exceed sigma_max_gmm")
        if self.slab_thickness_mm <= 0:
            raise ValueError("slab_thickness_mm must be > 0")
        if self.crop_mode not in CROP_MODES:
            raise ValueError(f"crop_mode must be one of {CROP_MODES}")
        lo, hi = self.crop_fraction_range
        if not (0 < lo <= hi <= 1):
            raise ValueError("crop_fraction_range must lie in (0, 1]")
        for name in ("deform_grid", "illum_grid"):
            g = getattr(self, name)
            if len(g) != 2 or min(g) < 2:
                raise ValueError(f"{name} must be at least 2x2")
        object.__setattr__(self, "deform_grid", tuple(int(g) for g in self.deform_grid))
        object.__setattr__(self, "illum_grid", tuple(int(g) for g in self.illum_grid))
        object.__setattr__(self, "crop_fraction_range", (float(lo), float(hi)))

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, mapping):
        """Build a config from a flat mapping; unknown keys raise ``KeyError``."""
        return config_from_mapping(cls, mapping)


# Ablation rows: each switches on one more randomization component.
PRESETS = {
    "baseline": dict(random_intensity=False, deform=False, random_pose=False, crop_mode="none"),
    "A": dict(random_intensity=True, deform=False, random_pose=False, crop_mode="none"),
    "B": dict(random_intensity=True, deform=True, random_pose=False, crop_mode="none"),
    "C": dict(random_intensity=True, deform=True, random_pose=True, crop_mode="none"),
    "D": dict(random_intensity=True, deform=True, random_pose=True, crop_mode="central"),
    "E": dict(random_intensity=True, deform=True, random_pose=True, crop_mode="random"),
}


def preset(name, **overrides):
    """Config for one ablation row (``baseline`` or ``A``..``E``)."""
    return SynthConfig(**{**PRESETS[name], **overrides})


@dataclass
class SlabSample:
    """One slab: image, foreground mask, ground-truth coordinates and index.

    Arrays are indexed ``[u, v]``. ``positions`` holds, per pixel, the 3D point
    (normalized, pose-warped frame) the pixel was sampled from.
    """

    image: Optional[np.ndarray]
    mask: np.ndarray
    coords_gt: Optional[np.ndarray]
    s: float
    k: int
    K: int
    labels: Optional[np.ndarray] = None
    positions: Optional[np.ndarray] = None
    plane_index: Optional[int] = None
    provenance: dict = field(default_factory=dict)

    @property
    def dims(self):
        return tuple(self.mask.shape)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class SyntheticCase:
    slabs: list
    pose: Affine3
    provenance: dict
    labels_warped: Optional[Volume3D] = None
    coords_warped: Optional[Volume3D] = None


def slice_index(k, K):
    """Normalized slice number of the ``k``-th of ``K`` slabs (1-based)."""
    if K == 1:
        return 0.5
    return (k - 1) / (K - 1)


def _rotation(ax, ay, az):
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def pose_from_params(angles_deg, scales, shears):
    """Rotation (z-y-x Euler) composed with upper shear and axis scaling."""
    R = _rotation(*np.deg2rad(angles_deg))
    H = np.array([[1.0, shears[0], shears[1]], [0.0, 1.0, shears[2]], [0.0, 0.0, 1.0]])
    S = np.diag(scales)
    return Affine3(R @ H @ S, np.zeros(3))


def sample_pose_params(cfg, rng):
    angles = rng.uniform(-cfg.alpha_r, cfg.alpha_r, 3)
    scales = rng.uniform(1.0 - cfg.beta_s, 1.0 + cfg.beta_s, 3)
    shears = rng.uniform(-cfg.gamma_h, cfg.gamma_h, 3)
    return {"angles_deg": angles, "scales": scales, "shears": shears}


def sample_pose(cfg, rng):
    """Random anatomy/cutting pose; identity when ``random_pose`` is off."""
    if not cfg.random_pose:
        return Affine3.identity()
    p = sample_pose_params(cfg, rng)
    return pose_from_params(p["angles_deg"], p["scales"], p["shears"])


def coordinate_validity(Y):
    """Voxels whose coordinate vector is not the background sentinel."""
    return ~np.all(Y.data == COORD_SENTINEL, axis=-1)


def warp_pair(L, Y, A):
    """Resample ``L`` and ``Y`` through ``A``: ``L'(x) = L(A x)``, ``Y'(x) = Y(A x)``.

    Labels use nearest sampling. Coordinates are trilinear wherever all eight
    neighbours hold valid coordinates and nearest otherwise. Background voxels
    of ``L'`` carry the coordinate sentinel in ``Y'``.
    """
    if L.kind != "label" or Y.kind != "coordinates":
        raise ValueError("warp_pair expects a label volume and a coordinate volume")
    if L.dims != Y.dims:
        raise DimMismatch(f"label dims {L.dims} != coordinate dims {Y.dims}")
    pts = apply_affine3(A, voxel_grid(L.dims).reshape(-1, 3))
    flat = kernels.nearest_index(L.dims, pts)
    lab = L.data.reshape(-1)[np.maximum(flat, 0)].copy()
    lab[flat < 0] = 0
    crd = kernels.trilinear_masked(Y.data, coordinate_validity(Y), pts, COORD_SENTINEL)
    crd[lab == 0] = COORD_SENTINEL
    Lp = L.replace(lab.reshape(L.dims))
    Yp = Y.replace(crd.reshape(Y.dims + (3,)))
    return Lp, Yp


def slab_planes(Lp, thickness_mm):
    """Voxel layers (y indices) representing each slab's mid-plane.

    The foreground y-extent is cut into contiguous slabs of ``thickness_mm``
    (the last may be thinner); each mid-plane is snapped to its voxel layer.
    """
    fg = np.any(Lp.data != 0, axis=(0, 2))
    if not fg.any():
        raise EmptyForeground("label volume has no foreground")
    ys = np.flatnonzero(fg)
    y0, y1 = int(ys[0]), int(ys[-1])
    step = thickness_mm / Lp.spacing[1]
    if step < 1.0:
        raise ValueError("slab thickness is thinner than one voxel")
    extent = y1 - y0 + 1
    K = max(1, int(np.ceil(extent / step - 1e-9)))
    planes = []
    for k in range(1, K + 1):
        lo = (k - 1) * step
        hi = min(k * step, extent)
        planes.append(y0 + int(np.floor((lo + hi) / 2.0)))
    return planes


def slice_stack(Lp, Yp, cfg):
    """Cut the warped volumes into raw slabs (labels, mask, coordinates)."""
    planes = slab_planes(Lp, cfg.slab_thickness_mm)
    K = len(planes)
    nx, ny, nz = Lp.dims
    u = normalized_axis(nx)
    v = normalized_axis(nz)
    slabs = []
    for k, j in enumerate(planes, start=1):
        labels = np.array(Lp.data[:, j, :], dtype=np.int32)
        coords = np.array(Yp.data[:, j, :, :], dtype=np.float64)
        pos = np.empty((nx, nz, 3))
        pos[..., 0] = u[:, None]
        pos[..., 1] = normalized_axis(ny)[j]
        pos[..., 2] = v[None, :]
        slabs.append(
            SlabSample(
                image=None,
                mask=labels != 0,
                coords_gt=coords,
                s=slice_index(k, K),
                k=k,
                K=K,
                labels=labels,
                positions=pos,
                plane_index=j,
            )
        )
    return slabs


def _resample_slab(slab, positions, source):
    w, h = slab.dims
    pts = positions.reshape(-1, 3)
    if source is not None:
        Lp, Yp = source
        flat = kernels.nearest_index(Lp.dims, pts)
        labels = Lp.data.reshape(-1)[np.maximum(flat, 0)].copy()
        labels[flat < 0] = 0
        coords = kernels.trilinear_masked(Yp.data, Lp.data != 0, pts, COORD_SENTINEL)
    else:
        # stand-alone slab: treat the slice as a one-voxel-thick volume
        flat_pts = pts.copy()
        flat_pts[:, 1] = 0.0
        dims = (w, 1, h)
        flat = kernels.nearest_index(dims, flat_pts)
        labels = slab.labels.reshape(-1)[np.maximum(flat, 0)].copy()
        labels[flat < 0] = 0
        coords = kernels.trilinear_masked(
            slab.coords_gt.reshape(w, 1, h, 3), slab.mask.reshape(w, 1, h), flat_pts,
            COORD_SENTINEL,
        )
    labels = labels.reshape(w, h).astype(np.int32)
    coords = coords.reshape(w, h, 3)
    coords[labels == 0] = COORD_SENTINEL
    return labels, coords


def deform_slab(slab, cfg, rng, source=None):
    """Random smooth in-plane deformation applied by inverse warping.

    Each output pixel pulls from its own position displaced by a bilinearly
    upsampled lattice of Gaussian displacements (pixels). With ``source`` =
    ``(L', Y')`` the displaced 3D positions are resampled from the warped
    volumes directly; otherwise the slab's own slices are resampled.
    """
    if not cfg.deform:
        return slab.replace(provenance={**slab.provenance, "deform_sigma": 0.0})
    sigma = rng.uniform(0.0, cfg.sigma_max) if cfg.sigma_max > 0 else 0.0
    w, h = slab.dims
    gw, gh = min(cfg.deform_grid[0], w), min(cfg.deform_grid[1], h)
    disp = smooth_random_field((w, h), (gw, gh), gaussian_sampler(sigma), rng, channels=2)
    prov = {**slab.provenance, "deform_sigma": float(sigma), "displacement": disp}
    if not np.any(disp):
        return slab.replace(provenance=prov)
    pos = slab.positions.copy()
    pos[..., 0] += disp[..., 0] * (2.0 / w)
    pos[..., 2] += disp[..., 1] * (2.0 / h)
    labels, coords = _resample_slab(slab, pos, source)
    return slab.replace(labels=labels, mask=labels != 0, coords_gt=coords, positions=pos,
                        provenance=prov)


def _crop_size(n, f):
    return max(1, min(n, int(round(f * n))))


def random_crop_offsets(mask, cw, ch, retention=MIN_CROP_RETENTION):
    """All (ou, ov) crop offsets keeping at least ``retention`` of the foreground."""
    w, h = mask.shape
    total = int(mask.sum())
    sat = np.zeros((w + 1, h + 1), dtype=np.int64)
    sat[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1)
    kept = sat[cw:, ch:] - sat[:-cw, ch:] - sat[cw:, :-ch] + sat[:-cw, :-ch]
    ok = kept >= retention * total
    offsets = np.argwhere(ok)
    if len(offsets) == 0:
        raise NoValidCrop(f"no {cw}x{ch} window retains {retention:.0%} of the foreground")
    return offsets


def _apply_crop(slab, ou, ov, cw, ch, prov):
    sl = (slice(ou, ou + cw), slice(ov, ov + ch))

    def cut(a):
        return None if a is None else np.array(a[sl])

    prov = dict(prov)
    if "displacement" in prov:
        prov["displacement"] = cut(prov["displacement"])
    return slab.replace(
        image=cut(slab.image),
        mask=cut(slab.mask),
        coords_gt=cut(slab.coords_gt),
        labels=cut(slab.labels),
        positions=cut(slab.positions),
        provenance=prov,
    )


def crop_slab(slab, cfg, rng):
    """Central or foreground-preserving random crop; ``none`` is the identity."""
    mode = cfg.crop_mode
    if mode == "none":
        return slab.replace(provenance={**slab.provenance, "crop_mode": "none",
                                        "crop_box": (0, 0) + slab.dims})
    w, h = slab.dims
    f = rng.uniform(*cfg.crop_fraction_range)
    cw, ch = _crop_size(w, f), _crop_size(h, f)
    ou, ov = (w - cw) // 2, (h - ch) // 2
    fallback = False
    if mode == "random":
        try:
            offsets = random_crop_offsets(slab.mask, cw, ch)
            ou, ov = (int(x) for x in offsets[rng.integers(len(offsets))])
        except NoValidCrop as exc:
            log.warning("slab %d: %s; using central crop", slab.k, exc)
            fallback = True
    prov = {**slab.provenance, "crop_mode": mode, "crop_fraction": float(f),
            "crop_box": (ou, ov, cw, ch), "crop_fallback": fallback}
    return _apply_crop(slab, ou, ov, cw, ch, prov)


def render_intensity(slab, cfg, rng):
    """Paint the label slice with per-label Gaussian intensities.

    With ``random_intensity`` off the label values themselves are the image.
    """
    labels = slab.labels
    if not cfg.random_intensity:
        img = labels.astype(np.float64)
        return slab.replace(image=img, provenance={**slab.provenance, "intensity": "constant"})
    img = np.zeros(labels.shape, dtype=np.float64)
    gmm = {}
    for lab in np.unique(labels):
        if lab == 0:
            continue
        mu = rng.uniform(cfg.mu_min, cfg.mu_max)
        sd = rng.uniform(cfg.sigma_min, cfg.sigma_max_gmm)
        gmm[int(lab)] = (float(mu), float(sd))
        sel = labels == lab
        img[sel] = mu + sd * rng.standard_normal(int(sel.sum()))
    np.maximum(img, 0.0, out=img)
    return slab.replace(image=img, provenance={**slab.provenance, "intensity": "random",
                                               "gmm": gmm})


def apply_illumination(slab, cfg, rng):
    """Multiply the image by a smooth log-normal bias field."""
    if not cfg.random_intensity or cfg.sigma_illum == 0:
        return slab.replace(provenance={**slab.provenance, "illum_sigma": 0.0})
    sigma_e = abs(rng.normal(0.0, cfg.sigma_illum))
    w, h = slab.dims
    grid = (min(cfg.illum_grid[0], w), min(cfg.illum_grid[1], h))
    log_field = smooth_random_field((w, h), grid, gaussian_sampler(sigma_e), rng)
    return slab.replace(image=slab.image * np.exp(log_field),
                        provenance={**slab.provenance, "illum_sigma": float(sigma_e)})


def finish_slab(slab, cfg, seed, source=None):
    """Steps 3 and 4 for one raw slab with streams keyed by ``(seed, k)``."""
    k = slab.k
    slab = deform_slab(slab, cfg, make_rng(seed, _SLAB, k, _DEFORM), source=source)
    slab = crop_slab(slab, cfg, make_rng(seed, _SLAB, k, _CROP))
    slab = render_intensity(slab, cfg, make_rng(seed, _SLAB, k, _RENDER))
    return apply_illumination(slab, cfg, make_rng(seed, _SLAB, k, _ILLUM))


def generate_case(L, Y, cfg, seed, threads=1):
    """Run the whole engine; deterministic in ``(L, Y, cfg, seed)``."""
    pose_rng = make_rng(seed, _POSE)
    pose_params = sample_pose_params(cfg, pose_rng) if cfg.random_pose else None
    if pose_params is None:
        A = Affine3.identity()
    else:
        A = pose_from_params(pose_params["angles_deg"], pose_params["scales"],
                             pose_params["shears"])
    Lp, Yp = warp_pair(L, Y, A)
    raw = slice_stack(Lp, Yp, cfg)

    def work(slab):
        return finish_slab(slab, cfg, seed, source=(Lp, Yp))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            slabs = list(ex.map(work, raw))
    else:
        slabs = [work(s) for s in raw]
    prov = {"seed": int(seed), "config": cfg.to_dict(), "pose_params": pose_params}
    return SyntheticCase(slabs=slabs, pose=A, provenance=prov, labels_warped=Lp,
                         coords_warped=Yp)
