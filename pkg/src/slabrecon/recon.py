"""Joint stack reconstruction by alternating least squares.

Every slab's pixel-to-atlas map is factored as ``A @ embed(A2_i)``: one shared
3D affine ``A`` and an in-plane affine ``A2_i`` per slab whose out-of-plane
position is fixed by the slab's normalized index. The two blocks are solved
alternately, each step an exact (ridge-regularized) linear least-squares fit.
"""

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Affine2,
    Affine3,
    apply_affine2_3d,
    compose_affine3,
    config_from_mapping,
    embed_affine2,
    pixel_grid,
)
from .errors import InsufficientPoints, NumericalFailure

log = logging.getLogger(__name__)

_THETA_ID = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass(frozen=True)
class ReconConfig:
    max_iters: int = 100
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12  # residual floor treated as an exact fit
    ridge: float = 1e-8
    max_points: int = 20000
    stride: int = 0  # 0 picks the stride from max_points
    init_mode: str = "slice_index"
    min_pixels: int = 50

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.init_mode not in ("identity", "slice_index"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")

    @classmethod
    def from_mapping(cls, mapping):
        return config_from_mapping(cls, mapping)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class ReconResult:
    global_affine: Affine3
    per_slab: list
    composite: list
    residual_rms: float
    residual_rms_per_slab: np.ndarray
    iterations: int
    converged: bool
    excluded: list = field(default_factory=list)
    objective_history: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def _solve(G, rhs, what):
    try:
        sol = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"{what}: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise NumericalFailure(f"{what}: non-finite solution")
    return sol


def fit_affine_ls(sources, targets, weights=None, ridge=1e-8):
    """Weighted ridge least-squares affine fit from d-points (d = 2 or 3) to 3-points.

    Minimizes ``sum w_i |M p_i + t - q_i|^2 + ridge * |[M t] - P0|_F^2`` where
    ``P0`` is the identity (d = 3) or the plane lift ``(u, v) -> (u, 0, v)``
    (d = 2). Returns an :class:`Affine3` for d = 3 and a 3x3 matrix
    ``[M | t]`` for d = 2.
    """
    src = np.asarray(sources, dtype=np.float64)
    dst = np.asarray(targets, dtype=np.float64)
    n, d = src.shape
    if d not in (2, 3) or dst.shape != (n, 3):
        raise ValueError("sources must be (n, 2|3) and targets (n, 3)")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.any(w > 0):
        raise InsufficientPoints("weights must be non-negative and not all zero")
    if np.count_nonzero(w) < d + 1:
        raise InsufficientPoints(f"need at least {d + 1} weighted points, got {np.count_nonzero(w)}")
    H = np.c_[src, np.ones(n)]
    prior = np.zeros((d + 1, 3))
    if d == 3:
        prior[:3, :3] = np.eye(3)
    else:
        prior[0, 0] = prior[1, 2] = 1.0
    G = (H * w[:, None]).T @ H + ridge * np.eye(d + 1)
    rhs = (H * w[:, None]).T @ dst + ridge * prior
    theta = _solve(G, rhs, "affine fit").T
    if d == 3:
        return Affine3(theta[:, :3], theta[:, 3])
    return theta


@dataclass
class _Slab:
    X: np.ndarray  # (n, 2) pixel coordinates
    Y: np.ndarray  # (n, 3) predicted atlas coordinates
    w: np.ndarray
    plane: float


def _prepare(cmap, plane, cfg, subsample=True):
    mask = cmap.mask
    idx = np.flatnonzero(mask.ravel())
    if subsample and len(idx):
        stride = cfg.stride or int(np.ceil(len(idx) / cfg.max_points))
        idx = idx[:: max(stride, 1)]
    X = pixel_grid(*mask.shape).reshape(-1, 2)[idx]
    Y = np.asarray(cmap.data, dtype=np.float64).reshape(-1, 3)[idx]
    w = cmap.pixel_weights().reshape(-1)[idx]
    return _Slab(X, Y, w, plane)


def _residual_sq(A, A2, slab):
    r = A(apply_affine2_3d(A2, slab.X)) - slab.Y
    return np.einsum("ij,ij->i", r, r)


def _fit_global(slabs, per_slab, ridge):
    Z = np.concatenate([apply_affine2_3d(a2, s.X) for s, a2 in zip(slabs, per_slab)])
    Y = np.concatenate([s.Y for s in slabs])
    w = np.concatenate([s.w for s in slabs])
    return fit_affine_ls(Z, Y, w, ridge)


def _fit_inplane(A, slab, plane, ridge):
    """Best in-plane affine for one slab given the global ``A`` (6 unknowns)."""
    L = A.linear
    lx, ly, lz = L[:, 0], L[:, 1], L[:, 2]
    q = np.c_[slab.X, np.ones(len(slab.X))]
    qw = q * slab.w[:, None]
    G = qw.T @ q
    r = slab.Y - ly * plane - A.translation
    a_xx, a_xz, a_zz = lx @ lx, lx @ lz, lz @ lz
    JJ = np.block([[a_xx * G, a_xz * G], [a_xz * G, a_zz * G]])
    Jr = np.concatenate([qw.T @ (r @ lx), qw.T @ (r @ lz)])
    theta = _solve(JJ + ridge * np.eye(6), Jr + ridge * _THETA_ID, "in-plane fit")
    return Affine2.from_params(theta, plane)


def _penalized(A, per_slab, slabs, ridge):
    data = sum(float(s.w @ _residual_sq(A, a2, s)) for s, a2 in zip(slabs, per_slab))
    reg = np.sum((A.linear - np.eye(3)) ** 2) + np.sum(A.translation**2)
    reg += sum(np.sum((a2.params() - _THETA_ID) ** 2) for a2 in per_slab)
    return data + ridge * reg


def objective(slabs, A, per_slab):
    """Weighted mean squared residual (RMS^2) over all foreground pixels.

    ``slabs`` is a sequence of coordinate maps aligned with ``per_slab``.
    """
    prepared = [_prepare(c, a2.plane_coord, None, subsample=False) for c, a2 in zip(slabs, per_slab)]
    num = sum(float(s.w @ _residual_sq(A, a2, s)) for s, a2 in zip(prepared, per_slab))
    den = sum(float(s.w.sum()) for s in prepared)
    return num / den


def _weighted_ms(A, per_slab, slabs):
    num = sum(float(s.w @ _residual_sq(A, a2, s)) for s, a2 in zip(slabs, per_slab))
    den = sum(float(s.w.sum()) for s in slabs)
    return num / den


def _component_rms(ms):
    # mean squared residual norm -> RMS per coordinate component
    return float(np.sqrt(ms / 3.0))


def _lift_plane_map(P, plane):
    """Global affine whose restriction to ``y = plane`` equals the 2D->3D map ``P``."""
    pu, pv, pt = P[:, 0], P[:, 1], P[:, 2]
    normal = np.cross(pv, pu)
    norm = np.linalg.norm(normal)
    if norm == 0:
        raise NumericalFailure("degenerate plane map")
    normal = normal / np.sqrt(norm)
    return Affine3(np.c_[pu, normal, pv], pt - normal * plane)


def initial_planes(s_values, init_mode="slice_index"):
    if init_mode == "identity":
        return [0.0 for _ in s_values]
    return [2.0 * float(s) - 1.0 for s in s_values]


def initial_result(s_values, init_mode="slice_index"):
    """Unreconstructed stack: identity global and in-plane transforms."""
    per_slab = [Affine2.identity(c) for c in initial_planes(s_values, init_mode)]
    A = Affine3.identity()
    comp = [compose_affine3(A, embed_affine2(a)) for a in per_slab]
    n = len(per_slab)
    return ReconResult(A, per_slab, comp, float("nan"), np.full(n, np.nan), 0, False,
                       excluded=[False] * n)


def reconstruct(coord_maps, s_values, cfg=None):
    """Fit the shared global affine and per-slab in-plane affines.

    ``coord_maps`` are :class:`~slabrecon.predict.CoordMap2D` objects and
    ``s_values`` their normalized slice indices. Slabs with fewer than
    ``cfg.min_pixels`` foreground pixels are left out of the global fit and only
    receive an in-plane fit against the final global affine.
    """
    cfg = cfg or ReconConfig()
    if len(coord_maps) != len(s_values):
        raise ValueError("need one slice index per coordinate map")
    if not coord_maps:
        raise InsufficientPoints("no slabs given")
    planes = initial_planes(s_values, cfg.init_mode)
    prepared = [_prepare(c, p, cfg) for c, p in zip(coord_maps, planes)]
    counts = [int(np.count_nonzero(c.pixel_weights())) for c in coord_maps]
    excluded = [n < cfg.min_pixels for n in counts]
    active = [i for i, ex in enumerate(excluded) if not ex]
    if not active:
        raise InsufficientPoints(f"no slab has {cfg.min_pixels} foreground pixels")
    warnings = [f"slab {i}: {counts[i]} foreground pixels, excluded from the global fit"
                for i in range(len(excluded)) if excluded[i]]
    for w in warnings:
        log.warning(w)

    per_slab = [Affine2.identity(p) for p in planes]
    slabs = [prepared[i] for i in active]
    history = []
    iterations = 0
    converged = False

    if len(active) == 1:
        i = active[0]
        s = slabs[0]
        P = fit_affine_ls(s.X, s.Y, s.w, cfg.ridge)
        A = _lift_plane_map(P, planes[i])
        iterations, converged = 1, True
    else:
        A = Affine3.identity()
        cur = [per_slab[i] for i in active]
        prev = None
        for it in range(1, cfg.max_iters + 1):
            A = _fit_global(slabs, cur, cfg.ridge)
            history.append(_penalized(A, cur, slabs, cfg.ridge))
            cur = [_fit_inplane(A, s, s.plane, cfg.ridge) for s in slabs]
            history.append(_penalized(A, cur, slabs, cfg.ridge))
            iterations = it
            rms = _component_rms(_weighted_ms(A, cur, slabs))
            if rms <= cfg.abs_tol or (
                prev is not None and abs(prev - rms) <= cfg.rel_tol * prev + cfg.abs_tol
            ):
                converged = True
                break
            prev = rms
        for i, a2 in zip(active, cur):
            per_slab[i] = a2
        for a, b in zip(history, history[1:]):
            if b > a * (1 + 1e-12) + 1e-300:
                warnings.append(f"objective increased from {a!r} to {b!r}")
                log.warning(warnings[-1])
                break

    for i, ex in enumerate(excluded):
        if ex:
            if counts[i] >= 3:
                per_slab[i] = _fit_inplane(A, prepared[i], planes[i], cfg.ridge)
    composite = [compose_affine3(A, embed_affine2(a2)) for a2 in per_slab]

    full = [_prepare(c, p, cfg, subsample=False) for c, p in zip(coord_maps, planes)]
    per_rms = np.array([
        _component_rms(float(s.w @ _residual_sq(A, a2, s)) / s.w.sum()) if s.w.sum() > 0 else np.nan
        for s, a2 in zip(full, per_slab)
    ])
    use = [full[i] for i in active]
    overall = _component_rms(_weighted_ms(A, [per_slab[i] for i in active], use))

    if cfg.init_mode == "slice_index" and len(active) > 1 and A.det() > 0:
        order = np.argsort(s_values, kind="stable")
        # transformed planes share A, so they are parallel; order them along
        # their common normal A^-T e_y
        normal = np.linalg.solve(A.linear.T, np.array([0.0, 1.0, 0.0]))
        ys = np.array([normal @ composite[i](np.array([0.0, planes[i], 0.0])) for i in order])
        if not np.all(np.diff(ys) > 0):
            warnings.append("transformed slab planes are not strictly ordered along y")
            log.warning(warnings[-1])

    return ReconResult(
        global_affine=A,
        per_slab=per_slab,
        composite=composite,
        residual_rms=float(overall),
        residual_rms_per_slab=per_rms,
        iterations=iterations,
        converged=converged,
        excluded=excluded,
        objective_history=history,
        warnings=warnings,
    )
