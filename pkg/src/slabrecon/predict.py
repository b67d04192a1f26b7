"""Coordinate predictors: file-backed maps and a noisy ground-truth oracle.

A predictor turns a slab ``(image, s)`` into a per-pixel map of normalized
atlas coordinates. Trained networks run out of process and hand their output
over as coordinate-map files; the oracle perturbs synthetic ground truth.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import COORD_SENTINEL, make_rng
from .errors import AllBackground, DimMismatch, MissingGroundTruth, NonpositivePixelSize

LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True, eq=False)
class CoordMap2D:
    """Per-pixel atlas coordinates ``data[u, v] -> (x, y, z)`` with a validity mask.

    Background pixels hold the sentinel ``(-2, -2, -2)``. ``weights`` are
    per-pixel confidences; ``None`` means 1 on the mask.
    """

    data: np.ndarray
    mask: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        mask = np.asarray(self.mask, dtype=bool)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"coordinate map must be (w, h, 3), got {data.shape}")
        if mask.shape != data.shape[:2]:
            raise DimMismatch(f"mask {mask.shape} does not match map {data.shape[:2]}")
        if not np.all(np.isfinite(data[mask])):
            raise ValueError("coordinate map has non-finite foreground values")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != mask.shape or np.any(w < 0):
                raise ValueError("weights must be non-negative and match the mask")
            object.__setattr__(self, "weights", w)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    @property
    def dims(self):
        return tuple(self.mask.shape)

    @classmethod
    def from_array(cls, data, mask=None):
        """Wrap an array, deriving the mask from the sentinel when not given."""
        data = np.asarray(data)
        if mask is None:
            mask = ~np.all(data == COORD_SENTINEL, axis=-1)
        return cls(data, mask)

    def pixel_weights(self):
        if self.weights is None:
            return self.mask.astype(np.float64)
        return np.where(self.mask, self.weights, 0.0)


@dataclass(frozen=True)
class PredictorSpec:
    """``kind`` is ``"file_backed"`` or ``"oracle"``.

    ``path_template`` may contain ``{case}`` and ``{k}`` placeholders.
    """

    kind: str = "oracle"
    oracle_noise_sigma: float = 0.0
    oracle_bias: Optional[tuple] = None
    path_template: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("file_backed", "oracle"):
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if self.oracle_noise_sigma < 0:
            raise ValueError("oracle_noise_sigma must be >= 0")
        if self.kind == "file_backed" and not self.path_template:
            raise ValueError("file_backed predictor needs a path template")

    @classmethod
    def parse(cls, text, seed=0):
        """Parse the CLI form ``oracle:<sigma>`` or a file path template."""
        if text.startswith("oracle"):
            _, _, sigma = text.partition(":")
            return cls(kind="oracle", oracle_noise_sigma=float(sigma or 0.0), seed=seed)
        return cls(kind="file_backed", path_template=text, seed=seed)


def predict(spec, slab, case="case"):
    """Coordinate map for one slab.

    The oracle adds iid Gaussian noise (and an optional constant bias) to the
    slab's ground truth on foreground pixels only; draws are keyed by
    ``(spec.seed, slab.k)``.
    """
    mask = np.asarray(slab.mask, dtype=bool)
    if spec.kind == "file_backed":
        from .io import read_coordmap

        path = Path(spec.path_template.format(case=case, k=slab.k))
        if not path.exists() and not Path(str(path) + ".hdr").exists():
            raise FileNotFoundError(str(path))
        cmap = read_coordmap(path)
        if cmap.dims != mask.shape:
            raise DimMismatch(f"coordinate file {path} is {cmap.dims}, slab is {mask.shape}")
        return cmap
    if slab.coords_gt is None:
        raise MissingGroundTruth(f"slab {slab.k} has no ground-truth coordinates")
    gt = np.asarray(slab.coords_gt, dtype=np.float64)
    if gt.shape[:2] != mask.shape:
        raise DimMismatch("ground truth does not match the slab mask")
    out = np.full(gt.shape, COORD_SENTINEL)
    out[mask] = gt[mask]
    if spec.oracle_noise_sigma > 0:
        rng = make_rng(spec.seed, slab.k)
        out[mask] += spec.oracle_noise_sigma * rng.standard_normal((int(mask.sum()), 3))
    if spec.oracle_bias is not None:
        out[mask] += np.asarray(spec.oracle_bias, dtype=np.float64)
    return CoordMap2D(out, mask)


def to_grayscale(raw):
    """Luminance of an RGB image (w, h, 3); single-channel input passes through."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 2:
        return raw
    if raw.ndim == 3 and raw.shape[2] == 1:
        return raw[..., 0]
    if raw.ndim == 3 and raw.shape[2] in (3, 4):
        return raw[..., :3] @ LUMA
    raise ValueError(f"unsupported image shape {raw.shape}")


def preprocess_photo(raw, pixel_size, mask, k=1, K=1, target_pixel_size=None):
    """Prepare a real photograph for prediction.

    Grayscale conversion, min-max normalization over the foreground,
    resampling from ``pixel_size`` to ``target_pixel_size`` mm/pixel, and
    background zeroing. ``k`` is the 1-based posterior-to-anterior position in
    a stack of ``K``. Returns a :class:`~slabrecon.synth.SlabSample` without
    ground truth.
    """
    from .synth import SlabSample, slice_index

    if not pixel_size > 0 or (target_pixel_size is not None and not target_pixel_size > 0):
        raise NonpositivePixelSize(f"pixel size must be positive, got {pixel_size}")
    gray = to_grayscale(raw)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != gray.shape:
        raise DimMismatch(f"mask {mask.shape} does not match image {gray.shape}")
    if target_pixel_size is not None and target_pixel_size != pixel_size:
        factor = pixel_size / target_pixel_size
        gray = ndimage.zoom(gray, factor, order=1, mode="nearest", grid_mode=True)
        mask = ndimage.zoom(mask.astype(np.uint8), factor, order=0, mode="nearest",
                            grid_mode=True).astype(bool)
    if not mask.any():
        raise AllBackground("photograph has no foreground pixels")
    fg = gray[mask]
    lo, hi = float(fg.min()), float(fg.max())
    img = np.zeros_like(gray)
    if hi > lo:
        img[mask] = (fg - lo) / (hi - lo)
    return SlabSample(
        image=img,
        mask=mask,
        coords_gt=None,
        s=slice_index(k, K),
        k=k,
        K=K,
        provenance={"pixel_size": float(target_pixel_size or pixel_size),
                    "source_pixel_size": float(pixel_size)},
    )


def order_stack(samples):
    """Reassign ``k``, ``K`` and ``s`` following the given posterior-to-anterior order."""
    from .synth import slice_index

    K = len(samples)
    return [s.replace(k=i, K=K, s=slice_index(i, K)) for i, s in enumerate(samples, start=1)]
