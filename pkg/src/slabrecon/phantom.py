"""Built-in multi-label geometric phantom (nested, off-center ellipsoids).

The phantom is its own atlas: its coordinate field maps every voxel to its own
normalized position, so atlas space and volume space coincide.
"""

import numpy as np

from .core import Volume3D, voxel_grid

# (label, center, semi-axes); later entries overwrite earlier ones
ELLIPSOIDS = (
    (1, (0.00, 0.03, 0.00), (0.72, 0.65, 0.59)),
    (2, (0.01, 0.04, 0.03), (0.57, 0.52, 0.45)),
    (3, (-0.26, 0.08, 0.05), (0.17, 0.26, 0.14)),
    (4, (0.27, 0.03, 0.08), (0.16, 0.22, 0.16)),
    (5, (0.00, -0.20, -0.07), (0.16, 0.18, 0.13)),
    (6, (0.03, 0.36, 0.18), (0.20, 0.09, 0.12)),
    (7, (0.12, -0.39, 0.16), (0.12, 0.10, 0.14)),
    (8, (-0.07, 0.13, -0.31), (0.26, 0.12, 0.08)),
)


def make_phantom(size=96, spacing=2.0):
    """Return ``(labels, coords)`` volumes of shape ``size``^3."""
    dims = (size, size, size)
    grid = voxel_grid(dims)
    labels = np.zeros(dims, dtype=np.int32)
    for lab, center, axes in ELLIPSOIDS:
        r = (grid - np.asarray(center)) / np.asarray(axes)
        labels[np.einsum("...i,...i->...", r, r) <= 1.0] = lab
    sp = (float(spacing),) * 3
    L = Volume3D(labels, spacing=sp, kind="label", meta={"source": "phantom"})
    Y = Volume3D(grid, spacing=sp, kind="coordinates", meta={"source": "phantom"})
    return L, Y


def label_painting(labels, n_labels=8):
    """Deterministic grey-level painting of a label map (label / n_labels)."""
    return np.asarray(labels, dtype=np.float64) / float(n_labels)
