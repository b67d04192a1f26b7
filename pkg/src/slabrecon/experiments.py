"""Phantom-scale evaluation protocols: silver standard, partial stacks, ablation presets."""

import time

import numpy as np

from .assemble import OutputGrid, build_volume, project_labels
from .core import make_rng
from .metrics import dice, masked_mse, ssim3d, volume_mse
from .phantom import label_painting, make_phantom
from .predict import PredictorSpec, predict
from .recon import initial_result, reconstruct
from .synth import PRESETS, SynthConfig, generate_case, preset, slice_index

_PARTIAL_KEY = 99


def _paintings(case):
    return [label_painting(s.labels) for s in case.slabs]


def silver_standard(seed, size=96, cfg=None, recon_cfg=None, phantom=None, threads=1):
    """Reconstruct one synthetic case from its ground-truth coordinate maps.

    The assembled volume and the naive initial stack are both compared with
    the label painting of the source phantom in atlas space.
    """
    t0 = time.perf_counter()
    L, Y = phantom or make_phantom(size)
    cfg = cfg or SynthConfig()
    case = generate_case(L, Y, cfg, seed, threads=threads)
    maps = [predict(PredictorSpec(), s) for s in case.slabs]
    s_values = [s.s for s in case.slabs]
    res = reconstruct(maps, s_values, recon_cfg)
    grid = OutputGrid(L.dims)
    imgs = _paintings(case)
    recon = build_volume(imgs, res, grid)
    init = build_volume(imgs, initial_result(s_values), grid)
    ref = label_painting(L.data)
    return {
        "seed": int(seed),
        "n_slabs": len(case.slabs),
        "iterations": res.iterations,
        "residual_rms": res.residual_rms,
        "ssim_recon": ssim3d(recon, ref),
        "ssim_initial": ssim3d(init, ref),
        "mse_recon": volume_mse(recon, ref),
        "mse_initial": volume_mse(init, ref),
        "seconds": time.perf_counter() - t0,
    }


def partial_stack(seed, size=96, cfg=None, fraction=0.5, phantom=None, threads=1):
    """Drop a random subset of slabs and compare against the full reconstruction.

    The kept slabs are re-indexed as a contiguous stack (their gaps are
    unknown to the reconstruction), reconstructed, and also stacked naively
    from the same re-indexed slice numbers.
    """
    L, Y = phantom or make_phantom(size)
    case = generate_case(L, Y, cfg or SynthConfig(), seed, threads=threads)
    K = len(case.slabs)
    maps = [predict(PredictorSpec(), s) for s in case.slabs]
    imgs = _paintings(case)
    grid = OutputGrid(L.dims)
    full = build_volume(imgs, reconstruct(maps, [s.s for s in case.slabs]), grid)
    n_keep = max(1, int(round(fraction * K)))
    keep = np.sort(make_rng(seed, _PARTIAL_KEY).choice(K, n_keep, replace=False))
    s_part = [slice_index(i, n_keep) for i in range(1, n_keep + 1)]
    part_res = reconstruct([maps[i] for i in keep], s_part)
    part = build_volume([imgs[i] for i in keep], part_res, grid)
    naive = build_volume([imgs[i] for i in keep], initial_result(s_part), grid)
    return {
        "seed": int(seed),
        "n_slabs": K,
        "n_kept": n_keep,
        "mse_partial": volume_mse(part, full),
        "mse_naive": volume_mse(naive, full),
    }


def ablation_row(name, seed, size=96, noise_sigma=0.01, phantom=None, threads=1):
    """Synthesize one case with an ablation preset and score a noisy oracle on it.

    Coordinate MSE is in mm^2 (``mm_per_unit`` of the phantom); Dice compares
    atlas labels projected through the predicted coordinates with the slab's
    own labels, averaged over slabs and labels present.
    """
    L, Y = phantom or make_phantom(size)
    cfg = preset(name)
    case = generate_case(L, Y, cfg, seed, threads=threads)
    spec = PredictorSpec(oracle_noise_sigma=noise_sigma, seed=seed)
    scale = np.asarray(L.meta["mm_per_unit"], dtype=np.float64)
    mses, dices = [], []
    for slab in case.slabs:
        if not slab.mask.any():
            continue
        cmap = predict(spec, slab)
        mses.append(masked_mse(cmap.data, slab.coords_gt, slab.mask, scale=scale))
        proj = project_labels(cmap, L)
        labs = [int(v) for v in np.unique(slab.labels) if v != 0]
        dices.append(np.mean([dice(proj, slab.labels, lab) for lab in labs]))
    first = case.slabs[0].provenance
    return {
        "preset": name,
        "seed": int(seed),
        "n_slabs": len(case.slabs),
        "random_pose": cfg.random_pose,
        "deform": cfg.deform,
        "random_intensity": cfg.random_intensity,
        "crop_mode": cfg.crop_mode,
        "intensity": first.get("intensity"),
        "coord_mse_mm2": float(np.mean(mses)),
        "dice": float(np.mean(dices)),
    }


def ablation_table(seed=0, size=96, noise_sigma=0.01, threads=1):
    phantom = make_phantom(size)
    return [ablation_row(name, seed, size, noise_sigma, phantom, threads) for name in PRESETS]


def aggregate(rows, keys):
    """Mean and sample std of numeric columns across rows."""
    out = {}
    for key in keys:
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        out[key + "_mean"] = float(vals.mean())
        out[key + "_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return out


def format_table(rows, columns, floatfmt="{:.4f}"):
    """Fixed-width text table."""
    cells = [[c for c in columns]]
    for r in rows:
        cells.append([
            floatfmt.format(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns
        ])
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)

