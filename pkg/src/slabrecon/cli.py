"""Command-line driver: ``slabrecon <subcommand> ...``.

Exit codes: 0 success, 1 data error, 2 usage error. Every successful run
writes ``manifest.json`` into its ``--out`` directory.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import SlabReconError

VERSION = "0.1.0"
THREADS_ENV = "SLABRECON_THREADS"
log = logging.getLogger("slabrecon")


class UsageError(Exception):
    pass


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _volume_files(path):
    hdr, raw = io._volume_paths(path)
    return [hdr, raw]


def _threads(args):
    if args.threads is not None:
        n = args.threads
    else:
        try:
            n = int(os.environ.get(THREADS_ENV, "1"))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer")
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _snapshot(args):
    out = {}
    for k, v in vars(args).items():
        if k == "func":
            continue
        out[k] = v if isinstance(v, (int, float, str, bool, type(None), list)) else str(v)
    return out


def write_manifest(out_dir, args, inputs, outputs, config=None, seed=None):
    """Atomically write the run manifest listing input and output digests."""
    out_dir = Path(out_dir)
    manifest = {
        "tool": "slabrecon",
        "version": VERSION,
        "subcommand": args.command,
        "argv": _snapshot(args),
        "config": config,
        "seed": seed,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": {str(Path(p).relative_to(out_dir)): _digest(p) for p in sorted(outputs)},
    }
    path = out_dir / "manifest.json"
    io.atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return path


def _report(out_dir, name, values, title):
    """Fixed-width human report on stdout plus a flat key/value document."""
    width = max(len(k) for k in values)
    lines = [title, "-" * len(title)]
    for k, v in values.items():
        lines.append(f"{k.ljust(width)}  {io._fmt_value(v)}")
    print("\n".join(lines))
    path = Path(out_dir) / name
    io.write_kv(path, values)
    return path


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_synth_config(args):
    from .synth import SynthConfig, preset

    base = preset(args.preset).to_dict() if getattr(args, "preset", None) else {}
    if args.config:
        try:
            base.update(io.read_kv(args.config))
        except KeyError as exc:
            raise SlabReconError(str(exc))
    try:
        return SynthConfig.from_mapping(base)
    except KeyError as exc:
        raise SlabReconError(f"{args.config}: {exc.args[0]}")


def _load_recon_config(path):
    from .recon import ReconConfig

    if not path:
        return ReconConfig()
    try:
        return ReconConfig.from_mapping(io.read_kv(path))
    except KeyError as exc:
        raise SlabReconError(f"{path}: {exc.args[0]}")


# -- stack directories ---------------------------------------------------------

def _slab_stem(k):
    return f"slab_{k:03d}"


def write_stack(out, case, case_name="case"):
    """Write every slab as image/mask/labels PGMs, a coordinate map and a sidecar."""
    out = Path(out)
    written = []
    for slab in case.slabs:
        stem = out / _slab_stem(slab.k)
        img16, scale = io.quantize16(slab.image)
        io.write_image(f"{stem}_image.pgm", img16, maxval=65535)
        io.write_mask(f"{stem}_mask.pgm", slab.mask)
        io.write_image(f"{stem}_labels.pgm", slab.labels.astype(np.uint16), maxval=65535)
        written += [Path(f"{stem}_image.pgm"), Path(f"{stem}_mask.pgm"), Path(f"{stem}_labels.pgm")]
        if slab.coords_gt is not None:
            from .predict import CoordMap2D

            written += io.write_coordmap(f"{stem}_coords", CoordMap2D(slab.coords_gt, slab.mask))
        prov = slab.provenance
        meta = {
            "k": slab.k,
            "K": slab.K,
            "s": slab.s,
            "dims": slab.dims,
            "image_scale": scale,
            "plane_index": slab.plane_index if slab.plane_index is not None else -1,
            "deform_sigma": prov.get("deform_sigma", 0.0),
            "crop_mode": prov.get("crop_mode", "none"),
            "crop_box": prov.get("crop_box", (0, 0) + slab.dims),
            "intensity": prov.get("intensity", "none"),
            "illum_sigma": prov.get("illum_sigma", 0.0),
        }
        io.write_kv(f"{stem}.txt", meta)
        written.append(Path(f"{stem}.txt"))
    stack = {"case": case_name, "n_slabs": len(case.slabs)}
    if case.pose is not None:
        stack["pose"] = case.pose.matrix()
    if case.provenance.get("seed") is not None:
        stack["seed"] = case.provenance["seed"]
    io.write_kv(out / "stack.txt", stack)
    written.append(out / "stack.txt")
    return written


def read_stack(stack_dir):
    """Load slabs written by :func:`write_stack` (images rescaled to float)."""
    from .synth import SlabSample

    stack_dir = Path(stack_dir)
    if not (stack_dir / "stack.txt").exists():
        raise SlabReconError(f"{stack_dir}: no stack.txt")
    info = io.read_kv(stack_dir / "stack.txt")
    slabs, inputs = [], [stack_dir / "stack.txt"]
    for k in range(1, int(info["n_slabs"]) + 1):
        stem = stack_dir / _slab_stem(k)
        meta = io.read_kv(f"{stem}.txt")
        img = io.read_image(f"{stem}_image.pgm").data.astype(np.float64) * float(meta["image_scale"])
        mask = io.read_mask(f"{stem}_mask.pgm")
        labels = io.read_image(f"{stem}_labels.pgm").data.astype(np.int32)
        inputs += [Path(f"{stem}.txt"), Path(f"{stem}_image.pgm"), Path(f"{stem}_mask.pgm"),
                   Path(f"{stem}_labels.pgm")]
        coords = None
        if Path(f"{stem}_coords.hdr").exists():
            cmap = io.read_coordmap(f"{stem}_coords")
            coords = np.asarray(cmap.data, dtype=np.float64)
            inputs += _volume_files(f"{stem}_coords")
        slabs.append(SlabSample(image=img, mask=mask, coords_gt=coords, s=float(meta["s"]),
                                k=int(meta["k"]), K=int(meta["K"]), labels=labels))
    return info.get("case", stack_dir.name), slabs, inputs


# -- subcommands ---------------------------------------------------------------

def run_phantom(args):
    from .phantom import make_phantom

    out = _out_dir(args)
    L, Y = make_phantom(args.size, args.spacing)
    files = io.write_volume(out / "labels", L, dtype="i16") + io.write_volume(out / "coords", Y, dtype="f32")
    files = list(files)
    write_manifest(out, args, [], files)
    print(f"phantom {args.size}^3 written to {out}")
    return 0


def run_synth(args):
    from .synth import generate_case

    out = _out_dir(args)
    cfg = _load_synth_config(args)
    inputs = []
    if args.labels:
        if not args.coords:
            raise UsageError("--labels requires --coords")
        L, Y = io.read_volume(args.labels), io.read_volume(args.coords)
        inputs = _volume_files(args.labels) + _volume_files(args.coords)
        if L.kind != "label":
            L = L.replace(np.asarray(L.data).astype(np.int32), kind="label")
    else:
        from .phantom import make_phantom

        L, Y = make_phantom(args.phantom_size)
    case = generate_case(L, Y, cfg, args.seed, threads=_threads(args))
    files = write_stack(out, case, args.case)
    io.write_kv(out / "config.txt", cfg.to_dict())
    files.append(out / "config.txt")
    values = {"case": args.case, "seed": args.seed, "n_slabs": len(case.slabs),
              "pose_det": case.pose.det()}
    files.append(_report(out, "report.txt", values, "synth"))
    if args.config:
        inputs.append(Path(args.config))
    write_manifest(out, args, inputs, files, cfg.to_dict(), args.seed)
    return 0


def _predict_all(spec, slabs, case):
    from .predict import predict

    return [predict(spec, s, case=case) for s in slabs]


def run_predict(args):
    from .predict import PredictorSpec

    out = _out_dir(args)
    case, slabs, inputs = read_stack(args.stack)
    spec = PredictorSpec.parse(args.coords, seed=args.seed)
    files = []
    for slab, cmap in zip(slabs, _predict_all(spec, slabs, case)):
        files += io.write_coordmap(out / f"{_slab_stem(slab.k)}_pred", cmap)
    write_manifest(out, args, inputs, files, {"predictor": args.coords}, args.seed)
    print(f"{len(slabs)} coordinate maps written to {out}")
    return 0


def run_reconstruct(args):
    from .assemble import OutputGrid, build_volume
    from .predict import PredictorSpec
    from .recon import reconstruct

    out = _out_dir(args)
    case, slabs, inputs = read_stack(args.stack)
    spec = PredictorSpec.parse(args.coords, seed=args.seed)
    cfg = _load_recon_config(args.config)
    maps = _predict_all(spec, slabs, case)
    res = reconstruct(maps, [s.s for s in slabs], cfg)
    grid = OutputGrid((args.grid,) * 3)
    vol = build_volume(slabs, res, grid, mm_per_unit=args.mm_per_unit)
    files = list(io.write_volume(out / "volume", vol.replace(vol.data.astype(np.float32)), dtype="f32"))
    doc = {
        "global": res.global_affine.matrix(),
        "iterations": res.iterations,
        "converged": res.converged,
        "residual_rms": res.residual_rms,
        "n_slabs": len(slabs),
        "n_excluded": int(sum(res.excluded)),
    }
    for i, (a2, r) in enumerate(zip(res.per_slab, res.residual_rms_per_slab), start=1):
        doc[f"slab_{i:03d}_inplane"] = a2.params()
        doc[f"slab_{i:03d}_plane"] = a2.plane_coord
        doc[f"slab_{i:03d}_residual_rms"] = float(r)
    io.write_kv(out / "result.txt", doc)
    files.append(out / "result.txt")
    values = {"case": case, "n_slabs": len(slabs), "iterations": res.iterations,
              "converged": res.converged, "residual_rms": res.residual_rms,
              "warnings": len(res.warnings)}
    files.append(_report(out, "report.txt", values, "reconstruct"))
    if args.config:
        inputs.append(Path(args.config))
    write_manifest(out, args, inputs, files, cfg.to_dict(), args.seed)
    return 0


_PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
], dtype=np.float64)


def write_overlay(path, gray, labels, alpha=0.5):
    """Binary PPM (P6) blending a grey image with colour-coded labels."""
    g = np.asarray(gray, dtype=np.float64)
    top = g.max() if g.size and g.max() > 0 else 1.0
    base = np.repeat((g / top * 255.0)[..., None], 3, axis=-1)
    col = _PALETTE[np.asarray(labels) % len(_PALETTE)]
    fg = (np.asarray(labels) != 0)[..., None]
    rgb = np.where(fg, (1 - alpha) * base + alpha * col, base)
    rgb = np.clip(np.round(rgb), 0, 255).astype(np.uint8)
    w, h = rgb.shape[:2]
    raster = np.ascontiguousarray(rgb.transpose(1, 0, 2))
    io.atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + raster.tobytes())


def run_segment(args):
    from .assemble import project_labels

    out = _out_dir(args)
    photo = io.read_image(args.photo)
    cmap = io.read_coordmap(args.coords)
    atlas = io.read_volume(args.atlas)
    if atlas.kind != "label":
        atlas = atlas.replace(np.asarray(atlas.data).astype(np.int32), kind="label")
    mask = io.read_mask(args.mask) if args.mask else None
    if photo.dims != cmap.dims:
        raise SlabReconError(f"photo {photo.dims} and coordinates {cmap.dims} differ in size")
    labels = project_labels(cmap, atlas, mask)
    files = [out / "labels.pgm", out / "overlay.ppm"]
    io.write_image(files[0], labels.astype(np.uint16), maxval=65535)
    write_overlay(files[1], photo.data, labels)
    present = sorted(int(v) for v in np.unique(labels) if v != 0)
    values = {"foreground_pixels": int((labels != 0).sum()), "labels": present or "none"}
    files.append(_report(out, "report.txt", values, "segment"))
    inputs = [Path(args.photo)] + _volume_files(args.coords) + _volume_files(args.atlas)
    if args.mask:
        inputs.append(Path(args.mask))
    write_manifest(out, args, inputs, files)
    return 0


def run_evaluate(args):
    from .experiments import format_table
    from .metrics import dice, relative_volume_diff, ssim3d, structure_volumes, volume_mse

    out = _out_dir(args)
    if len(args.pred) != len(args.ref):
        raise UsageError("--pred and --ref need the same number of volumes")
    rows, files, inputs = [], [], []
    for i, (p, r) in enumerate(zip(args.pred, args.ref), start=1):
        pv, rv = io.read_volume(p), io.read_volume(r)
        inputs += _volume_files(p) + _volume_files(r)
        row = {"case": Path(p).name}
        if pv.kind == "label" and rv.kind == "label":
            labs = sorted(set(np.unique(rv.data).tolist()) - {0})
            dices = [dice(pv.data, rv.data, lab) for lab in labs]
            va, vb = structure_volumes(pv), structure_volumes(rv)
            for lab, d in zip(labs, dices):
                row[f"dice_{lab}"] = d
                row[f"rvd_{lab}"] = relative_volume_diff(va, vb, lab)
            row["dice_mean"] = float(np.mean(dices)) if dices else 1.0
        else:
            row["mse"] = volume_mse(pv, rv)
            row["ssim"] = ssim3d(pv, rv)
        path = out / f"case_{i:03d}.txt"
        io.write_kv(path, row)
        files.append(path)
        rows.append(row)
    cols = [c for c in rows[0] if all(c in r for r in rows)]
    table = format_table(rows, cols)
    print(table)
    io.atomic_write_bytes(out / "table.txt", (table + "\n").encode())
    files.append(out / "table.txt")
    write_manifest(out, args, inputs, files)
    return 0


def run_experiment(args):
    from . import experiments as ex
    from .phantom import make_phantom

    out = _out_dir(args)
    phantom = make_phantom(args.size)
    threads = _threads(args)
    seeds = list(range(args.seed, args.seed + args.seeds))
    if args.protocol == "silver":
        rows = [ex.silver_standard(s, args.size, phantom=phantom, threads=threads) for s in seeds]
        cols = ["seed", "n_slabs", "residual_rms", "mse_initial", "mse_recon", "ssim_initial",
                "ssim_recon"]
        summary = ex.aggregate(rows, ["mse_initial", "mse_recon", "ssim_initial", "ssim_recon"])
    elif args.protocol == "partial":
        rows = [ex.partial_stack(s, args.size, phantom=phantom, threads=threads) for s in seeds]
        cols = ["seed", "n_slabs", "n_kept", "mse_partial", "mse_naive"]
        summary = ex.aggregate(rows, ["mse_partial", "mse_naive"])
        summary["partial_better"] = sum(r["mse_partial"] < r["mse_naive"] for r in rows)
    else:
        rows = ex.ablation_table(args.seed, args.size, args.noise, threads)
        cols = ["preset", "random_intensity", "deform", "random_pose", "crop_mode", "n_slabs",
                "coord_mse_mm2", "dice"]
        summary = {f"{r['preset']}_{k}": r[k] for r in rows for k in ("coord_mse_mm2", "dice")}
    table = ex.format_table(rows, cols, "{:.6g}")
    print(table)
    files = [out / "table.txt"]
    io.atomic_write_bytes(files[0], (table + "\n").encode())
    files.append(_report(out, "summary.txt", summary, f"experiment {args.protocol}"))
    write_manifest(out, args, [], files, seed=args.seed)
    return 0


# -- parser ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="slabrecon", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"slabrecon {VERSION}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, seed=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker cap (default ${THREADS_ENV} or 1)")
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("phantom", help="write the nested-ellipsoid phantom")
    sp.add_argument("--size", type=int, default=96)
    sp.add_argument("--spacing", type=float, default=2.0)
    common(sp, seed=False)
    sp.set_defaults(func=run_phantom)

    sp = sub.add_parser("synth", help="generate a synthetic slab stack")
    sp.add_argument("--labels", help="label volume (.hdr); default: built-in phantom")
    sp.add_argument("--coords", help="coordinate volume (.hdr)")
    sp.add_argument("--phantom-size", type=int, default=96)
    sp.add_argument("--config", help="key/value SynthConfig overrides")
    sp.add_argument("--preset", choices=["baseline", "A", "B", "C", "D", "E"])
    sp.add_argument("--case", default="case")
    common(sp)
    sp.set_defaults(func=run_synth)

    sp = sub.add_parser("predict", help="write coordinate maps for a stack")
    sp.add_argument("--stack", required=True)
    sp.add_argument("--coords", required=True, help="oracle:<sigma> or a path template")
    common(sp)
    sp.set_defaults(func=run_predict)

    sp = sub.add_parser("reconstruct", help="fit transforms and assemble a volume")
    sp.add_argument("--stack", required=True)
    sp.add_argument("--coords", required=True, help="oracle:<sigma> or a path template")
    sp.add_argument("--config", help="key/value ReconConfig overrides")
    sp.add_argument("--grid", type=int, default=96, help="output voxels per axis")
    sp.add_argument("--mm-per-unit", type=float, default=1.0)
    common(sp)
    sp.set_defaults(func=run_reconstruct)

    sp = sub.add_parser("segment", help="project atlas labels onto one photograph")
    sp.add_argument("--photo", required=True, help="PGM image")
    sp.add_argument("--coords", required=True, help="coordinate map (.hdr)")
    sp.add_argument("--atlas", required=True, help="atlas label volume (.hdr)")
    sp.add_argument("--mask", help="PGM foreground mask")
    common(sp, seed=False)
    sp.set_defaults(func=run_segment)

    sp = sub.add_parser("evaluate", help="compare volumes (MSE/SSIM or Dice/volumes)")
    sp.add_argument("--pred", nargs="+", required=True)
    sp.add_argument("--ref", nargs="+", required=True)
    common(sp, seed=False)
    sp.set_defaults(func=run_evaluate)

    sp = sub.add_parser("experiment", help="phantom-scale evaluation tables")
    sp.add_argument("protocol", choices=["silver", "partial", "ablation"])
    sp.add_argument("--size", type=int, default=96)
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--noise", type=float, default=0.01, help="oracle sigma for ablation")
    common(sp)
    sp.set_defaults(func=run_experiment)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"slabrecon: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"slabrecon {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (SlabReconError, OSError, ValueError, KeyError) as exc:
        print(f"slabrecon {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
