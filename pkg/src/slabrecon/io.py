"""File formats: raw+sidecar volumes, PGM images, coordinate maps, NIfTI-1 import.

Byte-level layouts are documented in FORMATS.md at the repository root.
"""

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .core import COORD_SENTINEL, Image2D, Volume3D
from .errors import (
    CorruptFile,
    CorruptHeader,
    LengthMismatch,
    UnsupportedDtype,
    UnsupportedNifti,
)

VOLUME_FORMAT = "slabrecon-volume"
VOLUME_VERSION = "1"
DTYPES = {"u8": np.dtype("<u1"), "i16": np.dtype("<i2"), "f32": np.dtype("<f4")}
_HEADER_KEYS = {"format", "version", "dims", "spacing", "channels", "dtype", "kind",
                "byte_order", "affine", "mm_per_unit"}
_REQUIRED = ("format", "version", "dims", "spacing", "channels", "dtype", "kind", "byte_order")


# -- key/value documents -----------------------------------------------------

def parse_kv(text, allowed=None, source="document"):
    """Parse ``key = value`` lines; ``#`` starts a comment. Order-insensitive."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise CorruptHeader(f"{source}:{lineno}: expected 'key = value'")
        if key in out:
            raise CorruptHeader(f"{source}:{lineno}: duplicate key {key!r}")
        if allowed is not None and key not in allowed:
            raise CorruptHeader(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def format_kv(mapping):
    lines = []
    for key, value in mapping.items():
        lines.append(f"{key} = {_fmt_value(value)}")
    return "\n".join(lines) + "\n"


def _fmt_value(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, np.ndarray):
        return " ".join(_fmt_value(v) for v in value.ravel().tolist())
    if isinstance(value, (tuple, list)):
        return " ".join(_fmt_value(v) for v in value)
    return str(value)


def read_kv(path, allowed=None):
    return parse_kv(Path(path).read_text(), allowed, source=str(path))


def atomic_write_bytes(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-" + path.name)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_kv(path, mapping):
    atomic_write_bytes(path, format_kv(mapping).encode())


def _floats(text, n=None, key="value"):
    try:
        vals = [float(v) for v in text.split()]
    except ValueError as exc:
        raise CorruptHeader(f"{key}: {exc}") from exc
    if n is not None and len(vals) != n:
        raise CorruptHeader(f"{key}: expected {n} numbers, got {len(vals)}")
    return vals


# -- raw + sidecar volumes ---------------------------------------------------

def _volume_paths(path):
    p = Path(path)
    if p.suffix in (".hdr", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".hdr"), p.with_name(p.name + ".raw")


def _dtype_code(arr_dtype):
    for code, dt in DTYPES.items():
        if np.dtype(arr_dtype).newbyteorder("<") == dt:
            return code
    return None


def write_volume(path, vol, dtype=None):
    """Write ``vol`` as ``<path>.hdr`` (key/value text) and ``<path>.raw``.

    The payload is little-endian with channels fastest, then x, y, z.
    ``dtype`` (``u8``, ``i16``, ``f32``) casts the data; without it the array
    dtype must already be one of those.
    """
    hdr, raw = _volume_paths(path)
    data = vol.data
    if dtype is None:
        code = _dtype_code(data.dtype)
        if code is None:
            raise UnsupportedDtype(f"array dtype {data.dtype} is not u8/i16/f32; pass dtype=")
    else:
        if dtype not in DTYPES:
            raise UnsupportedDtype(f"dtype {dtype!r} not in {sorted(DTYPES)}")
        code = dtype
        if np.issubdtype(DTYPES[code], np.integer):
            info = np.iinfo(DTYPES[code])
            if data.size and (data.min() < info.min or data.max() > info.max):
                raise UnsupportedDtype(f"values do not fit in {code}")
    arr = np.asarray(data).astype(DTYPES[code], copy=False)
    if arr.ndim == 3:
        arr = arr[..., None]
    payload = np.ascontiguousarray(arr.transpose(2, 1, 0, 3)).tobytes()
    header = {
        "format": VOLUME_FORMAT,
        "version": VOLUME_VERSION,
        "dims": vol.dims,
        "spacing": vol.spacing,
        "channels": vol.channels,
        "dtype": code,
        "kind": vol.kind,
        "byte_order": "little",
    }
    if vol.affine is not None:
        header["affine"] = vol.affine
    if "mm_per_unit" in vol.meta:
        header["mm_per_unit"] = tuple(vol.meta["mm_per_unit"])
    atomic_write_bytes(raw, payload)
    atomic_write_bytes(hdr, format_kv(header).encode())
    return hdr, raw


def read_volume(path):
    hdr_path, raw_path = _volume_paths(path)
    try:
        text = hdr_path.read_text()
    except UnicodeDecodeError as exc:
        raise CorruptHeader(f"{hdr_path}: not a text header") from exc
    h = parse_kv(text, _HEADER_KEYS, source=str(hdr_path))
    missing = [k for k in _REQUIRED if k not in h]
    if missing:
        raise CorruptHeader(f"{hdr_path}: missing keys {missing}")
    if h["format"] != VOLUME_FORMAT or h["version"] != VOLUME_VERSION:
        raise CorruptHeader(f"{hdr_path}: unsupported format {h['format']} v{h['version']}")
    if h["byte_order"] != "little":
        raise CorruptHeader(f"{hdr_path}: byte_order must be little")
    if h["dtype"] not in DTYPES:
        raise UnsupportedDtype(f"{hdr_path}: dtype {h['dtype']!r}")
    try:
        dims = tuple(int(v) for v in h["dims"].split())
        channels = int(h["channels"])
    except ValueError as exc:
        raise CorruptHeader(f"{hdr_path}: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1 or channels not in (1, 3):
        raise CorruptHeader(f"{hdr_path}: bad dims/channels")
    spacing = _floats(h["spacing"], 3, "spacing")
    dt = DTYPES[h["dtype"]]
    payload = raw_path.read_bytes()
    expected = int(np.prod(dims)) * channels * dt.itemsize
    if len(payload) != expected:
        raise LengthMismatch(f"{raw_path}: {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=dt).reshape(dims[2], dims[1], dims[0], channels)
    arr = arr.transpose(2, 1, 0, 3)
    if channels == 1:
        arr = arr[..., 0]
    arr = np.ascontiguousarray(arr.astype(dt.newbyteorder("="), copy=False))
    affine = np.array(_floats(h["affine"], 16, "affine")).reshape(4, 4) if "affine" in h else None
    meta = {}
    if "mm_per_unit" in h:
        meta["mm_per_unit"] = tuple(_floats(h["mm_per_unit"], 3, "mm_per_unit"))
    try:
        return Volume3D(arr, spacing=tuple(spacing), kind=h["kind"], affine=affine, meta=meta)
    except ValueError as exc:
        raise CorruptHeader(f"{hdr_path}: {exc}") from exc


# -- coordinate maps -----------------------------------------------------------

def write_coordmap(path, cmap):
    """Store a coordinate map as a (w, h, 1) 3-channel f32 volume; background = sentinel."""
    data = np.array(cmap.data, dtype=np.float32)
    data[~cmap.mask] = COORD_SENTINEL
    vol = Volume3D(data[:, :, None, :], spacing=(1.0, 1.0, 1.0), kind="coordinates")
    return write_volume(path, vol, dtype="f32")


def read_coordmap(path):
    from .predict import CoordMap2D

    vol = read_volume(path)
    if vol.kind != "coordinates" or vol.channels != 3 or vol.dims[2] != 1:
        raise CorruptFile(f"{path}: not a coordinate map")
    return CoordMap2D.from_array(vol.data[:, :, 0, :])


# -- PGM images ------------------------------------------------------------------

def write_image(path, data, maxval=None):
    """Binary PGM (P5). ``data[u, v]`` is written with u along rows' columns.

    Integer data only; 8-bit when ``maxval < 256``, 16-bit big-endian otherwise.
    """
    data = np.asarray(getattr(data, "data", data))
    if data.ndim != 2:
        raise ValueError("PGM images must be 2D")
    if data.dtype == bool:
        data = data.astype(np.uint8) * (255 if maxval is None else maxval)
    if not np.issubdtype(data.dtype, np.integer):
        raise UnsupportedDtype("PGM images need integer data; quantize first")
    if maxval is None:
        maxval = 255 if data.dtype.itemsize == 1 else 65535
    if not 0 < maxval < 65536:
        raise ValueError("maxval must be in 1..65535")
    if data.size and (data.min() < 0 or data.max() > maxval):
        raise ValueError("pixel values out of range for maxval")
    w, h = data.shape
    raster = data.T.astype(">u1" if maxval < 256 else ">u2")
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    atomic_write_bytes(path, header + raster.tobytes())


def _pgm_tokens(buf):
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise CorruptFile("truncated PGM header")
        tokens.append(buf[i:j])
        i = j
    return tokens, i + 1


def read_image_with_maxval(path):
    buf = Path(path).read_bytes()
    try:
        tokens, offset = _pgm_tokens(buf)
        if tokens[0] != b"P5":
            raise CorruptFile(f"{path}: not a binary PGM")
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise CorruptFile(f"{path}: bad PGM dimensions")
    dt = np.dtype(">u1" if maxval < 256 else ">u2")
    body = buf[offset:]
    if len(body) != w * h * dt.itemsize:
        raise CorruptFile(f"{path}: {len(body)} payload bytes, expected {w * h * dt.itemsize}")
    raster = np.frombuffer(body, dtype=dt).reshape(h, w)
    native = np.uint8 if maxval < 256 else np.uint16
    data = np.ascontiguousarray(raster.T.astype(native))
    if data.max(initial=0) > maxval:
        raise CorruptFile(f"{path}: pixel exceeds maxval")
    return Image2D(data), maxval


def read_image(path):
    return read_image_with_maxval(path)[0]


def read_mask(path):
    """Read a PGM mask; values must be 0 or maxval."""
    img, maxval = read_image_with_maxval(path)
    vals = np.unique(img.data)
    if not set(vals.tolist()) <= {0, maxval}:
        raise CorruptFile(f"{path}: mask values must be 0 or {maxval}")
    return img.data == maxval


def write_mask(path, mask):
    write_image(path, np.asarray(mask, dtype=bool), maxval=255)


def quantize16(img):
    """Scale a non-negative float image to uint16; returns ``(data, scale)``."""
    img = np.asarray(img, dtype=np.float64)
    if np.any(img < 0):
        raise ValueError("image must be non-negative")
    top = float(img.max(initial=0.0))
    scale = top / 65535.0 if top > 0 else 1.0
    return np.round(img / scale).astype(np.uint16), scale


# -- NIfTI-1 import ----------------------------------------------------------------

_NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}


def _quatern_to_matrix(b, c, d, qx, qy, qz, qfac, pixdim):
    a = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a) if a > 0 else 0.0
    R = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    scale = np.array([pixdim[0], pixdim[1], pixdim[2] * (-1.0 if qfac < 0 else 1.0)])
    m = np.eye(4)
    m[:3, :3] = R * scale
    m[:3, 3] = (qx, qy, qz)
    return m


def import_nifti(path, kind=None):
    """Read an uncompressed single-file NIfTI-1 (u8, i16 or f32).

    3D scalar images and 5D vector images with three components (a coordinate
    field) are supported. Data is reordered to ``[x, y, z(, c)]``; the sform
    (or qform) is kept as the volume affine.
    """
    buf = Path(path).read_bytes()
    if buf[:2] == b"\x1f\x8b":
        raise UnsupportedNifti(f"{path}: compressed NIfTI is not supported")
    if len(buf) < 352:
        raise UnsupportedNifti(f"{path}: file too short for a NIfTI-1 header")
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", buf[:4])[0] == 348:
            break
    else:
        raise UnsupportedNifti(f"{path}: sizeof_hdr is not 348")
    magic = buf[344:348]
    if magic != b"n+1\x00":
        raise UnsupportedNifti(f"{path}: magic {magic!r} is not single-file NIfTI-1")
    dim = struct.unpack(endian + "8h", buf[40:56])
    datatype, bitpix = struct.unpack(endian + "hh", buf[70:74])
    pixdim = struct.unpack(endian + "8f", buf[76:108])
    vox_offset = struct.unpack(endian + "f", buf[108:112])[0]
    scl_slope, scl_inter = struct.unpack(endian + "ff", buf[112:120])
    qform_code, sform_code = struct.unpack(endian + "hh", buf[252:256])
    quatern = struct.unpack(endian + "6f", buf[256:280])
    srow = struct.unpack(endian + "12f", buf[280:328])
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedNifti(f"{path}: datatype code {datatype} not in u8/i16/f32")
    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise UnsupportedNifti(f"{path}: dim[0]={ndim}")
    shape = [max(1, d) for d in dim[1 : ndim + 1]]
    nx, ny, nz = shape[:3]
    extra = shape[3:]
    channels = int(np.prod(extra)) if extra else 1
    if channels not in (1, 3) or (extra and extra[0] != 1 and channels == 3):
        raise UnsupportedNifti(f"{path}: unsupported dims {dim[1:ndim + 1]}")
    dt = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    if bitpix != dt.itemsize * 8:
        raise UnsupportedNifti(f"{path}: bitpix {bitpix} inconsistent with datatype")
    offset = int(vox_offset)
    count = nx * ny * nz * channels
    body = buf[offset : offset + count * dt.itemsize]
    if len(body) != count * dt.itemsize:
        raise LengthMismatch(f"{path}: truncated voxel data")
    arr = np.frombuffer(body, dtype=dt).reshape((channels, nz, ny, nx)).transpose(3, 2, 1, 0)
    arr = arr.astype(dt.newbyteorder("="))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        arr = arr.astype(np.float32) * np.float32(scl_slope or 1.0) + np.float32(scl_inter)
    if channels == 1:
        arr = arr[..., 0]
    if sform_code > 0:
        affine = np.vstack([np.array(srow).reshape(3, 4), [0, 0, 0, 1]])
    elif qform_code > 0:
        affine = _quatern_to_matrix(*quatern, pixdim[0], pixdim[1:4])
    else:
        affine = np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])
    if kind is None:
        if channels == 3:
            kind = "coordinates"
        elif np.issubdtype(arr.dtype, np.integer):
            kind = "label"
        else:
            kind = "intensity"
    spacing = tuple(float(abs(p)) if p else 1.0 for p in pixdim[1:4])
    return Volume3D(np.ascontiguousarray(arr), spacing=spacing, kind=kind, affine=affine,
                    meta={"source": str(path)})
