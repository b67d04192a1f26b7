import gzip
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slabrecon import io
from slabrecon.core import COORD_SENTINEL, Volume3D
from slabrecon.errors import (
    CorruptFile,
    CorruptHeader,
    LengthMismatch,
    UnsupportedDtype,
    UnsupportedNifti,
)
from slabrecon.predict import CoordMap2D

FIX = Path(__file__).parent / "fixtures"
DT = {"u8": np.uint8, "i16": np.int16, "f32": np.float32}


def random_volume(rng, code, dims, channels):
    shape = dims + ((3,) if channels == 3 else ())
    if code == "f32":
        data = rng.standard_normal(shape).astype(np.float32)
        kind = "intensity" if channels == 1 else "coordinates"
    else:
        info = np.iinfo(DT[code])
        data = rng.integers(info.min, info.max, shape, endpoint=True).astype(DT[code])
        kind = "label" if channels == 1 else "intensity"
        if channels == 3:
            data = data.astype(np.float32)
            code = "f32"
    return Volume3D(data, spacing=tuple(rng.uniform(0.1, 3, 3)), kind=kind), code


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["u8", "i16", "f32"]), st.sampled_from([1, 3]),
       st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)))
def test_volume_roundtrip_bitwise(tmp_path_factory, seed, code, channels, dims):
    rng = np.random.default_rng(seed)
    vol, code = random_volume(rng, code, dims, channels)
    path = tmp_path_factory.mktemp("v") / "vol"
    io.write_volume(path, vol)
    back = io.read_volume(path)
    assert back.data.dtype == vol.data.dtype
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == vol.spacing and back.kind == vol.kind
    assert back.meta["mm_per_unit"] == vol.meta["mm_per_unit"]


def test_payload_layout_and_affine(tmp_path):
    vol = Volume3D(np.array([[[1.5]]], dtype=np.float32), affine=np.arange(16.0))
    hdr, raw = io.write_volume(tmp_path / "one", vol)
    assert raw.read_bytes() == struct.pack("<f", 1.5)
    back = io.read_volume(tmp_path / "one.hdr")
    np.testing.assert_array_equal(back.affine, np.arange(16.0).reshape(4, 4))
    # x fastest
    v = Volume3D(np.arange(6, dtype=np.int16).reshape(2, 3, 1), kind="intensity")
    _, raw = io.write_volume(tmp_path / "order", v)
    assert struct.unpack("<6h", raw.read_bytes()) == (0, 3, 1, 4, 2, 5)


def test_volume_errors(tmp_path):
    vol = Volume3D(np.zeros((2, 2, 2), np.float32))
    hdr, raw = io.write_volume(tmp_path / "v", vol)
    raw.write_bytes(raw.read_bytes()[:-1])
    with pytest.raises(LengthMismatch):
        io.read_volume(tmp_path / "v")
    text = hdr.read_text()
    hdr.write_text(text + "colour = blue\n")
    with pytest.raises(CorruptHeader, match="colour"):
        io.read_volume(tmp_path / "v")
    hdr.write_text(text.replace("dtype = f32", "dtype = f64"))
    with pytest.raises(UnsupportedDtype):
        io.read_volume(tmp_path / "v")
    hdr.write_text("\n".join(line for line in text.splitlines() if not line.startswith("dims")))
    with pytest.raises(CorruptHeader):
        io.read_volume(tmp_path / "v")
    with pytest.raises(UnsupportedDtype):
        io.write_volume(tmp_path / "w", Volume3D(np.zeros((2, 2, 2))))
    with pytest.raises(UnsupportedDtype):
        io.write_volume(tmp_path / "w", Volume3D(np.full((2, 2, 2), 300.0)), dtype="u8")


def test_header_order_insensitive(tmp_path):
    vol = Volume3D(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
    hdr, _ = io.write_volume(tmp_path / "v", vol)
    lines = hdr.read_text().splitlines()
    hdr.write_text("# shuffled\n" + "\n".join(reversed(lines)) + "\n")
    assert io.read_volume(tmp_path / "v").data.tobytes() == vol.data.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([255, 1000, 65535]),
       st.integers(1, 9), st.integers(1, 9))
def test_pgm_roundtrip(tmp_path_factory, seed, maxval, w, h):
    rng = np.random.default_rng(seed)
    dt = np.uint8 if maxval < 256 else np.uint16
    img = rng.integers(0, maxval, (w, h), endpoint=True).astype(dt)
    path = tmp_path_factory.mktemp("p") / "img.pgm"
    io.write_image(path, img, maxval=maxval)
    back, mv = io.read_image_with_maxval(path)
    assert mv == maxval and back.data.dtype == dt and back.data.tobytes() == img.tobytes()


def test_pgm_errors(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(CorruptFile):
        io.read_image(p)
    p.write_bytes(b"P5\n2 2\n255\n\x00\x00\x00")
    with pytest.raises(CorruptFile):
        io.read_image(p)
    with pytest.raises(UnsupportedDtype):
        io.write_image(p, np.zeros((2, 2)))


def test_mask_role_validation(tmp_path):
    assert io.read_mask(FIX / "mask.pgm").sum() == 3
    with pytest.raises(CorruptFile):
        io.read_mask(FIX / "bad_mask.pgm")
    m = np.random.default_rng(0).random((5, 4)) > 0.5
    io.write_mask(tmp_path / "m.pgm", m)
    assert np.array_equal(io.read_mask(tmp_path / "m.pgm"), m)


def test_coordmap_roundtrip_keeps_sentinel(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.uniform(-1, 1, (7, 5, 3)).astype(np.float32)
    mask = rng.random((7, 5)) > 0.4
    data[~mask] = COORD_SENTINEL
    io.write_coordmap(tmp_path / "c", CoordMap2D(data, mask))
    back = io.read_coordmap(tmp_path / "c")
    assert back.data.tobytes() == data.tobytes()
    assert np.array_equal(back.mask, mask)
    assert np.all(back.data[~mask] == COORD_SENTINEL)


def test_golden_fixtures():
    v = io.read_volume(FIX / "tiny_labels")
    assert v.kind == "label" and v.spacing == (0.5, 1.0, 2.0)
    expect = np.array([[1, 2, 3], [11, 12, 13]], dtype=np.int16)
    np.testing.assert_array_equal(v.data[:, :, 0], expect)
    c = io.read_coordmap(FIX / "tiny_coords")
    np.testing.assert_array_equal(c.mask, [[True, True], [True, False]])
    np.testing.assert_array_equal(c.data[1, 0], np.float32([0.5, -0.5, 0.75]))
    img8 = io.read_image(FIX / "tiny8.pgm").data
    np.testing.assert_array_equal(img8, [[0, 1], [128, 2], [255, 3]])
    img16 = io.read_image(FIX / "tiny16.pgm").data
    np.testing.assert_array_equal(img16, [[0, 256], [1000, 2], [65535, 3]])


def test_nifti_fixture_exact():
    v = io.import_nifti(FIX / "mini_u8.nii")
    x, y, z = np.indices((2, 2, 2))
    np.testing.assert_array_equal(v.data, 1 + x + 2 * y + 4 * z)
    assert v.spacing == (0.5, 1.0, 2.0) and v.kind == "label"
    np.testing.assert_allclose(v.affine[:3, 3], [-10, -20, -30])
    with pytest.raises(UnsupportedNifti):
        io.import_nifti(FIX / "mini_f64.nii")


def test_nifti_rejects_gzip(tmp_path):
    p = tmp_path / "x.nii.gz"
    p.write_bytes(gzip.compress((FIX / "mini_u8.nii").read_bytes()))
    with pytest.raises(UnsupportedNifti):
        io.import_nifti(p)


def test_nifti_cross_check_with_nibabel(tmp_path):
    nib = pytest.importorskip("nibabel")
    rng = np.random.default_rng(2)
    data = rng.standard_normal((3, 4, 5)).astype(np.float32)
    aff = np.diag([1.5, 2.0, 0.5, 1.0])
    nib.save(nib.Nifti1Image(data, aff), tmp_path / "a.nii")
    v = io.import_nifti(tmp_path / "a.nii")
    assert v.data.tobytes() == data.tobytes()
    assert v.spacing == (1.5, 2.0, 0.5)


def test_kv_documents(tmp_path):
    with pytest.raises(CorruptHeader):
        io.parse_kv("a = 1\na = 2\n")
    with pytest.raises(CorruptHeader):
        io.parse_kv("no equals sign\n")
    doc = {"x": 0.1, "flag": True, "v": (1, 2.5), "m": np.eye(2)}
    io.write_kv(tmp_path / "d.txt", doc)
    back = io.read_kv(tmp_path / "d.txt")
    assert float(back["x"]) == 0.1 and back["flag"] == "true"
    assert back["m"] == "1.0 0.0 0.0 1.0"
