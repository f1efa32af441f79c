import json
import struct
from fractions import Fraction

import numpy as np
import pytest

from volnet import io as vio


def nifti_bytes(data, datatype=16, bitpix=32, slope=0.0, inter=0.0, vox_offset=352.0, dims=None,
                magic=b"n+1\x00", sizeof_hdr=348, pixdim=(1.0, 0.8, 0.8, 1.5)):
    """Build a single-file NIfTI-1 image field by field."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, sizeof_hdr)
    dims = data.shape if dims is None else dims
    dim = [len(dims)] + list(dims) + [1] * (7 - len(dims))
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, *(list(pixdim) + [1.0] * (8 - len(pixdim))))
    struct.pack_into("<f", hdr, 108, vox_offset)
    struct.pack_into("<2f", hdr, 112, slope, inter)
    hdr[344:348] = magic
    pad = b"\x00" * (int(vox_offset) - 348) if vox_offset >= 348 else b""
    # NIfTI stores X fastest
    payload = np.ascontiguousarray(data.transpose(2, 1, 0)).tobytes()
    return bytes(hdr) + pad + payload


@pytest.fixture
def vol(rng):
    return rng.standard_normal((5, 4, 3)).astype("<f4")


def test_nifti_round_trip_is_exact(tmp_path, vol):
    p = tmp_path / "a.nii"
    p.write_bytes(nifti_bytes(vol))
    hdr = vio.read_header(p)
    assert hdr.format == "nifti1" and hdr.dims == (5, 4, 3) and hdr.offset == 352
    assert hdr.spacing_mm == pytest.approx((0.8, 0.8, 1.5))
    out = vio.read_volume(p)
    assert out.shape == (1, 5, 4, 3) and out.dtype == np.float32
    np.testing.assert_array_equal(out[0], vol)


def test_nifti_int16_with_scaling(tmp_path, rng):
    raw = rng.integers(-1000, 1000, (4, 4, 4)).astype("<i2")
    p = tmp_path / "ct.nii"
    p.write_bytes(nifti_bytes(raw, datatype=4, bitpix=16, slope=2.0, inter=-5.0))
    np.testing.assert_array_equal(vio.read_volume(p)[0], raw.astype(np.float64) * 2 - 5)


def test_nifti_uint8_and_2d(tmp_path):
    raw = np.arange(12, dtype=np.uint8).reshape(3, 4, 1)
    p = tmp_path / "u.nii"
    p.write_bytes(nifti_bytes(raw[:, :, 0][..., None], datatype=2, bitpix=8, dims=(3, 4)))
    np.testing.assert_array_equal(vio.read_volume(p)[0], raw)


def patched(buf, offset, fmt, value):
    out = bytearray(buf)
    struct.pack_into(fmt, out, offset, value)
    return bytes(out)


CORRUPTIONS = {
    "short header": (lambda v: nifti_bytes(v)[:200], vio.HeaderSizeError, "shorter"),
    "sizeof_hdr": (lambda v: nifti_bytes(v, sizeof_hdr=540), vio.HeaderSizeError, "sizeof_hdr"),
    "big endian": (lambda v: struct.pack(">i", 348) + nifti_bytes(v)[4:], vio.HeaderSizeError, "big-endian"),
    "magic": (lambda v: nifti_bytes(v, magic=b"ni1\x00"), vio.MagicError, "magic"),
    "dim[0]": (lambda v: patched(nifti_bytes(v), 40, "<h", 9), vio.DimensionError, "dim\\[0\\]"),
    "negative extent": (lambda v: nifti_bytes(v, dims=(5, -4, 3)), vio.DimensionError, "non-positive"),
    "4D": (lambda v: nifti_bytes(v, dims=(5, 4, 3, 2)), vio.DimensionError, "3D"),
    "datatype": (lambda v: nifti_bytes(v, datatype=64), vio.DtypeError, "datatype"),
    "bitpix": (lambda v: nifti_bytes(v, bitpix=16), vio.BitpixError, "bitpix"),
    "vox_offset": (lambda v: nifti_bytes(v, vox_offset=100.0), vio.VoxOffsetError, "vox_offset"),
    "fractional vox_offset": (lambda v: nifti_bytes(v, vox_offset=352.5), vio.VoxOffsetError, "vox_offset"),
    "truncated payload": (lambda v: nifti_bytes(v)[:-10], vio.TruncatedPayloadError, "payload"),
}


@pytest.mark.parametrize("case", list(CORRUPTIONS))
def test_corrupted_headers_rejected(tmp_path, vol, case):
    build, exc, needle = CORRUPTIONS[case]
    p = tmp_path / "bad.nii"
    p.write_bytes(build(vol))
    with pytest.raises(exc, match=needle):
        vio.read_volume(p)


def test_corruption_diagnostics_are_distinct(tmp_path, vol):
    messages = set()
    for build, _, _ in CORRUPTIONS.values():
        p = tmp_path / "bad.nii"
        p.write_bytes(build(vol))
        with pytest.raises(vio.VolumeFormatError) as info:
            vio.read_volume(p)
        messages.add(str(info.value).split(": ", 1)[1])
    assert len(messages) == len(CORRUPTIONS)


def test_compressed_nifti_refused(tmp_path):
    with pytest.raises(vio.VolumeFormatError):
        vio.read_header(tmp_path / "x.nii.gz")


def test_raw_round_trip(tmp_path, rng):
    v = rng.standard_normal((1, 6, 5, 4)).astype(np.float32)
    info = vio.write_volume(v, tmp_path / "v", spacing_mm=(1, 1, 2))
    assert info.path.endswith(".f32raw")
    meta = json.loads((tmp_path / "v.json").read_text())
    assert meta["dims"] == [6, 5, 4] and meta["spacing_mm"] == [1.0, 1.0, 2.0]
    for name in ("v", "v.f32raw", "v.json"):
        np.testing.assert_array_equal(vio.read_volume(tmp_path / name), v)


def test_raw_errors(tmp_path, rng):
    vio.write_volume(rng.standard_normal((4, 4, 4)), tmp_path / "v")
    raw = tmp_path / "v.f32raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(vio.TruncatedPayloadError):
        vio.read_volume(tmp_path / "v")
    (tmp_path / "w.json").write_text('{"dims": [4, 4]}')
    with pytest.raises(vio.DimensionError):
        vio.read_volume(tmp_path / "w")
    (tmp_path / "u.json").write_text("{not json")
    with pytest.raises(vio.VolumeFormatError):
        vio.read_volume(tmp_path / "u")
    with pytest.raises(FileNotFoundError):
        vio.read_volume(tmp_path / "missing")
    with pytest.raises(ValueError):
        vio.write_volume(np.zeros((2, 3, 3, 3)), tmp_path / "two")


def test_preprocess_clamp_examples():
    spec = vio.PreprocessSpec(hu_clamp=(-1000, 1000))
    out = vio.preprocess(np.array([-2000.0, 0.0, 1000.0, 5000.0]), spec)
    np.testing.assert_allclose(out, [0, 127.5, 255, 255])
    np.testing.assert_allclose(vio.preprocess(np.array([2.0, 4.0, 6.0]), vio.PreprocessSpec()), [0, 127.5, 255])
    assert not vio.preprocess(np.full(3, 9.0), vio.PreprocessSpec()).any()
    with pytest.raises(ValueError):
        vio.PreprocessSpec(hu_clamp=(5, 5))


def test_keys_kernel():
    assert vio.keys_kernel(0.0) == 1.0
    assert vio.keys_kernel(1.0) == 0.0 and vio.keys_kernel(2.0) == 0.0
    assert vio.keys_kernel(0.5) == pytest.approx(0.5625)
    assert vio.keys_kernel(1.5) == pytest.approx(-0.0625)


@pytest.mark.parametrize("n_in,n_out", [(8, 4), (8, 16), (7, 7), (5, 10)])
def test_resample_rows_are_partitions_of_unity(n_in, n_out):
    m = vio.resample_matrix(n_in, n_out)
    assert m.shape == (n_out, n_in)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)


def test_tricubic_shapes_and_constants(rng):
    v = np.full((1, 32, 32, 32), 42.0, np.float32)
    lr = vio.degrade(v)
    assert lr.shape == (1, 16, 16, 16)
    np.testing.assert_allclose(lr, 42.0, rtol=1e-6)
    assert vio.tricubic_resample(lr, 2).shape == (1, 32, 32, 32)
    x = rng.standard_normal((1, 6, 5, 4))
    np.testing.assert_allclose(vio.tricubic_resample(x, 1), x, atol=1e-12)
    with pytest.raises(ValueError):
        vio.tricubic_resample(x, Fraction(3, 2))


def test_tricubic_reproduces_linear_ramps():
    ramp = np.arange(16, dtype=np.float64)[:, None, None] * np.ones((1, 4, 4))
    up = vio.tricubic_resample(ramp[None], 2)[0, 3:-3, 0, 0]
    np.testing.assert_allclose(up, (np.arange(3, 29) + 0.5) / 2 - 0.5, atol=1e-12)


def test_phantom_contract():
    a = vio.make_phantom((32, 32, 32), n_blobs=40, seed=3)
    b = vio.make_phantom((32, 32, 32), n_blobs=40, seed=3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (1, 32, 32, 32) and a.dtype == np.float32
    assert a.min() >= 0 and a.max() <= 255
    assert not np.array_equal(a, vio.make_phantom((32, 32, 32), n_blobs=40, seed=4))
    bg = vio.make_phantom((32, 32, 32), n_blobs=0, seed=3)
    assert np.isfinite(bg).all() and bg.max() <= 255
    with pytest.raises(ValueError):
        vio.make_phantom((16, 32, 32))
