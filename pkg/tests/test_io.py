import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from msseg.errors import FormatError, GeometryError, InputError
from msseg.io import read_nifti, read_sidecar, read_volume, write_volume
from msseg.volume import BrainMask, LabelVolume, Volume, scale_intensities, validate_geometry

FUZZ = settings(max_examples=40, deadline=None,
                suppress_health_check=[HealthCheck.function_scoped_fixture])


def hand_nifti(extents=(2, 2, 2), datatype=4, bitpix=16, payload=None, vox_offset=352.0,
               magic=b"n+1\x00", spacing=(1.0, 1.0, 1.0), slope=0.0, inter=0.0):
    """Header assembled field by field, independently of the writer."""
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *extents, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into("<fff", hdr, 108, vox_offset, slope, inter)
    hdr[344:348] = magic
    if payload is None:
        payload = np.arange(np.prod(extents), dtype="<i2").tobytes()
    return bytes(hdr) + payload


def test_read_minimal_nifti(tmp_path):
    path = tmp_path / "a.nii"
    path.write_bytes(hand_nifti())
    vol = read_volume(path)
    assert vol.shape == (2, 2, 2)
    assert vol.data.size == 8
    # payload is column-major: x varies fastest
    assert vol.data[1, 0, 0] == 1 and vol.data[0, 1, 0] == 2 and vol.data[0, 0, 1] == 4
    assert vol.spacing == (1.0, 1.0, 1.0)


def test_nifti_slope_intercept(tmp_path):
    path = tmp_path / "s.nii"
    path.write_bytes(hand_nifti(slope=2.0, inter=-1.0))
    vol = read_volume(path)
    assert vol.data.dtype == np.float32
    assert vol.data[1, 0, 0] == 1.0 and vol.data[0, 0, 1] == 7.0


def test_nifti_honors_vox_offset(tmp_path):
    payload = b"\xff" * 8 + np.arange(8, dtype="<i2").tobytes()
    path = tmp_path / "o.nii"
    path.write_bytes(hand_nifti(vox_offset=360.0, payload=payload))
    assert read_volume(path).data[1, 0, 0] == 1


@pytest.mark.parametrize("kwargs, match", [
    (dict(magic=b"ni1\x00"), "magic"),
    (dict(datatype=64, bitpix=64), "datatype"),
    (dict(datatype=4, bitpix=8), "bitpix"),
    (dict(extents=(2, 0, 2)), "extent"),
    (dict(extents=(30000, 30000, 30000), payload=b""), "overflow"),
    (dict(vox_offset=100.0), "vox_offset"),
    (dict(spacing=(1.0, -1.0, 1.0)), "spacing"),
])
def test_nifti_rejects(tmp_path, kwargs, match):
    path = tmp_path / "bad.nii"
    path.write_bytes(hand_nifti(**kwargs))
    with pytest.raises(FormatError, match=match):
        read_nifti(path)


def test_nifti_big_endian_rejected(tmp_path):
    blob = bytearray(hand_nifti())
    struct.pack_into(">i", blob, 0, 348)
    path = tmp_path / "be.nii"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="big-endian"):
        read_nifti(path)


def test_nifti_truncation_every_length(tmp_path):
    blob = hand_nifti(extents=(3, 2, 2))
    path = tmp_path / "t.nii"
    for cut in range(len(blob)):
        path.write_bytes(blob[:cut])
        with pytest.raises(FormatError) as info:
            read_nifti(path)
        assert info.value.offset is not None


def test_sidecar_fields(tmp_path):
    (tmp_path / "v.raw").write_bytes(np.arange(9, dtype=np.uint8).tobytes())
    (tmp_path / "v.hdr").write_text(
        "dims = 3 3 1\nspacing_mm = 1 1 2\ndtype = u8\ndata_file = v.raw\n")
    vol = read_volume(tmp_path / "v.hdr")
    assert vol.shape == (3, 3, 1)
    assert vol.spacing == (1.0, 1.0, 2.0)
    # row-major payload: z varies fastest
    assert vol.data[0, 1, 0] == 1 and vol.data[1, 0, 0] == 3


@pytest.mark.parametrize("header, match", [
    ("dims = 3 3\nspacing_mm = 1 1 1\ndtype = u8\ndata_file = v.raw\n", "dims"),
    ("dims = 3 3 1\nspacing_mm = 1 1 1\ndtype = u64\ndata_file = v.raw\n", "dtype"),
    ("dims = 3 3 1\nspacing_mm = 1 1 1\ndata_file = v.raw\n", "missing"),
    ("dims = 3 3 x\nspacing_mm = 1 1 1\ndtype = u8\ndata_file = v.raw\n", "malformed"),
    ("dims = 3 3 1\nspacing_mm = 1 1 1\ndtype = u8\ndata_file = v.raw\nbroken line\n", ":5"),
    ("dims = 3 3 2\nspacing_mm = 1 1 1\ndtype = u8\ndata_file = v.raw\n", "truncated"),
    ("dims = 3 3 1\nspacing_mm = 1 1 1\ndtype = u8\ndata_file = nothere.raw\n", "payload"),
    ("dims = 3 3 1\nspacing_mm = 1 0 1\ndtype = u8\ndata_file = v.raw\n", "spacing"),
])
def test_sidecar_rejects(tmp_path, header, match):
    (tmp_path / "v.raw").write_bytes(bytes(9))
    (tmp_path / "v.hdr").write_text(header)
    with pytest.raises(FormatError, match=match):
        read_sidecar(tmp_path / "v.hdr")


def test_sidecar_truncated_payload(tmp_path):
    vol = Volume(np.ones((4, 3, 2), dtype=np.float32))
    write_volume(vol, tmp_path / "v.hdr")
    raw = tmp_path / "v.raw"
    full = raw.read_bytes()
    for cut in (0, 1, len(full) - 1):
        raw.write_bytes(full[:cut])
        with pytest.raises(FormatError, match="truncated"):
            read_volume(tmp_path / "v.hdr")


# --- fuzzed round trips -------------------------------------------------------

def random_data(dtype, shape, seed):
    rng = np.random.default_rng(seed)
    if dtype == np.float32:
        # arbitrary bit patterns, including NaNs, infinities and -0.0
        return rng.integers(0, 2 ** 32, shape, dtype=np.uint32).view(np.float32)
    info = np.iinfo(dtype)
    return rng.integers(info.min, info.max, shape, endpoint=True, dtype=dtype)


shapes = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
spacings = st.tuples(*[st.floats(0.125, 5.0, width=32)] * 3)


@pytest.mark.parametrize("ext", [".nii", ".hdr"])
@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32])
@given(shape=shapes, spacing=spacings, seed=st.integers(0, 2 ** 31), axis=st.integers(0, 2))
@FUZZ
def test_image_round_trip(tmp_path, ext, dtype, shape, spacing, seed, axis):
    vol = Volume(random_data(dtype, shape, seed), spacing, axis)
    path = tmp_path / f"img{ext}"
    write_volume(vol, path)
    back = read_volume(path)
    assert type(back) is Volume
    assert back.data.dtype == dtype
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == vol.spacing
    assert back.slice_axis == axis


@pytest.mark.parametrize("ext", [".nii", ".hdr"])
@given(shape=shapes, seed=st.integers(0, 2 ** 31), n=st.integers(2, 300))
@FUZZ
def test_labels_round_trip(tmp_path, ext, shape, seed, n):
    data = np.random.default_rng(seed).integers(0, n, shape)
    vol = LabelVolume(data, num_classes=n)
    path = tmp_path / f"lab{ext}"
    write_volume(vol, path)
    back = read_volume(path)
    assert isinstance(back, LabelVolume)
    assert back.num_classes == n
    assert back.data.dtype == vol.data.dtype == (np.uint8 if n <= 256 else np.int16)
    assert np.array_equal(back.data, data)


@pytest.mark.parametrize("ext", [".nii", ".hdr"])
@given(shape=shapes, seed=st.integers(0, 2 ** 31))
@FUZZ
def test_mask_round_trip(tmp_path, ext, shape, seed):
    data = np.random.default_rng(seed).random(shape) < 0.5
    path = tmp_path / f"mask{ext}"
    write_volume(BrainMask(data), path)
    back = read_volume(path)
    assert isinstance(back, BrainMask)
    assert np.array_equal(back.data, data)


def test_spacing_float32_precision(tmp_path):
    vol = Volume(np.zeros((2, 2, 2), np.uint8), (0.1, 1 / 3, 2.0))
    for name in ("s.nii", "s.hdr"):
        write_volume(vol, tmp_path / name)
        back = read_volume(tmp_path / name)
        assert back.spacing == tuple(float(np.float32(s)) for s in vol.spacing)


@pytest.mark.parametrize("ext", [".nii", ".hdr"])
@given(seed=st.integers(0, 2 ** 31), flips=st.integers(1, 8))
@FUZZ
def test_corrupted_bytes_fail_cleanly(tmp_path, ext, seed, flips):
    rng = np.random.default_rng(seed)
    vol = LabelVolume(rng.integers(0, 4, (4, 3, 5)), num_classes=4)
    path = tmp_path / f"c{ext}"
    write_volume(vol, path)
    blob = bytearray(path.read_bytes())
    limit = 352 if ext == ".nii" else len(blob)
    for pos in rng.integers(0, limit, flips):
        blob[pos] = rng.integers(0, 256)
    path.write_bytes(bytes(blob))
    try:
        back = read_volume(path)
    except FormatError:
        return
    assert back.data.ndim == 3


# --- intensity scaling and geometry -------------------------------------------

def test_scale_three_values():
    vol = Volume(np.array([10.0, 20.0, 30.0, 99.0]).reshape(4, 1, 1))
    mask = BrainMask(np.array([1, 1, 1, 0], bool).reshape(4, 1, 1))
    out = scale_intensities(vol, mask).data.ravel()
    np.testing.assert_allclose(out[:3], [0, 511.5, 1023], rtol=0, atol=1e-4)
    # outside the mask the same linear map applies
    assert out[3] == pytest.approx((99 - 10) / 20 * 1023, rel=1e-6)


def test_scale_already_spanning():
    rng = np.random.default_rng(0)
    data = rng.uniform(0, 1023, (5, 5, 5))
    data.flat[0], data.flat[1] = 0, 1023
    out = scale_intensities(Volume(data), BrainMask(np.ones_like(data, bool)))
    assert np.max(np.abs(out.data - data)) <= 1e-4


def test_scale_range_property():
    rng = np.random.default_rng(1)
    vol = Volume(rng.normal(300, 80, (8, 8, 4)))
    mask = BrainMask(rng.random((8, 8, 4)) < 0.6)
    out = scale_intensities(vol, mask).data[mask.data]
    assert abs(out.min()) <= 1e-3 and abs(out.max() - 1023) <= 1e-3


def test_scale_constant_warns():
    vol = Volume(np.full((3, 3, 3), 7.0))
    with pytest.warns(RuntimeWarning, match="constant"):
        out = scale_intensities(vol, BrainMask(np.ones((3, 3, 3), bool)))
    assert np.all(out.data == 0)


def test_scale_empty_mask():
    with pytest.raises(InputError):
        scale_intensities(Volume(np.ones((2, 2, 2))), BrainMask(np.zeros((2, 2, 2), bool)))


def test_geometry_checks():
    v = Volume(np.zeros((4, 5, 6)), (1, 1, 2))
    validate_geometry(v, BrainMask(np.zeros((4, 5, 6)), (1, 1, 2)),
                      LabelVolume(np.zeros((4, 5, 6), int), (1, 1, 2.00005)))
    with pytest.raises(GeometryError, match="axis Z") as info:
        validate_geometry(v, BrainMask(np.zeros((4, 5, 7)), (1, 1, 2)))
    assert info.value.axis == "Z"
    with pytest.raises(GeometryError, match="axis Y"):
        validate_geometry(v, None, LabelVolume(np.zeros((4, 5, 6), int), (1, 1.0002, 2)))


def test_volume_validation():
    with pytest.raises(InputError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(InputError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(InputError):
        LabelVolume(np.array([0, 5]).reshape(2, 1, 1), num_classes=3)
    with pytest.raises(InputError):
        LabelVolume(np.array([0.5, 1]).reshape(2, 1, 1))


def test_scale_checks_geometry():
    with pytest.raises(GeometryError, match="axis X"):
        scale_intensities(Volume(np.ones((3, 2, 2))), BrainMask(np.ones((2, 2, 2), bool)))
