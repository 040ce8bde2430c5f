"""Volume file formats.

Two formats are supported:

* NIfTI-1, single file (``.nii``), uncompressed, little-endian, datatypes
  uint8 / int16 / float32. ``scl_slope``/``scl_inter`` are applied on read
  when the slope is non-zero and not the identity.
* Raw-sidecar: a small ``key = value`` text header naming a flat binary
  payload. The payload is little-endian and row-major over ``[x, y, z]``
  (``z`` varies fastest).

Label volumes are tagged so they load back as :class:`LabelVolume` with their
class count; masks load back as :class:`BrainMask`.
"""

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .volume import BrainMask, LabelVolume, Volume, label_dtype

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_MAGIC = b"n+1\x00"
NIFTI_INTENT_LABEL = 1002
MAX_VOXELS = 2 ** 31

# NIfTI datatype code -> numpy dtype
NIFTI_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
SIDECAR_DTYPES = {"u8": np.dtype("<u1"), "i16": np.dtype("<i2"), "f32": np.dtype("<f4")}
KINDS = {"image": Volume, "labels": LabelVolume, "mask": BrainMask}


def _kind_of(volume):
    if isinstance(volume, LabelVolume):
        return "labels"
    if isinstance(volume, BrainMask):
        return "mask"
    return "image"


def _storage_dtype(volume):
    kind = _kind_of(volume)
    if kind == "mask":
        return np.dtype("<u1")
    if kind == "labels":
        return label_dtype(volume.num_classes).newbyteorder("<")
    dt = volume.data.dtype
    if dt == np.uint8:
        return np.dtype("<u1")
    if dt == np.int16:
        return np.dtype("<i2")
    return np.dtype("<f4")


def _build(kind, data, spacing, slice_axis, num_classes=None):
    cls = KINDS[kind]
    if kind == "labels":
        return cls(data, spacing, slice_axis, num_classes=num_classes)
    if kind == "mask":
        return cls(data, spacing, slice_axis)
    return cls(data, spacing, slice_axis)


# --- NIfTI-1 -----------------------------------------------------------------

def write_nifti(volume, path):
    dtype = _storage_dtype(volume)
    code = {v: k for k, v in NIFTI_DTYPES.items()}[dtype]
    hdr = bytearray(NIFTI_VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    hdr[39] = (volume.slice_axis + 1) << 4  # dim_info: slice_dim in bits 4-5
    struct.pack_into("<8h", hdr, 40, 3, *volume.shape, 1, 1, 1, 1)
    kind = _kind_of(volume)
    if kind == "labels":
        struct.pack_into("<f", hdr, 56, float(volume.num_classes))
        struct.pack_into("<h", hdr, 68, NIFTI_INTENT_LABEL)
    struct.pack_into("<hh", hdr, 70, code, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *volume.spacing, 0, 0, 0, 0)
    struct.pack_into("<fff", hdr, 108, float(NIFTI_VOX_OFFSET), 0.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    descrip = f"msseg {kind}".encode()
    hdr[148:148 + len(descrip)] = descrip
    hdr[344:348] = NIFTI_MAGIC
    payload = np.asarray(volume.data).astype(dtype).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(payload)


def read_nifti(path):
    buf = Path(path).read_bytes()
    if len(buf) < NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the {NIFTI_HEADER_SIZE}-byte header",
                          offset=len(buf))
    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        if struct.unpack_from(">i", buf, 0)[0] == NIFTI_HEADER_SIZE:
            raise FormatError(f"{path}: big-endian NIfTI is not supported", offset=0)
        raise FormatError(f"{path}: bad sizeof_hdr {sizeof_hdr}", offset=0)
    if buf[344:348] != NIFTI_MAGIC:
        raise FormatError(f"{path}: bad magic {bytes(buf[344:348])!r}", offset=344)
    dims = struct.unpack_from("<8h", buf, 40)
    ndim = dims[0]
    if not 3 <= ndim <= 7 or any(d != 1 for d in dims[4:ndim + 1]):
        raise FormatError(f"{path}: only 3D volumes are supported (dim={dims})", offset=40)
    extents = tuple(int(d) for d in dims[1:4])
    if any(d < 1 for d in extents):
        raise FormatError(f"{path}: non-positive extent in {extents}", offset=42)
    n_vox = extents[0] * extents[1] * extents[2]
    if n_vox > MAX_VOXELS:
        raise FormatError(f"{path}: extents {extents} overflow the voxel limit", offset=42)
    datatype, bitpix = struct.unpack_from("<hh", buf, 70)
    if datatype not in NIFTI_DTYPES:
        raise FormatError(f"{path}: unsupported datatype code {datatype}", offset=70)
    dtype = NIFTI_DTYPES[datatype]
    if bitpix != dtype.itemsize * 8:
        raise FormatError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}",
                          offset=72)
    pixdim = struct.unpack_from("<8f", buf, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"{path}: invalid voxel spacing {spacing}", offset=80)
    vox_offset, slope, inter = struct.unpack_from("<fff", buf, 108)
    if not np.isfinite(vox_offset) or vox_offset < NIFTI_HEADER_SIZE or vox_offset != int(vox_offset):
        raise FormatError(f"{path}: invalid vox_offset {vox_offset}", offset=108)
    start = int(vox_offset)
    nbytes = n_vox * dtype.itemsize
    if len(buf) < start + nbytes:
        raise FormatError(
            f"{path}: truncated payload, need {nbytes} bytes from offset {start}, "
            f"file has {len(buf) - min(start, len(buf))}", offset=len(buf))
    data = np.frombuffer(buf, dtype=dtype, count=n_vox, offset=start)
    data = data.reshape(extents, order="F").astype(dtype.newbyteorder("="))
    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)
    slice_dim = (buf[39] >> 4) & 3
    slice_axis = slice_dim - 1 if slice_dim else 2
    (intent_code,) = struct.unpack_from("<h", buf, 68)
    descrip = bytes(buf[148:228]).split(b"\x00", 1)[0].decode("ascii", "replace")
    if intent_code == NIFTI_INTENT_LABEL:
        (p1,) = struct.unpack_from("<f", buf, 56)
        num_classes = int(p1) if np.isfinite(p1) and p1 >= 2 else None
        return _safe_build(path, "labels", data, spacing, slice_axis, num_classes)
    kind = "mask" if descrip == "msseg mask" else "image"
    return _safe_build(path, kind, data, spacing, slice_axis)


def _safe_build(path, kind, data, spacing, slice_axis, num_classes=None):
    try:
        return _build(kind, data, spacing, slice_axis, num_classes)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# --- raw-sidecar ---------------------------------------------------------------

def _sidecar_paths(path):
    path = Path(path)
    return path, path.with_suffix(".raw")


def write_sidecar(volume, path):
    header_path, data_path = _sidecar_paths(path)
    dtype = _storage_dtype(volume)
    code = {v: k for k, v in SIDECAR_DTYPES.items()}[dtype]
    kind = _kind_of(volume)
    lines = [
        "# msseg raw volume",
        "dims = " + " ".join(str(d) for d in volume.shape),
        "spacing_mm = " + " ".join(repr(float(np.float32(s))) for s in volume.spacing),
        f"dtype = {code}",
        f"data_file = {data_path.name}",
        f"slice_axis = {volume.slice_axis}",
        f"kind = {kind}",
    ]
    if kind == "labels":
        lines.append(f"num_classes = {volume.num_classes}")
    data_path.write_bytes(np.asarray(volume.data).astype(dtype).tobytes(order="C"))
    header_path.write_text("\n".join(lines) + "\n")


def read_sidecar_header(path):
    fields = {}
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: sidecar header is not text", offset=exc.start) from exc
    offset = 0
    for lineno, raw in enumerate(text.splitlines(keepends=True), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'", offset=offset)
            key, value = (s.strip() for s in line.split("=", 1))
            fields[key] = value
        offset += len(raw.encode())
    for key in ("dims", "spacing_mm", "dtype", "data_file"):
        if key not in fields:
            raise FormatError(f"{path}: missing required field '{key}'")
    return fields


def read_sidecar(path):
    fields = read_sidecar_header(path)
    try:
        extents = tuple(int(v) for v in fields["dims"].split())
        spacing = tuple(float(v) for v in fields["spacing_mm"].split())
        slice_axis = int(fields.get("slice_axis", 2))
        num_classes = int(fields["num_classes"]) if "num_classes" in fields else None
    except ValueError as exc:
        raise FormatError(f"{path}: malformed numeric field: {exc}") from exc
    if len(extents) != 3 or any(d < 1 for d in extents):
        raise FormatError(f"{path}: dims must be three positive integers, got {extents}")
    if extents[0] * extents[1] * extents[2] > MAX_VOXELS:
        raise FormatError(f"{path}: dims {extents} overflow the voxel limit")
    if len(spacing) != 3:
        raise FormatError(f"{path}: spacing_mm must have three values")
    if fields["dtype"] not in SIDECAR_DTYPES:
        raise FormatError(f"{path}: unsupported dtype '{fields['dtype']}'")
    kind = fields.get("kind", "image")
    if kind not in KINDS:
        raise FormatError(f"{path}: unknown kind '{kind}'")
    dtype = SIDECAR_DTYPES[fields["dtype"]]
    data_path = Path(path).parent / fields["data_file"]
    n_vox = extents[0] * extents[1] * extents[2]
    nbytes = n_vox * dtype.itemsize
    try:
        size = os.path.getsize(data_path)
    except OSError as exc:
        raise FormatError(f"{path}: cannot open payload {data_path}: {exc}") from exc
    if size < nbytes:
        raise FormatError(f"{data_path}: truncated payload, need {nbytes} bytes, have {size}",
                          offset=size)
    with open(data_path, "rb") as fh:
        payload = fh.read(nbytes)
    data = np.frombuffer(payload, dtype=dtype, count=n_vox).reshape(extents)
    data = data.astype(dtype.newbyteorder("="))
    return _safe_build(path, kind, data, spacing, slice_axis, num_classes)


# --- dispatch ----------------------------------------------------------------

def _is_nifti(path):
    if str(path).endswith(".nii"):
        return True
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise FormatError(f"cannot open {path}: {exc}") from exc
    return len(head) == 4 and struct.unpack("<i", head)[0] == NIFTI_HEADER_SIZE


def read_volume(path, kind=None):
    """Load a volume, label map or mask from either supported format.

    ``kind`` (``"image"``, ``"labels"`` or ``"mask"``) overrides the type
    recorded in the file.
    """
    vol = read_nifti(path) if _is_nifti(path) else read_sidecar(path)
    if kind is None or kind == _kind_of(vol):
        return vol
    if kind not in KINDS:
        raise ValueError(f"unknown volume kind {kind!r}")
    return _safe_build(path, kind, vol.data, vol.spacing, vol.slice_axis)


def write_volume(volume, path):
    """Write in NIfTI-1 when ``path`` ends in ``.nii``, otherwise raw-sidecar."""
    if str(path).endswith(".nii"):
        write_nifti(volume, path)
    else:
        write_sidecar(volume, path)
