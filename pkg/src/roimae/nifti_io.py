"""NIfTI-1 single-file reader/writer and the ``.v4d`` raw interchange format.

Only the subset needed for fMRI series and atlas label volumes is handled:
``n+1`` single files, rank 3 or 4, datatypes uint8/int16/uint16/float32/
float64, little- or big-endian, optionally gzip-compressed. The sform is the
authoritative orientation; qform quaternions are ignored.
"""

from __future__ import annotations

import gzip
import logging
import struct
from pathlib import Path

import numpy as np

from .volume import LabelVolume, Volume4D

log = logging.getLogger(__name__)

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352

# (name, struct code) in on-disk order; 348 bytes total
_FIELDS = [
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "c"),
    ("dim_info", "B"),
    ("dim", "8h"),
    ("intent_p1", "f"),
    ("intent_p2", "f"),
    ("intent_p3", "f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "B"),
    ("xyzt_units", "B"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern", "3f"),
    ("qoffset", "3f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
]
_FORMAT = "".join(code for _, code in _FIELDS)

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    512: np.dtype(np.uint16),
}
_INTEGER_CODES = {2, 4, 512}

_UNITS_TIME_SCALE = {8: 1.0, 16: 1e-3, 24: 1e-6}


class NiftiError(ValueError):
    """Base class for malformed or unsupported NIfTI input."""

    field = None

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        if field is not None:
            self.field = field


class HeaderSizeError(NiftiError):
    field = "sizeof_hdr"


class BadMagicError(NiftiError):
    field = "magic"


class RankError(NiftiError):
    field = "dim"


class UnsupportedDatatypeError(NiftiError):
    field = "datatype"


class VoxOffsetError(NiftiError):
    field = "vox_offset"


class ExtensionError(NiftiError):
    field = "extension"


class TruncatedDataError(NiftiError):
    field = "data"


class LabelDatatypeError(NiftiError):
    field = "datatype"


class NegativeLabelError(NiftiError):
    field = "data"


def _unpack(raw: bytes, endian: str) -> dict:
    values = struct.unpack(endian + _FORMAT, raw[:HEADER_SIZE])
    header, i = {}, 0
    for name, code in _FIELDS:
        count = int(code[:-1]) if code[:-1].isdigit() and code[-1] != "s" else 1
        if count == 1:
            header[name] = values[i]
        else:
            header[name] = list(values[i : i + count])
        i += count
    return header


def _pack(header: dict, endian: str = "<") -> bytes:
    flat = []
    for name, code in _FIELDS:
        value = header[name]
        if isinstance(value, (list, tuple)):
            flat.extend(value)
        else:
            flat.append(value)
    return struct.pack(endian + _FORMAT, *flat)


def empty_header() -> dict:
    header = {}
    for name, code in _FIELDS:
        kind = code[-1]
        count = int(code[:-1]) if code[:-1] and kind != "s" else 1
        if kind == "s":
            header[name] = b""
        elif kind == "c":
            header[name] = b"\x00"
        elif count > 1:
            header[name] = [0.0 if kind == "f" else 0] * count
        else:
            header[name] = 0.0 if kind == "f" else 0
    header["sizeof_hdr"] = HEADER_SIZE
    header["magic"] = b"n+1\x00"
    return header


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_header(raw: bytes) -> tuple[dict, str]:
    """Decode the 348-byte header, detecting byte order from ``dim[0]``."""
    if len(raw) < HEADER_SIZE:
        raise HeaderSizeError(f"file holds {len(raw)} bytes, shorter than a {HEADER_SIZE}-byte header")
    endian = "<"
    (rank,) = struct.unpack("<h", raw[40:42])
    if not 1 <= rank <= 7:
        endian = ">"
        (rank,) = struct.unpack(">h", raw[40:42])
        if not 1 <= rank <= 7:
            raise RankError(f"dim[0] is {rank} in either byte order")
    header = _unpack(raw, endian)
    if header["sizeof_hdr"] != HEADER_SIZE:
        raise HeaderSizeError(
            f"sizeof_hdr is {header['sizeof_hdr']}, expected {HEADER_SIZE} (only NIfTI-1 is supported)"
        )
    magic = header["magic"]
    if magic == b"ni1\x00":
        raise BadMagicError("magic 'ni1' denotes a paired .hdr/.img file; only single-file 'n+1' is supported")
    if magic != b"n+1\x00":
        raise BadMagicError(f"magic is {magic!r}, expected b'n+1\\x00'")
    return header, endian


def _volume_shape(header: dict) -> tuple[int, ...]:
    dim = header["dim"]
    rank = dim[0]
    if rank not in (3, 4):
        raise RankError(f"dim[0] = {rank}; only rank 3 or 4 volumes are supported")
    shape = tuple(dim[1 : rank + 1])
    if any(n < 1 for n in shape):
        raise RankError(f"dim[1..{rank}] = {shape} must all be positive")
    return shape


def _read_array(raw: bytes, header: dict, endian: str) -> np.ndarray:
    shape = _volume_shape(header)
    code = header["datatype"]
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"datatype code {code} is not supported")
    offset = header["vox_offset"]
    if offset < DEFAULT_VOX_OFFSET:
        raise VoxOffsetError(f"vox_offset {offset} is below {DEFAULT_VOX_OFFSET}")
    if len(raw) >= DEFAULT_VOX_OFFSET:
        extension = raw[HEADER_SIZE]
        if extension != 0:
            raise ExtensionError("header extensions are not supported")
    offset = int(offset)
    dtype = DATATYPES[code].newbyteorder(endian)
    count = int(np.prod(shape))
    needed = offset + count * dtype.itemsize
    if len(raw) < needed:
        raise TruncatedDataError(f"data section needs {needed} bytes, file has {len(raw)}")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return flat.reshape(shape, order="F")


def _f32(value) -> float:
    """Header floats are float32 on disk; recover the shortest decimal they encode
    so that 0.8 written comes back as 0.8, not 0.800000011920929."""
    return float(str(np.float32(value)))


def _spacing(header: dict) -> tuple[float, float, float]:
    pix = header["pixdim"]
    spacing = tuple(abs(_f32(p)) if p != 0 else 1.0 for p in pix[1:4])
    return spacing


def _affine(header: dict, spacing) -> np.ndarray:
    if header["sform_code"] > 0:
        affine = np.eye(4)
        affine[0] = [_f32(v) for v in header["srow_x"]]
        affine[1] = [_f32(v) for v in header["srow_y"]]
        affine[2] = [_f32(v) for v in header["srow_z"]]
        return affine
    return np.diag(tuple(spacing) + (1.0,))


def _tr(header: dict) -> float:
    tr = _f32(header["pixdim"][4])
    if tr <= 0:
        return 1.0
    return tr * _UNITS_TIME_SCALE.get(header["xyzt_units"] & 0x38, 1.0)


def read_header(path) -> dict:
    header, _ = parse_header(_read_bytes(path))
    return header


def read_volume(path) -> Volume4D:
    raw = _read_bytes(path)
    header, endian = parse_header(raw)
    data = _read_array(raw, header, endian).astype(np.float64 if header["datatype"] == 64 else np.float32)
    slope, inter = header["scl_slope"], header["scl_inter"]
    if slope != 0 and not (slope == 1 and inter == 0):
        data = slope * data + inter
    spacing = _spacing(header)
    return Volume4D(data.astype(np.float32), spacing_mm=spacing, tr_s=_tr(header), affine=_affine(header, spacing))


def read_labels(path) -> LabelVolume:
    raw = _read_bytes(path)
    header, endian = parse_header(raw)
    code = header["datatype"]
    if code in DATATYPES and code not in _INTEGER_CODES:
        raise LabelDatatypeError(f"label volumes need an integer datatype, got code {code}")
    data = _read_array(raw, header, endian)
    if data.ndim == 4:
        if data.shape[3] != 1:
            raise RankError(f"label volume has {data.shape[3]} frames; expected a 3D volume")
        data = data[..., 0]
    if header["scl_slope"] not in (0.0, 1.0) or header["scl_inter"] != 0.0:
        log.warning("%s: ignoring scl_slope/scl_inter on label data", path)
    if data.size and data.min() < 0:
        raise NegativeLabelError(f"label volume contains negative label {int(data.min())}")
    spacing = _spacing(header)
    return LabelVolume(data, spacing_mm=spacing, affine=_affine(header, spacing))


def _header_for(array: np.ndarray, code: int, spacing, affine, tr_s: float | None) -> dict:
    header = empty_header()
    shape = array.shape
    rank = 4 if array.ndim == 4 and shape[3] > 1 else 3
    dim = [rank] + list(shape[:rank]) + [1] * (7 - rank)
    header["dim"] = dim
    header["datatype"] = code
    header["bitpix"] = DATATYPES[code].itemsize * 8
    pixdim = [1.0, *spacing, float(tr_s) if tr_s else 0.0, 0.0, 0.0, 0.0]
    header["pixdim"] = pixdim
    header["vox_offset"] = float(DEFAULT_VOX_OFFSET)
    header["scl_slope"] = 1.0
    header["scl_inter"] = 0.0
    header["xyzt_units"] = 2 | (8 if tr_s else 0)  # mm, seconds
    header["sform_code"] = 1
    header["srow_x"] = [float(v) for v in affine[0]]
    header["srow_y"] = [float(v) for v in affine[1]]
    header["srow_z"] = [float(v) for v in affine[2]]
    return header


def _write(path, header: dict, array: np.ndarray) -> None:
    payload = _pack(header) + b"\x00\x00\x00\x00" + np.asarray(array).astype(array.dtype.newbyteorder("<")).tobytes(order="F")
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def write_volume(vol: Volume4D, path) -> None:
    data = vol.data
    if data.shape[3] == 1:
        data = data[..., 0]
    header = _header_for(data, 16, vol.spacing_mm, vol.affine, vol.tr_s)
    _write(path, header, np.asarray(data, dtype=np.float32))


def write_labels(labels: LabelVolume, path) -> None:
    """Store a parcellation as uint16 so that :func:`read_labels` accepts it."""
    header = _header_for(labels.labels, 512, labels.spacing_mm, labels.affine, None)
    _write(path, header, np.asarray(labels.labels, dtype=np.uint16))


# --- .v4d raw interchange -------------------------------------------------
#
# <stem>.v4d is a text sidecar, one "key values..." record per line:
#   v4d 1
#   dims nx ny nz nt
#   spacing sx sy sz
#   tr seconds
#   affine a00 a01 a02 a03 a10 ... a33      (16 numbers, row-major)
#   data <stem>.f32
# The blob named on the data line holds little-endian float32 voxels,
# x fastest, then y, z, t.

V4D_VERSION = 1


class V4DFormatError(ValueError):
    pass


def write_v4d(vol: Volume4D, path) -> None:
    path = Path(path)
    blob = path.with_suffix(".f32")
    lines = [
        f"v4d {V4D_VERSION}",
        "dims " + " ".join(str(n) for n in vol.dims.shape),
        "spacing " + " ".join(repr(float(s)) for s in vol.spacing_mm),
        f"tr {float(vol.tr_s)!r}",
        "affine " + " ".join(repr(float(a)) for a in vol.affine.ravel()),
        f"data {blob.name}",
    ]
    path.write_text("\n".join(lines) + "\n")
    blob.write_bytes(np.asarray(vol.data, dtype="<f4").tobytes(order="F"))


def read_v4d(path) -> Volume4D:
    path = Path(path)
    meta = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, *values = line.split()
            meta[key] = values
    try:
        if meta["v4d"] != [str(V4D_VERSION)]:
            raise V4DFormatError(f"unsupported v4d version {meta['v4d']}")
        dims = tuple(int(v) for v in meta["dims"])
        spacing = tuple(float(v) for v in meta["spacing"])
        tr = float(meta["tr"][0])
        affine = np.array([float(v) for v in meta["affine"]]).reshape(4, 4)
        blob = path.parent / meta["data"][0]
    except KeyError as exc:
        raise V4DFormatError(f"{path}: missing field {exc.args[0]!r}") from None
    if len(dims) != 4 or affine.size != 16:
        raise V4DFormatError(f"{path}: malformed dims or affine")
    raw = blob.read_bytes()
    count = int(np.prod(dims))
    if len(raw) != 4 * count:
        raise V4DFormatError(f"{blob}: expected {4 * count} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(dims, order="F")
    return Volume4D(data, spacing_mm=spacing, tr_s=tr, affine=affine)


def load_volume(path) -> Volume4D:
    """Read a volume from ``.nii``, ``.nii.gz`` or ``.v4d`` by extension."""
    if str(path).endswith(".v4d"):
        return read_v4d(path)
    return read_volume(path)
