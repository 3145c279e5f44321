"""Minimal single-file NIfTI-1 reader/writer and CSV report output.

Supported subset: little-endian ``.nii`` files with magic ``n+1\\0``,
``dim[0] == 3`` and datatype uint8 (2), int16 (4) or float32 (16). The
affine is identity scaled by the voxel spacing.
"""
from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ConversionError, FormatError, LaminaError
from .grid import Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DT_UINT8, DT_INT16, DT_FLOAT32 = 2, 4, 16
_DTYPES = {
    DT_UINT8: (np.dtype("<u1"), 8),
    DT_INT16: (np.dtype("<i2"), 16),
    DT_FLOAT32: (np.dtype("<f4"), 32),
}
_NAMES = {"uint8": DT_UINT8, "int16": DT_INT16, "float32": DT_FLOAT32}


@dataclass
class VolumeHeader:
    dims: tuple
    spacing: tuple
    datatype: int
    vox_offset: float
    magic: bytes
    descrip: str = ""
    scl_slope: float = 1.0
    scl_inter: float = 0.0


def _pack_header(dims, spacing, datatype: int, descrip: str = "") -> bytes:
    buf = bytearray(HEADER_SIZE)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    struct.pack_into("<8h", buf, 40, 3, *dims, 1, 1, 1, 1)
    bitpix = _DTYPES[datatype][1]
    struct.pack_into("<hh", buf, 70, datatype, bitpix)
    struct.pack_into("<8f", buf, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<fff", buf, 108, float(VOX_OFFSET), 1.0, 0.0)
    buf[123] = 2  # xyzt_units: mm
    d = descrip.encode("ascii", "replace")[:79]
    buf[148:148 + len(d)] = d
    struct.pack_into("<hh", buf, 252, 1, 1)  # qform_code, sform_code
    sx, sy, sz = spacing
    struct.pack_into("<4f", buf, 280, sx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", buf, 296, 0.0, sy, 0.0, 0.0)
    struct.pack_into("<4f", buf, 312, 0.0, 0.0, sz, 0.0)
    buf[344:348] = MAGIC
    return bytes(buf)


def parse_header(raw: bytes) -> VolumeHeader:
    """Validate and decode the 348-byte header; raises FormatError."""
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"sizeof_hdr: file shorter than {HEADER_SIZE} bytes")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        (big,) = struct.unpack_from(">i", raw, 0)
        if big == HEADER_SIZE:
            raise FormatError("sizeof_hdr: big-endian files are not supported")
        raise FormatError(f"sizeof_hdr: expected 348, got {sizeof_hdr}")
    magic = bytes(raw[344:348])
    if magic != MAGIC:
        raise FormatError(f"magic: expected 'n+1\\0', got {magic!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise FormatError(f"dim[0]: only 3-D volumes are supported, got {dim[0]}")
    dims = tuple(int(n) for n in dim[1:4])
    if min(dims) < 1:
        raise FormatError(f"dim: nonpositive size {dims}")
    datatype, bitpix = struct.unpack_from("<hh", raw, 70)
    if datatype not in _DTYPES:
        raise FormatError(f"datatype: unsupported code {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(s) for s in pixdim[1:4])
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"pixdim: nonpositive or non-finite spacing {spacing}")
    vox_offset, slope, inter = struct.unpack_from("<fff", raw, 108)
    if not math.isfinite(vox_offset) or vox_offset < VOX_OFFSET or vox_offset != int(vox_offset):
        raise FormatError(f"vox_offset: expected an integer >= 352, got {vox_offset}")
    descrip = bytes(raw[148:228]).split(b"\x00", 1)[0].decode("ascii", "replace")
    return VolumeHeader(dims, spacing, int(datatype), float(vox_offset), magic, descrip,
                        float(slope), float(inter))


def read_header(path) -> VolumeHeader:
    with open(path, "rb") as fh:
        return parse_header(fh.read(HEADER_SIZE))


def decode_volume(raw: bytes) -> Volume:
    """Decode a complete single-file NIfTI-1 byte string."""
    hdr = parse_header(raw)
    dtype, _ = _DTYPES[hdr.datatype]
    n = hdr.dims[0] * hdr.dims[1] * hdr.dims[2]
    start = int(hdr.vox_offset)
    need = start + n * dtype.itemsize
    if len(raw) < need:
        raise FormatError(f"payload: truncated, need {need} bytes, have {len(raw)}")
    flat = np.frombuffer(raw, dtype=dtype, count=n, offset=start)
    data = flat.reshape(hdr.dims, order="F")
    scaled = hdr.scl_slope not in (0.0, 1.0) or hdr.scl_inter != 0.0
    if hdr.datatype == DT_FLOAT32 or scaled:
        data = data.astype(np.float64)
        if scaled:
            if not (math.isfinite(hdr.scl_slope) and math.isfinite(hdr.scl_inter)):
                raise FormatError("scl_slope: non-finite scaling")
            data = data * hdr.scl_slope + hdr.scl_inter
    else:
        data = data.astype(dtype.newbyteorder("="))
    return Volume(np.ascontiguousarray(data), hdr.spacing)


def read_volume(path: Union[str, os.PathLike]) -> Volume:
    """Read a volume. float32 payloads become float64; uint8/int16 stay integral."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"file: not found {path}") from None
    except OSError as exc:
        raise FormatError(f"file: cannot read {path}: {exc}") from None
    try:
        return decode_volume(raw)
    except LaminaError:
        raise
    except Exception as exc:  # defensive: malformed payloads must not crash callers
        raise FormatError(f"payload: {exc}") from None


def default_datatype(v: Volume) -> int:
    kind = v.data.dtype.kind
    if kind == "b":
        return DT_UINT8
    if kind in "iu":
        return DT_INT16
    return DT_FLOAT32


def encode_volume(v: Volume, datatype=None, descrip: str = "") -> bytes:
    if v.is_vector:
        raise ConversionError("vector fields must be written one component per file")
    if datatype is None:
        datatype = default_datatype(v)
    datatype = _NAMES.get(datatype, datatype)
    if datatype not in _DTYPES:
        raise ConversionError(f"unsupported datatype {datatype}")
    dtype, _ = _DTYPES[datatype]
    a = np.asarray(v.data)
    if datatype == DT_FLOAT32:
        a64 = a.astype(np.float64)
        if not np.all(np.isfinite(a64)) or np.any(np.abs(a64) > np.finfo(np.float32).max):
            raise ConversionError("float32: non-finite or out-of-range values")
        payload = a64.astype(dtype)
    else:
        info = np.iinfo(dtype)
        if a.dtype.kind == "f" and (not np.all(np.isfinite(a)) or np.any(a != np.round(a))):
            raise ConversionError(f"{dtype.name}: values are not integral")
        if a.size and (a.min() < info.min or a.max() > info.max):
            raise ConversionError(f"{dtype.name}: values outside [{info.min}, {info.max}]")
        payload = a.astype(dtype)
    header = _pack_header(v.dims, v.spacing, datatype, descrip)
    return header + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload.tobytes(order="F")


def write_volume(v: Volume, path, datatype=None, descrip: str = "") -> None:
    """Write ``v`` as single-file NIfTI-1 (masks uint8, labels int16, scalars float32 by default)."""
    blob = encode_volume(v, datatype, descrip)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(blob)


def write_vector_field(v: Volume, prefix: str, descrip: str = "") -> list:
    paths = []
    for i, ax in enumerate("xyz"):
        p = f"{prefix}{ax}.nii"
        write_volume(Volume(v.data[..., i], v.spacing), p, DT_FLOAT32, descrip)
        paths.append(p)
    return paths


def read_vector_field(prefix: str) -> Volume:
    comps = [read_volume(f"{prefix}{ax}.nii") for ax in "xyz"]
    return Volume(np.stack([c.data for c in comps], axis=-1), comps[0].spacing)


# ---------------------------------------------------------------------------
# CSV

REPORT_COLUMNS = (
    "region_id", "region_name", "n_voxels", "volume_mm3", "mean_TGM", "mean_TGran",
    "mean_TMol", "purkinje_area_mm2", "group_mean_a", "group_mean_b", "t_stat",
    "p_value", "fdr_significant",
)


def format_value(x) -> str:
    """6 significant digits for reals; empty for missing; ints and bools verbatim."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return f"{x:.6g}"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else format_value(v) for v in row])


def write_region_report(report, path) -> None:
    """Write a RegionReport (or any iterable of row mappings) as CSV."""
    rows = getattr(report, "rows", report)
    write_csv(path, REPORT_COLUMNS, ([row.get(c) for c in REPORT_COLUMNS] for row in rows))


def read_region_report(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
