"""On-disk formats: the canonical DVOL volume container, NIfTI-1 import,
and a minimal OBJ mesh writer/reader.

DVOL layout (little-endian): magic "DVOL", u32 version = 1, u32 dims[3],
f32 spacing_mm[3], u8 dtype code (0 = u8, 1 = i16, 2 = f32), then the raw
payload with the x index varying fastest. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError
from .volume import BinaryMask, Volume
from .warp import SurfaceMesh

DVOL_MAGIC = b"DVOL"
DVOL_VERSION = 1

_DTYPE_CODES = {"u8": 0, "i16": 1, "f32": 2}
_DTYPE_NUMPY = {0: np.dtype("<u1"), 1: np.dtype("<i2"), 2: np.dtype("<f4")}


def write_dvol(path, volume, dtype: str = "f32") -> None:
    """Write a Volume or BinaryMask; data cast to the requested payload type."""
    if dtype not in _DTYPE_CODES:
        raise DataError(f"unsupported DVOL dtype {dtype!r}")
    code = _DTYPE_CODES[dtype]
    data = volume.data.astype(_DTYPE_NUMPY[code])
    with open(path, "wb") as fh:
        fh.write(DVOL_MAGIC)
        fh.write(struct.pack("<I", DVOL_VERSION))
        fh.write(struct.pack("<3I", *volume.dims))
        fh.write(struct.pack("<3f", *volume.spacing))
        fh.write(struct.pack("<B", code))
        fh.write(data.tobytes(order="F"))


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise DataError(f"truncated DVOL: short read in {what}")
    return data


def read_dvol(path) -> Volume:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DVOL_MAGIC:
            raise DataError(f"bad DVOL magic {magic!r}")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != DVOL_VERSION:
            raise DataError(f"unsupported DVOL version {version}")
        dims = struct.unpack("<3I", _read_exact(fh, 12, "dims"))
        spacing = struct.unpack("<3f", _read_exact(fh, 12, "spacing"))
        code = struct.unpack("<B", _read_exact(fh, 1, "dtype"))[0]
        if code not in _DTYPE_NUMPY:
            raise DataError(f"unsupported DVOL dtype code {code}")
        dt = _DTYPE_NUMPY[code]
        count = int(np.prod(dims))
        raw = _read_exact(fh, count * dt.itemsize, "payload")
        if fh.read(1):
            raise DataError("trailing bytes after DVOL payload")
    data = np.frombuffer(raw, dtype=dt).reshape(dims, order="F")
    return Volume(data.astype(np.float64), spacing)


def read_dvol_mask(path) -> BinaryMask:
    vol = read_dvol(path)
    if not np.isin(vol.data, (0.0, 1.0)).all():
        raise DataError(f"{path} does not hold a binary mask")
    return BinaryMask(vol.data.astype(np.uint8), vol.spacing)


# ---------------------------------------------------------------------------
# NIfTI-1 import (read-only)

_NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}


def read_nifti(path) -> Volume:
    """Minimal NIfTI-1 reader: 348-byte header, 3D u8/i16/f32 volumes.

    Applies the scl_slope/scl_inter intensity rescale when scl_slope != 0.
    Handles both byte orders via the sizeof_hdr check.
    """
    with open(path, "rb") as fh:
        header = fh.read(348)
        if len(header) != 348:
            raise DataError("truncated NIfTI header")
        endian = "<"
        sizeof_hdr = struct.unpack("<i", header[:4])[0]
        if sizeof_hdr != 348:
            endian = ">"
            sizeof_hdr = struct.unpack(">i", header[:4])[0]
            if sizeof_hdr != 348:
                raise DataError("not a NIfTI-1 file (sizeof_hdr != 348)")
        magic = header[344:348]
        if magic[:3] not in (b"n+1", b"ni1"):
            raise DataError(f"bad NIfTI magic {magic!r}")

        dim = struct.unpack(f"{endian}8h", header[40:56])
        if dim[0] != 3:
            raise DataError(f"unsupported NIfTI rank {dim[0]}; only 3D volumes are read")
        dims = dim[1:4]
        datatype = struct.unpack(f"{endian}h", header[70:72])[0]
        if datatype not in _NIFTI_DTYPES:
            raise DataError(f"unsupported NIfTI datatype {datatype}")
        pixdim = struct.unpack(f"{endian}8f", header[76:108])
        spacing = tuple(float(abs(p)) for p in pixdim[1:4])
        vox_offset = struct.unpack(f"{endian}f", header[108:112])[0]
        scl_slope = struct.unpack(f"{endian}f", header[112:116])[0]
        scl_inter = struct.unpack(f"{endian}f", header[116:120])[0]

        fh.seek(int(vox_offset))
        dt = _NIFTI_DTYPES[datatype].newbyteorder(endian)
        count = int(np.prod(dims))
        raw = fh.read(count * dt.itemsize)
        if len(raw) != count * dt.itemsize:
            raise DataError("truncated NIfTI payload")

    data = np.frombuffer(raw, dtype=dt).reshape(dims, order="F").astype(np.float64)
    if scl_slope != 0.0:
        data = data * float(scl_slope) + float(scl_inter)
    return Volume(data, spacing)


# ---------------------------------------------------------------------------
# OBJ meshes


def write_obj(path, mesh: SurfaceMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_obj(path) -> SurfaceMesh:
    vertices = []
    triangles = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                triangles.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    if not vertices:
        raise DataError(f"no vertices in {path}")
    return SurfaceMesh(np.array(vertices), np.array(triangles, dtype=np.int64))
