"""Binary matrix and grid-field files with JSON sidecars.

Albedo matrix file (little endian):

    offset  size  field
    0       4     magic b"ALBM"
    4       4     version (u32, currently 1)
    8       4     rows (u32)
    12      4     cols (u32)
    16      4     dimension (u32)
    20      12    reserved, zero
    32      8*rows*cols  float64 values, row-major

Grid field file (little endian):

    0       4     magic b"GFLD"
    4       4     version (u32, currently 1)
    8       4     ndim (u32)
    12      4     reserved, zero
    16      8*ndim  shape (u64 each)
    ...     float64 values, row-major

Each binary file ``name.bin`` is accompanied by ``name.json`` describing the
grids.  Values are written with their exact bit patterns, so a round trip is
bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

ALBEDO_MAGIC = b"ALBM"
FIELD_MAGIC = b"GFLD"
FORMAT_VERSION = 1
_ALBEDO_HEADER = struct.Struct("<4sIIII12x")
_FIELD_HEADER = struct.Struct("<4sII4x")


class FormatError(ValueError):
    """Malformed or unsupported binary file."""


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def _write_sidecar(path, meta: dict) -> Path:
    side = sidecar_path(path)
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return side


def _read_sidecar(path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        return {}
    return json.loads(side.read_text())


def write_albedo(path, values, dimension: int, meta: dict | None = None) -> Path:
    """Write a dense matrix in the ALBM format plus its JSON sidecar."""
    M = np.ascontiguousarray(values, dtype="<f8")
    if M.ndim != 2:
        raise FormatError("albedo matrices must be two-dimensional")
    rows, cols = M.shape
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(_ALBEDO_HEADER.pack(ALBEDO_MAGIC, FORMAT_VERSION, rows, cols, int(dimension)))
            fh.write(M.tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    side = {"format": "ALBM", "version": FORMAT_VERSION, "rows": rows, "cols": cols,
            "dimension": int(dimension), "dtype": "float64", "order": "row-major"}
    side.update(meta or {})
    _write_sidecar(path, side)
    return path


def read_albedo(path):
    """Read an ALBM file; returns (values, dimension, sidecar dict)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _ALBEDO_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols, dim = _ALBEDO_HEADER.unpack_from(raw)
    if magic != ALBEDO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = raw[_ALBEDO_HEADER.size:]
    if len(body) != 8 * rows * cols:
        raise FormatError(f"{path}: expected {rows}x{cols} float64 values")
    values = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return values, dim, _read_sidecar(path)


def save_albedo_matrix(path, A, extra: dict | None = None) -> Path:
    """Write an AlbedoMatrix with its grid descriptions in the sidecar."""
    meta = {"grid_in": A.grid_in.to_dict(), "grid_out": A.grid_out.to_dict(),
            "meta": _jsonable(A.meta)}
    meta.update(extra or {})
    return write_albedo(path, A.values, A.dimension, meta)


def write_field(path, values, meta: dict | None = None) -> Path:
    """Write an n-dimensional float64 array in the grid-field format."""
    V = np.ascontiguousarray(values, dtype="<f8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_FIELD_HEADER.pack(FIELD_MAGIC, FORMAT_VERSION, V.ndim))
        fh.write(struct.pack(f"<{V.ndim}Q", *V.shape))
        fh.write(V.tobytes(order="C"))
    side = {"format": "GFLD", "version": FORMAT_VERSION, "shape": list(V.shape),
            "dtype": "float64", "order": "row-major"}
    side.update(meta or {})
    _write_sidecar(path, side)
    return path


def read_field(path):
    """Read a grid-field file; returns (values, sidecar dict)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _FIELD_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, ndim = _FIELD_HEADER.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = _FIELD_HEADER.size
    shape = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    n = int(np.prod(shape)) if ndim else 1
    if len(raw) - off != 8 * n:
        raise FormatError(f"{path}: size does not match shape {shape}")
    values = np.frombuffer(raw, dtype="<f8", offset=off).reshape(shape).astype(np.float64)
    return values, _read_sidecar(path)


def save_grid_attenuation(path, a) -> Path:
    """Serialize a GridAttenuation (values plus box and support)."""
    meta = {"kind": a.kind, "lower": a.lower.tolist(), "upper": a.upper.tolist(),
            "support": a.support}
    return write_field(path, a.values, meta)


def load_grid_attenuation(path, domain):
    from .fields import GridAttenuation
    values, meta = read_field(path)
    return GridAttenuation(meta["lower"], meta["upper"], values, domain,
                           meta.get("support", "omega"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    return repr(obj)
