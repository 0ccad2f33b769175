"""Self-describing binary tensor files.

Layout: the 4-byte magic ``CTK1``, one UTF-8 JSON header line terminated by
``\\n``, then little-endian row-major payload. A file holds either a single
tensor (header carries ``dtype`` and ``shape`` plus free-form metadata) or a
list of named tensors stored back to back (header carries ``tensors``).
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ParseError

MAGIC = b"CTK1"
_DTYPES = {"f32": "<f4", "f64": "<f8", "u8": "u1", "i32": "<i4"}


def _read_header(fh) -> dict:
    if fh.read(4) != MAGIC:
        raise ParseError("not a CTK1 tensor file")
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise ParseError("truncated CTK1 header")
    return json.loads(line.decode("utf-8"))


def _read_payload(fh, dtype: str, shape) -> np.ndarray:
    dt = np.dtype(_DTYPES[dtype])
    count = int(np.prod(shape)) if len(shape) else 1
    buf = fh.read(count * dt.itemsize)
    if len(buf) != count * dt.itemsize:
        raise ParseError("truncated CTK1 payload")
    return np.frombuffer(buf, dtype=dt).reshape(shape).copy()


def write_tensor(path, array: np.ndarray, dtype: str = "f32", **meta) -> None:
    arr = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    header = {"dtype": dtype, "shape": list(arr.shape), **meta}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(arr.tobytes())


def read_tensor(path) -> tuple[np.ndarray, dict]:
    """Return ``(array, header)`` for a single-tensor file."""
    with open(path, "rb") as fh:
        header = _read_header(fh)
        if "tensors" in header:
            raise ParseError("file holds named tensors; use read_tensors")
        return _read_payload(fh, header["dtype"], header["shape"]), header


def write_tensors(path, tensors: dict[str, np.ndarray], dtype: str = "f32", **meta) -> None:
    arrays = {k: np.ascontiguousarray(v, dtype=_DTYPES[dtype]) for k, v in tensors.items()}
    header = {"dtype": dtype, "tensors": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()], **meta}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for v in arrays.values():
            fh.write(v.tobytes())


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        if "tensors" not in header:
            raise ParseError("file holds a single tensor; use read_tensor")
        out = {}
        for entry in header["tensors"]:
            out[entry["name"]] = _read_payload(fh, header["dtype"], entry["shape"])
        return out, header


def pack_bits(matrix: np.ndarray) -> bytes:
    """Pack an L x T binary matrix: 8-byte little-endian (L, T) then packed rows."""
    m = np.asarray(matrix, dtype=np.uint8)
    if m.ndim != 2:
        raise ValueError("expected a 2-D binary matrix")
    shape = np.array(m.shape, dtype="<u4").tobytes()
    return shape + np.packbits(m, axis=None).tobytes()


def unpack_bits(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise ParseError("truncated packed-bit matrix")
    rows, cols = (int(v) for v in np.frombuffer(blob[:8], dtype="<u4"))
    bits = np.unpackbits(np.frombuffer(blob[8:], dtype=np.uint8))
    if bits.size < rows * cols:
        raise ParseError("truncated packed-bit matrix")
    return bits[: rows * cols].reshape(rows, cols)
