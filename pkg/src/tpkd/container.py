"""Header-plus-blob container shared by checkpoints and datasets.

Layout::

    b"TPKD" | uint32 LE header length | JSON header (utf-8) | blob

The header names its ``format`` tag and lists every array with ``name``,
``shape``, ``dtype`` and byte ``offset``/``nbytes`` relative to the blob.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TPKD"


class ContainerError(Exception):
    """Base class for container read failures."""


class MalformedHeaderError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass


class TruncatedDataError(ContainerError):
    pass


_DTYPES = {"<f4": np.dtype("<f4"), "<i4": np.dtype("<i4"), "<i8": np.dtype("<i8")}


def encode(fmt: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype("<f4", copy=False)
        elif np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype("<i8", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": fmt, "meta": meta or {}, "arrays": entries, "blob_nbytes": offset}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def decode(buf: bytes, fmt: str) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < 8:
        raise TruncatedDataError("unexpected end of data while reading preamble")
    if buf[:4] != MAGIC:
        raise MalformedHeaderError("missing TPKD magic bytes")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hlen:
        raise TruncatedDataError("unexpected end of data while reading header")
    try:
        header = json.loads(buf[8:8 + hlen].decode())
        entries = header["arrays"]
        blob_nbytes = int(header["blob_nbytes"])
        tag = header["format"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"cannot parse header: {exc}") from exc
    if tag != fmt:
        raise UnsupportedVersionError(f"expected format {fmt!r}, found {tag!r}")
    blob = memoryview(buf)[8 + hlen:]
    # validate every entry before materializing anything
    total = 0
    for e in entries:
        try:
            dt = _DTYPES[e["dtype"]]
            n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
            off, nbytes = int(e["offset"]), int(e["nbytes"])
        except KeyError as exc:
            raise MalformedHeaderError(f"bad array entry {e!r}") from exc
        if n != nbytes:
            raise ShapeMismatchError(
                f"array {e['name']!r}: shape {e['shape']} needs {n} bytes, header says {nbytes}")
        if off != total:
            raise ShapeMismatchError(f"array {e['name']!r}: offset {off} != expected {total}")
        total += nbytes
    if total != blob_nbytes:
        raise ShapeMismatchError(f"arrays need {total} bytes but blob_nbytes is {blob_nbytes}")
    if len(blob) < blob_nbytes:
        raise TruncatedDataError(
            f"unexpected end of data: blob has {len(blob)} of {blob_nbytes} bytes")
    if len(blob) > blob_nbytes:
        raise ShapeMismatchError(f"{len(blob) - blob_nbytes} trailing bytes after blob")
    arrays = {}
    for e in entries:
        dt = _DTYPES[e["dtype"]]
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).copy()
    return header, arrays


def write(path, fmt, arrays, meta=None) -> bytes:
    data = encode(fmt, arrays, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return data


def read(path, fmt):
    return decode(Path(path).read_bytes(), fmt)
