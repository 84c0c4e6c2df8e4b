"""Writer and reader for the EMB1 embedding container.

Layout (all little-endian):
    magic "EMB1" | u32 version=1 | u32 sentence_count | u32 dim
    per sentence: u32 token_count, then token_count*dim f32 values
    trailing index: sentence_count u64 byte offsets, each pointing at
    the u32 token_count of the corresponding record.

This is the handoff format to the parsing side, so the bytes here must
match what its reader expects exactly; the format tests pin that down.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"EMB1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class Emb1Writer:
    """Appends one record per sentence; the offset index goes in last.

    The sentence count is part of the header, so it must be known up
    front; close() refuses to finish a file with the wrong number of
    records rather than leave a header that lies.
    """

    def __init__(self, path: str | Path, dim: int, count: int):
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        if count < 0:
            raise ValueError(f"count must be nonnegative, got {count}")
        self.dim = dim
        self.count = count
        self._offsets: list[int] = []
        self._pos = _HEADER.size
        self._fh = open(path, "wb")
        self._fh.write(_HEADER.pack(MAGIC, VERSION, count, dim))

    def append(self, record: np.ndarray) -> None:
        record = np.asarray(record)
        i = len(self._offsets)
        if i >= self.count:
            raise ValueError(f"writer was sized for {self.count} records")
        if record.ndim != 2 or record.shape[1] != self.dim:
            raise ValueError(f"record {i}: shape {record.shape}, expected (tokens, {self.dim})")
        if record.shape[0] < 1:
            raise ValueError(f"record {i}: no rows")
        self._offsets.append(self._pos)
        data = np.ascontiguousarray(record, dtype="<f4").tobytes()
        self._fh.write(_U32.pack(record.shape[0]))
        self._fh.write(data)
        self._pos += _U32.size + len(data)

    def close(self) -> None:
        if self._fh.closed:
            return
        try:
            if len(self._offsets) != self.count:
                raise ValueError(f"wrote {len(self._offsets)} of {self.count} records")
            for off in self._offsets:
                self._fh.write(_U64.pack(off))
        finally:
            self._fh.close()

    def __enter__(self) -> "Emb1Writer":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


@dataclass
class Emb1File:
    dim: int
    records: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.records)


def write_file(path: str | Path, dim: int, records: list[np.ndarray]) -> None:
    with Emb1Writer(path, dim, len(records)) as w:
        for rec in records:
            w.append(rec)


def read_file(path: str | Path) -> Emb1File:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError("file shorter than header")
    magic, version, count, dim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dim < 1:
        raise FormatError(f"bad dim {dim}")
    pos = _HEADER.size
    records: list[np.ndarray] = []
    offsets: list[int] = []
    for i in range(count):
        if pos + _U32.size > len(blob):
            raise FormatError(f"truncated at record {i}")
        offsets.append(pos)
        (token_count,) = _U32.unpack_from(blob, pos)
        pos += _U32.size
        if token_count < 1:
            raise FormatError(f"record {i}: token_count 0")
        nbytes = token_count * dim * 4
        if pos + nbytes > len(blob):
            raise FormatError(f"truncated inside record {i}")
        mat = np.frombuffer(blob, dtype="<f4", count=token_count * dim, offset=pos)
        records.append(mat.reshape(token_count, dim).copy())
        pos += nbytes
    index_bytes = count * _U64.size
    if pos + index_bytes != len(blob):
        raise FormatError(f"expected {index_bytes} index bytes at offset {pos}, file has {len(blob) - pos}")
    for i in range(count):
        (off,) = _U64.unpack_from(blob, pos + i * _U64.size)
        if off != offsets[i]:
            raise FormatError(f"index entry {i} points at {off}, record is at {offsets[i]}")
    return Emb1File(dim, records)
