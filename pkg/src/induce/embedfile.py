"""EMB1: binary container for per-sentence token embedding matrices.

Layout (all little-endian):
    magic "EMB1" | u32 version=1 | u32 sentence_count | u32 dim
    per sentence: u32 token_count, then token_count*dim f32 values
    trailing index: sentence_count u64 byte offsets, each pointing at
    the u32 token_count of the corresponding record.

Roundtrips are bit-exact; values are stored as written.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AlignmentError, EmbeddingFormatError

MAGIC = b"EMB1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class EmbeddingStore:
    dim: int
    records: list[np.ndarray]  # each (token_count, dim) float32

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.records[i]

    def pooled(self, i: int) -> np.ndarray:
        return self.records[i].mean(axis=0)


def write_embeddings(path: str | Path, records: list[np.ndarray], dim: int | None = None) -> None:
    if dim is None:
        if not records:
            raise ValueError("cannot infer dim from an empty record list")
        dim = records[0].shape[1]
    offsets: list[int] = []
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(records), dim))
        pos = _HEADER.size
        for i, rec in enumerate(records):
            rec = np.asarray(rec)
            if rec.ndim != 2 or rec.shape[1] != dim:
                raise AlignmentError(f"record {i}: shape {rec.shape} does not match dim {dim}")
            if rec.shape[0] < 1:
                raise AlignmentError(f"record {i}: empty record")
            offsets.append(pos)
            data = np.ascontiguousarray(rec, dtype="<f4").tobytes()
            fh.write(_U32.pack(rec.shape[0]))
            fh.write(data)
            pos += _U32.size + len(data)
        for off in offsets:
            fh.write(_U64.pack(off))


def read_embeddings(path: str | Path) -> EmbeddingStore:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise EmbeddingFormatError("file shorter than header")
    magic, version, count, dim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise EmbeddingFormatError(f"unsupported version {version}")
    if dim < 1:
        raise EmbeddingFormatError(f"bad dim {dim}")
    pos = _HEADER.size
    records: list[np.ndarray] = []
    offsets: list[int] = []
    for i in range(count):
        if pos + _U32.size > len(blob):
            raise EmbeddingFormatError(f"truncated at record {i}")
        offsets.append(pos)
        (token_count,) = _U32.unpack_from(blob, pos)
        pos += _U32.size
        if token_count < 1:
            raise EmbeddingFormatError(f"record {i}: token_count 0")
        nbytes = token_count * dim * 4
        if pos + nbytes > len(blob):
            raise EmbeddingFormatError(f"truncated inside record {i}")
        mat = np.frombuffer(blob, dtype="<f4", count=token_count * dim, offset=pos)
        records.append(mat.reshape(token_count, dim).copy())
        pos += nbytes
    index_bytes = count * _U64.size
    if pos + index_bytes != len(blob):
        raise EmbeddingFormatError(f"expected {index_bytes} index bytes at offset {pos}, file has {len(blob) - pos}")
    for i in range(count):
        (off,) = _U64.unpack_from(blob, pos + i * _U64.size)
        if off != offsets[i]:
            raise EmbeddingFormatError(f"index entry {i} points at {off}, record is at {offsets[i]}")
    return EmbeddingStore(dim, records)


def check_embedding_alignment(store: EmbeddingStore, sentence_lengths: list[int]) -> None:
    if len(store) != len(sentence_lengths):
        raise AlignmentError(f"{len(store)} embedding records vs {len(sentence_lengths)} sentences")
    for i, (rec, n) in enumerate(zip(store.records, sentence_lengths)):
        if rec.shape[0] != n:
            raise AlignmentError(f"record {i}: {rec.shape[0]} rows vs {n} tokens")
