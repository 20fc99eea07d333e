"""Chunked binary record file with an index, read by sample-index ranges.

Layout (all integers little-endian)::

    header   : magic b"EPRC" | version u16 | reserved u16 | record_count u64
               | chunk_count u32 | records_per_chunk u32            (24 bytes)
    chunks   : chunk_count x (payload_offset u64 | record_count u32)  (12 bytes each)
    records  : record_count x (offset_in_chunk u32 | length u32)     (8 bytes each)
    payloads : concatenated record bytes, chunk after chunk

``payload_offset`` is absolute in the file. A reader resolves record ``i`` to
chunk ``i // records_per_chunk`` and the per-record entry ``i``.
"""

from __future__ import annotations

import logging
import struct
from typing import BinaryIO, Iterable, Iterator, List, Protocol, Sequence, Tuple, Union

from .sharding import Shard

logger = logging.getLogger(__name__)

MAGIC = b"EPRC"
VERSION = 1
_HEADER = struct.Struct("<4sHHQII")
_CHUNK = struct.Struct("<QI")
_REC = struct.Struct("<II")


class RecordFileError(Exception):
    pass


class RecordSource(Protocol):
    def __len__(self) -> int: ...

    def read(self, index: int) -> bytes: ...


def write_records(path: str, records: Iterable[bytes], records_per_chunk: int = 64) -> int:
    """Write ``records`` to ``path``; returns the record count."""
    if records_per_chunk < 1:
        raise RecordFileError("records_per_chunk must be >= 1")
    data: List[bytes] = [bytes(r) for r in records]
    n = len(data)
    chunks: List[List[bytes]] = [data[i:i + records_per_chunk] for i in range(0, n, records_per_chunk)]
    index_size = _HEADER.size + len(chunks) * _CHUNK.size + n * _REC.size
    chunk_entries: List[Tuple[int, int]] = []
    rec_entries: List[Tuple[int, int]] = []
    offset = index_size
    for chunk in chunks:
        chunk_entries.append((offset, len(chunk)))
        within = 0
        for rec in chunk:
            rec_entries.append((within, len(rec)))
            within += len(rec)
        offset += within
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, n, len(chunks), records_per_chunk))
        for entry in chunk_entries:
            fh.write(_CHUNK.pack(*entry))
        for entry in rec_entries:
            fh.write(_REC.pack(*entry))
        for chunk in chunks:
            for rec in chunk:
                fh.write(rec)
    return n


class RecordFile:
    """Random-access reader over a record file."""

    def __init__(self, path: str):
        self.path = path
        self._fh: BinaryIO = open(path, "rb")
        head = self._fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise RecordFileError("truncated header")
        magic, version, _, count, n_chunks, per_chunk = _HEADER.unpack(head)
        if magic != MAGIC:
            raise RecordFileError(f"bad magic {magic!r}")
        if version != VERSION:
            raise RecordFileError(f"unsupported version {version}")
        self.record_count = count
        self.records_per_chunk = per_chunk
        raw = self._fh.read(n_chunks * _CHUNK.size)
        self._chunks = [_CHUNK.unpack_from(raw, i * _CHUNK.size) for i in range(n_chunks)]
        raw = self._fh.read(count * _REC.size)
        if len(raw) != count * _REC.size:
            raise RecordFileError("truncated index")
        self._recs = [_REC.unpack_from(raw, i * _REC.size) for i in range(count)]

    def __len__(self) -> int:
        return self.record_count

    def read(self, index: int) -> bytes:
        if not 0 <= index < self.record_count:
            raise IndexError(f"record {index} out of bounds [0, {self.record_count})")
        chunk_offset, _ = self._chunks[index // self.records_per_chunk]
        within, length = self._recs[index]
        self._fh.seek(chunk_offset + within)
        out = self._fh.read(length)
        if len(out) != length:
            raise RecordFileError(f"record {index} truncated")
        return out

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "RecordFile":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class SyntheticDataset:
    """In-memory record source producing ``b"record-<i>"``."""

    def __init__(self, size: int):
        self.size = size

    def __len__(self) -> int:
        return self.size

    def read(self, index: int) -> bytes:
        if not 0 <= index < self.size:
            raise IndexError(f"record {index} out of bounds [0, {self.size})")
        return b"record-%d" % index


def indexed_reader(dataset: RecordSource, shard: Union[Shard, Sequence[int]]) -> Iterator[bytes]:
    """Yield records ``start..end-1`` of ``shard`` in order."""
    if isinstance(shard, Shard):
        start, end = shard.start, shard.end
    else:
        start, end = shard[0], shard[1]
    if start < 0 or end > len(dataset) or start > end:
        raise IndexError(f"shard [{start}, {end}) outside dataset of {len(dataset)} records")
    for i in range(start, end):
        yield dataset.read(i)
