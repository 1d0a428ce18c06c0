"""Single-pass byte-span indexing of raw JSONL corpora.

The indexer is content-agnostic: it records where each newline-terminated
document starts and how long it is, and never inspects the JSON itself.
Zero-length lines are excluded (they would become zero-token documents);
a final line without a trailing newline still counts as a document.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

INDEX_MAGIC = b"CFIDX001"
INDEX_VERSION = 1

_HEADER = struct.Struct("<8sIQQ")  # magic, version, source_size, doc_count

DEFAULT_BUFFER_SIZE = 1 << 20


class FormatError(Exception):
    """Malformed index sidecar."""


class OutOfRangeError(IndexError):
    """Document ordinal outside the index."""


class DocSpan(NamedTuple):
    byte_offset: int
    byte_length: int


@dataclass(eq=False)
class DocumentIndex:
    """Per-document byte spans over a raw file, plus the file size at index time.

    ``spans`` is a (doc_count, 2) uint64 array of (byte_offset, byte_length),
    strictly increasing and non-overlapping in file order.
    """

    source_size: int
    spans: np.ndarray

    @property
    def doc_count(self) -> int:
        return len(self.spans)

    def span(self, i: int) -> DocSpan:
        if not 0 <= i < len(self.spans):
            raise OutOfRangeError(f"document {i} out of range [0, {len(self.spans)})")
        offset, length = self.spans[i]
        return DocSpan(int(offset), int(length))

    def __eq__(self, other) -> bool:
        if not isinstance(other, DocumentIndex):
            return NotImplemented
        return self.source_size == other.source_size and np.array_equal(
            self.spans, other.spans
        )


def build_index(
    raw_path: str | os.PathLike, buffer_size: int = DEFAULT_BUFFER_SIZE
) -> DocumentIndex:
    """Scan a file once and record every non-empty line's byte span.

    Document boundary is the newline byte 0x0A; carriage returns stay inside
    spans untouched. Memory stays bounded by the buffer plus the span list,
    and the result is independent of ``buffer_size``.
    """
    if buffer_size < 1:
        raise ValueError(f"buffer_size must be >= 1, got {buffer_size}")
    offsets: list[int] = []
    lengths: list[int] = []
    pos = 0
    line_start = 0
    with open(raw_path, "rb") as f:
        while chunk := f.read(buffer_size):
            base = pos
            search_from = 0
            while (nl := chunk.find(b"\n", search_from)) != -1:
                length = base + nl - line_start
                if length > 0:
                    offsets.append(line_start)
                    lengths.append(length)
                line_start = base + nl + 1
                search_from = nl + 1
            pos = base + len(chunk)
    if line_start < pos:  # final line without trailing newline
        offsets.append(line_start)
        lengths.append(pos - line_start)
    spans = np.empty((len(offsets), 2), dtype="<u8")
    spans[:, 0] = offsets
    spans[:, 1] = lengths
    return DocumentIndex(source_size=pos, spans=spans)


def write_index(index: DocumentIndex, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.source_size, index.doc_count))
        f.write(index.spans.astype("<u8", copy=False).tobytes())


def load_index(path: str | os.PathLike) -> DocumentIndex:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated index header")
    magic, version, source_size, doc_count = _HEADER.unpack(data[: _HEADER.size])
    if magic != INDEX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(data) != _HEADER.size + doc_count * 16:
        raise FormatError(f"{path}: truncated span table")
    spans = (
        np.frombuffer(data, dtype="<u8", count=doc_count * 2, offset=_HEADER.size)
        .reshape(doc_count, 2)
        .copy()
    )
    return DocumentIndex(source_size=source_size, spans=spans)


def index_sidecar_path(raw_path: str | os.PathLike) -> str:
    return os.fspath(raw_path) + ".didx"


def verify_index(index: DocumentIndex, raw_path: str | os.PathLike) -> bool:
    """True iff the raw file still has the size recorded at index time.

    Size-only staleness detection is O(1); it will not catch same-size
    in-place edits.
    """
    return os.path.getsize(raw_path) == index.source_size


def read_document(raw_path: str | os.PathLike, index: DocumentIndex, i: int) -> bytes:
    """Exactly the bytes of document ``i``, via one positioned read."""
    offset, length = index.span(i)
    with open(raw_path, "rb") as f:
        f.seek(offset)
        return f.read(length)
