"""Packed binary token datasets with O(1) per-document access.

A packed file is a fixed header, a contiguous stream of fixed-width
little-endian token ids, and a trailing (start_token, token_length) span
index, one entry per document. Readers memory-map the file, so document
lookup is two index loads plus a payload slice regardless of file size.

Global shuffling is kept out of the payload: a seeded permutation is stored
in a small ``.perm`` sidecar and applied lazily by chunk materialization.
"""

from __future__ import annotations

import mmap
import os
import struct
from dataclasses import dataclass

import numpy as np

PACKED_MAGIC = b"CFPKD001"
PACKED_VERSION = 1
PERM_MAGIC = b"CFPRM001"
PERM_VERSION = 1

_HEADER = struct.Struct("<8sIIQQQ")  # magic, version, token_width, token_count, doc_count, index_offset
_PERM_HEADER = struct.Struct("<8sIQQ")  # magic, version, seed, n

HEADER_SIZE = _HEADER.size  # 40
SPAN_BYTES = 16  # two u64 per document

_DTYPES = {1: np.dtype("<u1"), 2: np.dtype("<u2"), 4: np.dtype("<u4")}

_U64 = (1 << 64) - 1


class FormatError(Exception):
    """Malformed packed file or permutation sidecar."""


class OutOfRangeError(IndexError):
    """Document or sample ordinal outside the file's range."""


class InvalidKError(ValueError):
    """Chunk count outside [1, max(1, n)]."""


def token_width_for_vocab(vocab_size: int) -> int:
    """Smallest of {1, 2, 4} bytes that can hold ``vocab_size - 1``."""
    if vocab_size < 1:
        raise ValueError(f"vocab_size must be positive, got {vocab_size}")
    if vocab_size <= 1 << 8:
        return 1
    if vocab_size <= 1 << 16:
        return 2
    if vocab_size <= 1 << 32:
        return 4
    raise ValueError(f"vocab_size {vocab_size} exceeds the 4-byte token width")


class PackedWriter:
    """Single-pass streaming writer for packed files.

    Emits a placeholder header, streams token payload as documents arrive,
    appends the span index on close, then patches the real header in place.
    Writers are exclusive; there is no concurrent append.
    """

    def __init__(self, path: str | os.PathLike, token_width: int):
        if token_width not in _DTYPES:
            raise ValueError(f"token_width must be one of 1, 2, 4; got {token_width}")
        self.path = os.fspath(path)
        self.token_width = token_width
        self._dtype = _DTYPES[token_width]
        self._file = open(self.path, "wb")
        self._file.write(b"\x00" * HEADER_SIZE)
        self._starts: list[int] = []
        self._lengths: list[int] = []
        self._token_count = 0
        self._closed = False

    def write_document(self, ids) -> None:
        """Append one document's token ids and record its span."""
        arr = np.asarray(ids, dtype=self._dtype)
        if arr.ndim != 1:
            raise ValueError("token ids must be a flat sequence")
        self._starts.append(self._token_count)
        self._lengths.append(arr.size)
        self._token_count += arr.size
        self._file.write(arr.tobytes())

    @property
    def doc_count(self) -> int:
        return len(self._starts)

    @property
    def token_count(self) -> int:
        return self._token_count

    def close(self) -> None:
        if self._closed:
            return
        index_offset = HEADER_SIZE + self._token_count * self.token_width
        spans = np.empty((len(self._starts), 2), dtype="<u8")
        spans[:, 0] = self._starts
        spans[:, 1] = self._lengths
        self._file.write(spans.tobytes())
        self._file.seek(0)
        self._file.write(
            _HEADER.pack(
                PACKED_MAGIC,
                PACKED_VERSION,
                self.token_width,
                self._token_count,
                len(self._starts),
                index_offset,
            )
        )
        self._file.close()
        self._closed = True

    def __enter__(self) -> "PackedWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:
            self._file.close()
            self._closed = True


class PackedReader:
    """Memory-mapped reader over a packed file.

    Immutable after open; safe for unlimited concurrent readers.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        size = os.path.getsize(self.path)
        if size < HEADER_SIZE:
            raise FormatError(f"{self.path}: file shorter than the {HEADER_SIZE}-byte header")
        self._file = open(self.path, "rb")
        self._mm = mmap.mmap(self._file.fileno(), 0, access=mmap.ACCESS_READ)
        magic, version, width, token_count, doc_count, index_offset = _HEADER.unpack(
            self._mm[:HEADER_SIZE]
        )
        if magic != PACKED_MAGIC:
            raise FormatError(f"{self.path}: bad magic {magic!r}")
        if version != PACKED_VERSION:
            raise FormatError(f"{self.path}: unsupported version {version}")
        if width not in _DTYPES:
            raise FormatError(f"{self.path}: invalid token width {width}")
        if index_offset != HEADER_SIZE + token_count * width:
            raise FormatError(
                f"{self.path}: index_offset {index_offset} does not match "
                f"{HEADER_SIZE} + {token_count} * {width}"
            )
        if size != index_offset + doc_count * SPAN_BYTES:
            raise FormatError(
                f"{self.path}: file length {size} does not match header "
                f"(expected {index_offset + doc_count * SPAN_BYTES})"
            )
        self.token_width = width
        self.token_count = token_count
        self.doc_count = doc_count
        self._payload = np.frombuffer(
            self._mm, dtype=_DTYPES[width], count=token_count, offset=HEADER_SIZE
        )
        self._spans = np.frombuffer(
            self._mm, dtype="<u8", count=doc_count * 2, offset=index_offset
        ).reshape(doc_count, 2)

    @property
    def spans(self) -> np.ndarray:
        """(doc_count, 2) array of (start_token, token_length), read-only."""
        return self._spans

    def get_document_tokens(self, i: int) -> np.ndarray:
        """Token ids of document ``i`` as a zero-copy payload slice."""
        if not 0 <= i < self.doc_count:
            raise OutOfRangeError(f"document {i} out of range [0, {self.doc_count})")
        start, length = self._spans[i]
        return self._payload[int(start) : int(start + length)]

    def sample_count(self, seq_len: int) -> int:
        """Number of fixed-length samples; each needs seq_len + 1 tokens."""
        if seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {seq_len}")
        if self.token_count == 0:
            return 0
        return (self.token_count - 1) // seq_len

    def get_sample(self, s: int, seq_len: int) -> np.ndarray:
        """Tokens [s * L, s * L + L] of the concatenated stream (L + 1 ids)."""
        if not 0 <= s < self.sample_count(seq_len):
            raise OutOfRangeError(
                f"sample {s} out of range [0, {self.sample_count(seq_len)}) for L={seq_len}"
            )
        lo = s * seq_len
        return self._payload[lo : lo + seq_len + 1]

    def close(self) -> None:
        del self._payload
        del self._spans
        self._mm.close()
        self._file.close()

    def __enter__(self) -> "PackedReader":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def open_packed(path: str | os.PathLike) -> PackedReader:
    """Open a packed file for reading, verifying header invariants."""
    return PackedReader(path)


# --- Seeded shuffling -------------------------------------------------------


def splitmix64(state: int):
    """Infinite SplitMix64 stream starting from ``state``.

    The generator is specified exactly so permutations are bit-identical
    across platforms and implementations.
    """
    state &= _U64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _U64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
        yield z ^ (z >> 31)


@dataclass
class Permutation:
    """Seeded bijection of {0..n-1}; regenerable bit-exactly from (seed, n)."""

    seed: int
    order: np.ndarray  # uint64, shape (n,)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Permutation):
            return NotImplemented
        return self.seed == other.seed and np.array_equal(self.order, other.order)

    def __len__(self) -> int:
        return len(self.order)


def make_permutation(n: int, seed: int) -> Permutation:
    """Fisher-Yates shuffle of [0, n) driven by SplitMix64.

    Walks i from n-1 down to 1 and swaps with j drawn uniformly from [0, i]
    by rejection sampling: accept x < floor(2^64 / (i+1)) * (i+1), then
    j = x mod (i+1). Rejection keeps the draw exactly uniform.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    order = list(range(n))
    # SplitMix64 inlined: the loop is hot for multi-million-document corpora.
    state = seed & _U64
    for i in range(n - 1, 0, -1):
        bound = i + 1
        threshold = (0x10000000000000000 // bound) * bound
        while True:
            state = (state + 0x9E3779B97F4A7C15) & _U64
            z = state
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
            x = z ^ (z >> 31)
            if x < threshold:
                break
        j = x % bound
        order[i], order[j] = order[j], order[i]
    return Permutation(seed=seed, order=np.array(order, dtype="<u8"))


def write_permutation(perm: Permutation, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(_PERM_HEADER.pack(PERM_MAGIC, PERM_VERSION, perm.seed, len(perm.order)))
        f.write(perm.order.astype("<u8", copy=False).tobytes())


def load_permutation(path: str | os.PathLike) -> Permutation:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _PERM_HEADER.size:
        raise FormatError(f"{path}: truncated permutation header")
    magic, version, seed, n = _PERM_HEADER.unpack(data[: _PERM_HEADER.size])
    if magic != PERM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PERM_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(data) != _PERM_HEADER.size + n * 8:
        raise FormatError(f"{path}: truncated permutation body")
    order = np.frombuffer(data, dtype="<u8", count=n, offset=_PERM_HEADER.size).copy()
    return Permutation(seed=seed, order=order)


# --- Chunking ---------------------------------------------------------------


@dataclass
class ChunkSpec:
    """Contiguous k-way split of a permuted document list.

    Slice sizes differ by at most one: the first n mod k chunks get the
    extra document. Concatenating ``assignments`` reproduces the permutation.
    """

    chunk_count: int
    assignments: list[np.ndarray]


def chunk(perm: Permutation, k: int) -> ChunkSpec:
    n = len(perm.order)
    if not 1 <= k <= max(1, n):
        raise InvalidKError(f"k must be in [1, {max(1, n)}], got {k}")
    q, r = divmod(n, k)
    assignments = []
    lo = 0
    for c in range(k):
        size = q + 1 if c < r else q
        assignments.append(perm.order[lo : lo + size])
        lo += size
    return ChunkSpec(chunk_count=k, assignments=assignments)


def materialize_chunk(reader: PackedReader, docs, out_path: str | os.PathLike) -> None:
    """Write the given documents, in order, as a standalone packed file.

    The output gets a rebuilt contiguous span index and is itself a valid
    packed dataset with the source's token width.
    """
    with PackedWriter(out_path, reader.token_width) as writer:
        for d in docs:
            writer.write_document(reader.get_document_tokens(int(d)))
