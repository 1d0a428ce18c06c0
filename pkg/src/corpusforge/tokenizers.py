"""Pluggable text-to-token-id encoders for the tokenization pipeline.

Three kinds are provided: a byte tokenizer (UTF-8 byte identity), a
whitespace tokenizer backed by an external vocabulary file, and a minimal
byte-level BPE tokenizer loaded from vocabulary + merge files. All
tokenizers are immutable after load and safe for concurrent use; encode is
total and deterministic.

File formats: vocabulary files hold one piece per line (id = line number);
merge files hold one ``left<SPACE>right`` pair per line (rank = line
number). Both are UTF-8 with LF line endings.
"""

from __future__ import annotations

import os
from dataclasses import dataclass


class VocabFormatError(Exception):
    """Vocabulary file is malformed (empty or duplicate pieces)."""


class MergeFormatError(Exception):
    """Merge file is malformed or inconsistent with the vocabulary."""


class OutOfVocabError(ValueError):
    """Decode saw a token id outside [0, vocab_size)."""


TOKENIZER_KINDS = ("byte", "whitespace", "bpe")


@dataclass(frozen=True)
class TokenizerSpec:
    """Declarative description of a tokenizer, resolvable via load_tokenizer.

    ``eod_token_id`` is the separator appended after each document by the
    pipeline when enabled; ``unk_token_id`` receives out-of-vocabulary
    pieces and is required for the whitespace and bpe kinds so that encode
    stays total.
    """

    kind: str
    vocab_path: str | None = None
    merges_path: str | None = None
    eod_token_id: int | None = None
    unk_token_id: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in TOKENIZER_KINDS:
            raise ValueError(f"unknown tokenizer kind {self.kind!r}; expected one of {TOKENIZER_KINDS}")
        if self.kind == "whitespace" and self.vocab_path is None:
            raise ValueError("whitespace tokenizer requires vocab_path")
        if self.kind == "bpe" and (self.vocab_path is None or self.merges_path is None):
            raise ValueError("bpe tokenizer requires both vocab_path and merges_path")
        if self.kind in ("whitespace", "bpe") and self.unk_token_id is None:
            raise ValueError(f"{self.kind} tokenizer requires unk_token_id")


class Tokenizer:
    """Common surface: encode/decode plus vocab_size and the eod id."""

    vocab_size: int
    eod_token_id: int | None

    def encode(self, text: str) -> list[int]:
        raise NotImplementedError

    def decode(self, ids) -> str:
        raise NotImplementedError

    def _check_ids(self, ids) -> list[int]:
        out = [int(i) for i in ids]
        for i in out:
            if not 0 <= i < self.vocab_size:
                raise OutOfVocabError(f"id {i} outside [0, {self.vocab_size})")
        return out


class ByteTokenizer(Tokenizer):
    """Identity tokenizer over UTF-8 bytes: id i is byte value i."""

    def __init__(self, eod_token_id: int | None = None):
        self.eod_token_id = eod_token_id
        self.vocab_size = 256 if eod_token_id is None else max(256, eod_token_id + 1)

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        ids = self._check_ids(ids)
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


class WhitespaceTokenizer(Tokenizer):
    """Splits on runs of Unicode whitespace and maps words via the vocabulary."""

    def __init__(self, pieces: list[str], unk_token_id: int, eod_token_id: int | None = None):
        self._pieces = pieces
        self._ids = {piece: i for i, piece in enumerate(pieces)}
        self.unk_token_id = unk_token_id
        self.eod_token_id = eod_token_id
        self.vocab_size = max(
            len(pieces),
            unk_token_id + 1,
            (eod_token_id + 1) if eod_token_id is not None else 0,
        )

    def encode(self, text: str) -> list[int]:
        unk = self.unk_token_id
        ids = self._ids
        return [ids.get(word, unk) for word in text.split()]

    def decode(self, ids) -> str:
        ids = self._check_ids(ids)
        # Ids beyond the vocabulary file (synthetic unk/eod slots) render empty.
        words = [self._pieces[i] for i in ids if i < len(self._pieces)]
        return " ".join(w for w in words if w)


class BpeTokenizer(Tokenizer):
    """Byte-level BPE without pre-tokenization: merges run over whole documents.

    Encoding starts from the document's UTF-8 bytes as single-byte pieces
    and repeatedly applies the lowest-rank merge present anywhere in the
    sequence, breaking rank ties toward the leftmost occurrence, until no
    merge applies. Final pieces missing from the vocabulary map to unk.
    """

    def __init__(
        self,
        pieces: list[bytes],
        merges: list[tuple[bytes, bytes]],
        unk_token_id: int,
        eod_token_id: int | None = None,
    ):
        self._pieces = pieces
        self._ids = {piece: i for i, piece in enumerate(pieces)}
        self._ranks = {pair: rank for rank, pair in enumerate(merges)}
        self.unk_token_id = unk_token_id
        self.eod_token_id = eod_token_id
        self.vocab_size = max(
            len(pieces),
            unk_token_id + 1,
            (eod_token_id + 1) if eod_token_id is not None else 0,
        )

    def encode(self, text: str) -> list[int]:
        raw = text.encode("utf-8")
        pieces = [raw[i : i + 1] for i in range(len(raw))]
        ranks = self._ranks
        while len(pieces) > 1:
            best_rank = None
            best_pos = 0
            left = pieces[0]
            for pos, right in enumerate(pieces[1:]):
                rank = ranks.get((left, right))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_pos = pos
                left = right
            if best_rank is None:
                break
            pieces[best_pos : best_pos + 2] = [pieces[best_pos] + pieces[best_pos + 1]]
        ids = self._ids
        unk = self.unk_token_id
        return [ids.get(piece, unk) for piece in pieces]

    def decode(self, ids) -> str:
        ids = self._check_ids(ids)
        raw = b"".join(self._pieces[i] for i in ids if i < len(self._pieces))
        return raw.decode("utf-8", errors="replace")


def _read_lines(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8", newline="\n") as f:
        text = f.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _load_vocab(path: str) -> list[str]:
    pieces = _read_lines(path)
    seen = set()
    for lineno, piece in enumerate(pieces):
        if piece == "":
            raise VocabFormatError(f"{path}:{lineno + 1}: empty piece")
        if piece in seen:
            raise VocabFormatError(f"{path}:{lineno + 1}: duplicate piece {piece!r}")
        seen.add(piece)
    return pieces


def _load_merges(path: str, vocab: set[bytes]) -> list[tuple[bytes, bytes]]:
    merges: list[tuple[bytes, bytes]] = []
    seen: set[tuple[bytes, bytes]] = set()
    for lineno, line in enumerate(_read_lines(path)):
        parts = line.split(" ")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise MergeFormatError(f"{path}:{lineno + 1}: expected 'left right', got {line!r}")
        pair = (parts[0].encode("utf-8"), parts[1].encode("utf-8"))
        if pair in seen:
            raise MergeFormatError(f"{path}:{lineno + 1}: duplicate merge pair {line!r}")
        seen.add(pair)
        if pair[0] + pair[1] not in vocab:
            raise MergeFormatError(
                f"{path}:{lineno + 1}: merged piece {(parts[0] + parts[1])!r} absent from vocab"
            )
        merges.append(pair)
    return merges


def load_tokenizer(spec: TokenizerSpec) -> Tokenizer:
    """Build a ready-to-use tokenizer from its spec, loading any files."""
    if spec.kind == "byte":
        return ByteTokenizer(eod_token_id=spec.eod_token_id)
    if spec.kind == "whitespace":
        pieces = _load_vocab(os.fspath(spec.vocab_path))
        return WhitespaceTokenizer(
            pieces, unk_token_id=spec.unk_token_id, eod_token_id=spec.eod_token_id
        )
    byte_pieces = [p.encode("utf-8") for p in _load_vocab(os.fspath(spec.vocab_path))]
    merges = _load_merges(os.fspath(spec.merges_path), set(byte_pieces))
    return BpeTokenizer(
        byte_pieces,
        merges,
        unk_token_id=spec.unk_token_id,
        eod_token_id=spec.eod_token_id,
    )
