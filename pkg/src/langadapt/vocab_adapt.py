"""Remap an embedding matrix onto a new subword vocabulary.

Each new piece found verbatim in the old vocabulary copies its row exactly.
Any other piece is re-encoded with the old tokenizer and initialized to the
arithmetic mean of the resulting rows, accumulated in 64-bit in subtoken
order and stored as 32-bit. Pieces that encode to nothing fall back to the
global mean row, as do special tokens whose names the old model lacks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tokenizer import TokenizerModel, encode_bytes, model_hash

__all__ = [
    "AdaptationReport",
    "EmbeddingFormatError",
    "EmbeddingMatrix",
    "VocabBindingError",
    "adapt_embeddings",
    "load_embeddings",
    "save_embeddings",
]

_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")
_HASH_LEN = 32


class EmbeddingFormatError(ValueError):
    """Malformed embedding file; the message carries a byte offset."""


class VocabBindingError(ValueError):
    """Embedding matrix is not bound to the tokenizer it is used with."""


def _check_hash(vocab_hash: str) -> None:
    if len(vocab_hash) != _HASH_LEN or any(
        c not in "0123456789abcdef" for c in vocab_hash
    ):
        raise ValueError(
            f"vocab_hash must be {_HASH_LEN} lowercase hex characters, got {vocab_hash!r}"
        )


@dataclass
class EmbeddingMatrix:
    """A |V| x d float32 matrix bound to a tokenizer by vocab hash."""

    data: np.ndarray
    vocab_hash: str

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_array(cls, array, vocab_hash: str) -> "EmbeddingMatrix":
        data = np.ascontiguousarray(array, dtype=np.float32)
        if data.ndim != 2:
            raise ValueError(f"embedding data must be 2-dimensional, got {data.ndim}")
        _check_hash(vocab_hash)
        return cls(data=data, vocab_hash=vocab_hash)

    def validate(self) -> None:
        if self.data.ndim != 2 or self.rows < 1 or self.dims < 1:
            raise ValueError("embedding matrix must have at least one row and column")
        _check_hash(self.vocab_hash)
        finite_rows = np.isfinite(self.data).all(axis=1)
        if not finite_rows.all():
            bad = int(np.flatnonzero(~finite_rows)[0])
            raise ValueError(f"non-finite value in embedding row {bad}")


def save_embeddings(matrix: EmbeddingMatrix, path) -> None:
    """Write the binary embedding format; save then load is bit-identical.

    Layout (little-endian, no padding): magic ``EMB1``, u32 rows, u32 dims,
    32 hex bytes of vocab hash, then rows*dims float32 row-major.
    """
    matrix.validate()
    blob = b"".join(
        (
            _HEADER.pack(_MAGIC, matrix.rows, matrix.dims),
            matrix.vocab_hash.encode("ascii"),
            np.ascontiguousarray(matrix.data, dtype="<f4").tobytes(),
        )
    )
    Path(path).write_bytes(blob)


def load_embeddings(path) -> EmbeddingMatrix:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise EmbeddingFormatError(
            f"{path}: truncated at byte offset {len(blob)}: missing magic"
        )
    if blob[:4] != _MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic at byte offset 0")
    if len(blob) < _HEADER.size:
        raise EmbeddingFormatError(
            f"{path}: truncated at byte offset {len(blob)}: incomplete header"
        )
    _, rows, dims = _HEADER.unpack_from(blob)
    if rows == 0:
        raise EmbeddingFormatError(f"{path}: rows=0 at byte offset 4")
    if dims == 0:
        raise EmbeddingFormatError(f"{path}: dims=0 at byte offset 8")
    hash_end = _HEADER.size + _HASH_LEN
    if len(blob) < hash_end:
        raise EmbeddingFormatError(
            f"{path}: truncated at byte offset {len(blob)}: incomplete vocab hash"
        )
    vocab_hash = blob[_HEADER.size : hash_end].decode("ascii", errors="replace")
    try:
        _check_hash(vocab_hash)
    except ValueError as exc:
        raise EmbeddingFormatError(f"{path}: at byte offset {_HEADER.size}: {exc}") from exc
    expected = hash_end + rows * dims * 4
    if len(blob) != expected:
        raise EmbeddingFormatError(
            f"{path}: length mismatch at byte offset {min(len(blob), expected)}: "
            f"expected {expected} bytes, got {len(blob)}"
        )
    data = (
        np.frombuffer(blob, dtype="<f4", offset=hash_end, count=rows * dims)
        .reshape(rows, dims)
        .astype(np.float32)
    )
    return EmbeddingMatrix(data=data, vocab_hash=vocab_hash)


@dataclass(frozen=True)
class AdaptationReport:
    """Provenance of every row produced by :func:`adapt_embeddings`.

    ``per_piece_provenance`` maps new token ids to ``"copied"``,
    ``"averaged:<k>"`` (k old subtokens), or ``"fallback"``. The three counts
    always sum to the new vocabulary size.
    """

    copied: int
    averaged: int
    fallback: int
    per_piece_provenance: dict[int, str]

    def to_json_dict(self) -> dict:
        return {
            "copied": self.copied,
            "averaged": self.averaged,
            "fallback": self.fallback,
            "per_piece_provenance": {
                str(k): v for k, v in sorted(self.per_piece_provenance.items())
            },
        }


def adapt_embeddings(
    old_tok: TokenizerModel,
    old_emb: EmbeddingMatrix,
    new_tok: TokenizerModel,
) -> tuple[EmbeddingMatrix, AdaptationReport]:
    """Remap ``old_emb`` from ``old_tok``'s vocabulary to ``new_tok``'s.

    Row computations are independent of each other and of id order; copied
    rows are bit-exact, averaged rows accumulate in float64 left-to-right
    over the encoded subtoken order before rounding to float32.
    """
    if old_emb.vocab_hash != model_hash(old_tok):
        raise VocabBindingError(
            "embedding matrix is not bound to the given old tokenizer "
            f"(vocab_hash {old_emb.vocab_hash} != {model_hash(old_tok)})"
        )
    if old_emb.rows != old_tok.piece_count:
        raise VocabBindingError(
            f"embedding rows ({old_emb.rows}) != old vocabulary size "
            f"({old_tok.piece_count})"
        )
    finite_rows = np.isfinite(old_emb.data).all(axis=1)
    if not finite_rows.all():
        bad = int(np.flatnonzero(~finite_rows)[0])
        raise ValueError(f"non-finite value in old embedding row {bad}")
    for offset, model in ((old_tok.byte_offset, old_tok), (new_tok.byte_offset, new_tok)):
        for b in range(256):
            if model.pieces[offset + b] != bytes([b]):
                raise ValueError("tokenizers do not share the byte-level base alphabet")

    old32 = old_emb.data
    old64 = old32.astype(np.float64)
    dims = old_emb.dims
    old_index = {piece: i for i, piece in enumerate(old_tok.pieces)}
    old_special_rows = {name: old32[i] for name, i in old_tok.special_tokens.items()}
    new_special_ids = set(new_tok.special_tokens.values())

    global_mean: np.ndarray | None = None

    def fallback_row() -> np.ndarray:
        nonlocal global_mean
        if global_mean is None:
            global_mean = (old64.sum(axis=0) / old_emb.rows).astype(np.float32)
        return global_mean

    new_data = np.empty((new_tok.piece_count, dims), dtype=np.float32)
    provenance: dict[int, str] = {}
    copied = averaged = fallback = 0

    for name, new_id in new_tok.special_tokens.items():
        row = old_special_rows.get(name)
        if row is not None:
            new_data[new_id] = row
            provenance[new_id] = "copied"
            copied += 1
        else:
            new_data[new_id] = fallback_row()
            provenance[new_id] = "fallback"
            fallback += 1

    for new_id, piece in enumerate(new_tok.pieces):
        if new_id in new_special_ids:
            continue
        old_id = old_index.get(piece)
        if old_id is not None:
            new_data[new_id] = old32[old_id]
            provenance[new_id] = "copied"
            copied += 1
            continue
        subtokens = encode_bytes(old_tok, piece)
        if subtokens:
            acc = np.zeros(dims, dtype=np.float64)
            for token_id in subtokens:
                acc += old64[token_id]
            new_data[new_id] = (acc / len(subtokens)).astype(np.float32)
            provenance[new_id] = f"averaged:{len(subtokens)}"
            averaged += 1
        else:
            new_data[new_id] = fallback_row()
            provenance[new_id] = "fallback"
            fallback += 1

    matrix = EmbeddingMatrix.from_array(new_data, model_hash(new_tok))
    report = AdaptationReport(
        copied=copied,
        averaged=averaged,
        fallback=fallback,
        per_piece_provenance=provenance,
    )
    assert copied + averaged + fallback == new_tok.piece_count
    return matrix, report
