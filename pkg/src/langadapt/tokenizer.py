"""Byte-level BPE: vocabulary training, encoding, and token-efficiency reports.

Training greedily merges the most frequent adjacent token pair until the
vocabulary target is reached or no pair occurs at least twice. Ties on pair
frequency break by lower left id, then lower right id, so training is
deterministic on any platform and independent of thread count. Merges never
cross an ASCII whitespace byte, which keeps learned pieces word-internal and
stabilizes fertility numbers.

Token ids are laid out as: special placeholders first, then the 256 single
bytes, then one piece per learned merge. Because the base alphabet is the
full byte range, every input is encodable and ``decode(encode(x)) == x``.
"""

from __future__ import annotations

import base64
import hashlib
import heapq
import json
import re
import weakref
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import CorpusDocument

__all__ = [
    "FertilityReport",
    "REQUIRED_SPECIALS",
    "TokenizerModel",
    "compare_fertility",
    "decode",
    "encode",
    "encode_bytes",
    "fertility",
    "load_model",
    "model_hash",
    "save_model",
    "serialize_model",
    "train_bpe",
    "validate_model",
]

MODEL_FORMAT_VERSION = 1
REQUIRED_SPECIALS = ("pad", "eos", "unk")

# Merges must not cross these bytes; runs of them encode as single-byte tokens.
_WS = b" \t\n\r\x0b\x0c"
_WS_SET = frozenset(_WS)
_WORD_RE = re.compile(rb"[^ \t\n\r\x0b\x0c]+")
_SEG_RE = re.compile(rb"[ \t\n\r\x0b\x0c]+|[^ \t\n\r\x0b\x0c]+")

_MIN_PAIR_FREQ = 2
_WORD_CACHE_LIMIT = 1 << 20


@dataclass(frozen=True, eq=False)
class TokenizerModel:
    """A learned subword vocabulary plus its merge rules and special tokens.

    ``pieces[i]`` is the byte sequence of token id ``i``. Models are
    immutable and safe to share across threads; they compare by identity,
    so compare :func:`serialize_model` output for structural equality.
    """

    pieces: tuple[bytes, ...]
    merges: tuple[tuple[int, int], ...]
    special_tokens: dict[str, int]
    version: int = MODEL_FORMAT_VERSION

    @property
    def byte_offset(self) -> int:
        """Id of byte 0; single byte ``b`` has id ``byte_offset + b``."""
        return len(self.special_tokens)

    @property
    def piece_count(self) -> int:
        return len(self.pieces)


def validate_model(model: TokenizerModel) -> None:
    """Check the structural invariants of a model; raise ValueError if broken."""
    k = len(model.special_tokens)
    if model.version < 1:
        raise ValueError(f"model version must be >= 1, got {model.version}")
    if sorted(model.special_tokens.values()) != list(range(k)):
        raise ValueError("special token ids must be exactly 0..len(specials)-1")
    if len(model.pieces) < k + 256:
        raise ValueError("model must contain the 256 single-byte base pieces")
    for i in range(256):
        if model.pieces[k + i] != bytes([i]):
            raise ValueError(f"piece {k + i} must be the single byte {i:#04x}")
    if len(model.merges) != len(model.pieces) - k - 256:
        raise ValueError("merge count must equal the number of learned pieces")
    for rank, (left, right) in enumerate(model.merges):
        piece_id = k + 256 + rank
        if not (k <= left < piece_id and k <= right < piece_id):
            raise ValueError(f"merge {rank} references undefined or special ids")
        if model.pieces[piece_id] != model.pieces[left] + model.pieces[right]:
            raise ValueError(f"piece {piece_id} does not equal its merge concatenation")
    for piece in model.pieces:
        if not piece:
            raise ValueError("pieces must be non-empty byte sequences")
    if len(set(model.pieces)) != len(model.pieces):
        raise ValueError("piece list contains duplicates")


def train_bpe(
    docs: Iterable[CorpusDocument],
    vocab_size: int,
    special_names: Sequence[str] = REQUIRED_SPECIALS,
    seed: int = 0,
) -> TokenizerModel:
    """Learn a byte-level BPE vocabulary of exactly ``vocab_size`` pieces.

    Stops early only when no adjacent pair occurs at least twice. The result
    is fully determined by the corpus and parameters; ``seed`` is accepted
    for pipeline plumbing but never consulted.
    """
    names = list(special_names)
    if len(set(names)) != len(names):
        raise ValueError("special token names must be unique")
    for required in REQUIRED_SPECIALS:
        if required not in names:
            raise ValueError(f"special token {required!r} is required")
    min_size = 256 + len(names)
    if vocab_size < min_size:
        raise ValueError(
            f"vocab_size must be at least {min_size} "
            f"(256 bytes + {len(names)} specials), got {vocab_size}"
        )
    word_counts: Counter[bytes] = Counter()
    saw_docs = False
    for doc in docs:
        saw_docs = True
        word_counts.update(_WORD_RE.findall(doc.text.encode("utf-8")))
    if not saw_docs or not word_counts:
        raise ValueError("training corpus is empty")
    pieces = [f"<{name}>".encode("utf-8") for name in names]
    pieces.extend(bytes([i]) for i in range(256))
    merges = _learn_merges(word_counts, pieces, vocab_size, len(names))
    model = TokenizerModel(
        pieces=tuple(pieces),
        merges=tuple(merges),
        special_tokens={name: i for i, name in enumerate(names)},
    )
    validate_model(model)
    return model


def _merge_word(ids: list[int], left: int, right: int, new_id: int) -> list[int] | None:
    """Replace (left, right) occurrences left-to-right; None if none found."""
    n = len(ids)
    out: list[int] = []
    i = 0
    matched = False
    while i < n:
        if ids[i] == left and i + 1 < n and ids[i + 1] == right:
            out.append(new_id)
            i += 2
            matched = True
        else:
            out.append(ids[i])
            i += 1
    return out if matched else None


def _learn_merges(
    word_counts: Counter[bytes],
    pieces: list[bytes],
    vocab_size: int,
    byte_offset: int,
) -> list[tuple[int, int]]:
    # Incremental pair bookkeeping: a lazy max-heap of (-count, left, right)
    # entries plus exact pair counts. Stale heap entries are discarded when
    # popped, so the first entry matching its current count is the true
    # maximum under the (count, lowest left, lowest right) order.
    words: list[list[int]] = []
    freqs: list[int] = []
    pair_counts: dict[tuple[int, int], int] = {}
    pair_words: dict[tuple[int, int], set[int]] = {}
    for word, freq in word_counts.items():
        if len(word) < 2:
            continue
        ids = [byte_offset + b for b in word]
        index = len(words)
        words.append(ids)
        freqs.append(freq)
        prev = ids[0]
        for cur in ids[1:]:
            pair = (prev, cur)
            pair_counts[pair] = pair_counts.get(pair, 0) + freq
            members = pair_words.get(pair)
            if members is None:
                pair_words[pair] = {index}
            else:
                members.add(index)
            prev = cur

    heap = [(-count, pair[0], pair[1]) for pair, count in pair_counts.items()]
    heapq.heapify(heap)
    existing = set(pieces)
    banned: set[tuple[int, int]] = set()
    merges: list[tuple[int, int]] = []

    while len(pieces) < vocab_size and heap:
        neg_count, left, right = heapq.heappop(heap)
        pair = (left, right)
        count = pair_counts.get(pair)
        if count is None or count != -neg_count:
            continue
        if count < _MIN_PAIR_FREQ:
            break
        if pair in banned:
            continue
        merged = pieces[left] + pieces[right]
        if merged in existing:
            # Minting the piece would duplicate an existing one (only special
            # placeholders can collide); never select this pair again.
            banned.add(pair)
            continue
        new_id = len(pieces)
        pieces.append(merged)
        existing.add(merged)
        merges.append(pair)
        affected = pair_words.pop(pair)
        del pair_counts[pair]
        for widx in affected:
            ids = words[widx]
            rewritten = _merge_word(ids, left, right, new_id)
            if rewritten is None:
                continue  # stale membership from an earlier rewrite
            freq = freqs[widx]
            words[widx] = rewritten
            old_pairs = Counter(zip(ids, ids[1:]))
            new_pairs = Counter(zip(rewritten, rewritten[1:]))
            touched = set(old_pairs)
            touched.update(new_pairs)
            for p in touched:
                if p == pair:
                    continue
                delta = new_pairs.get(p, 0) - old_pairs.get(p, 0)
                if delta == 0:
                    continue
                updated = pair_counts.get(p, 0) + delta * freq
                if updated <= 0:
                    pair_counts.pop(p, None)
                    continue
                pair_counts[p] = updated
                heapq.heappush(heap, (-updated, p[0], p[1]))
                if delta > 0:
                    pair_words.setdefault(p, set()).add(widx)
    return merges


class _Encoder:
    """Merge-rank tables plus a per-word segmentation cache for one model."""

    __slots__ = ("_base", "_ranks", "_cache")

    def __init__(self, model: TokenizerModel):
        self._base = model.byte_offset
        self._ranks = {
            pair: (rank, self._base + 256 + rank)
            for rank, pair in enumerate(model.merges)
        }
        self._cache: dict[bytes, list[int]] = {}

    def encode_bytes(self, data: bytes) -> list[int]:
        if not data:
            return []
        base = self._base
        out: list[int] = []
        for segment in _SEG_RE.findall(data):
            if segment[0] in _WS_SET:
                out.extend(base + b for b in segment)
            else:
                out.extend(self._encode_word(segment))
        return out

    def _encode_word(self, word: bytes) -> list[int]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        ranks = self._ranks
        ids = [self._base + b for b in word]
        while len(ids) > 1:
            best: tuple[int, int, int, int] | None = None
            prev = ids[0]
            for cur in ids[1:]:
                entry = ranks.get((prev, cur))
                if entry is not None and (best is None or entry[0] < best[0]):
                    best = (entry[0], entry[1], prev, cur)
                prev = cur
            if best is None:
                break
            _, new_id, left, right = best
            ids = _merge_word(ids, left, right, new_id) or ids
        if len(self._cache) >= _WORD_CACHE_LIMIT:
            self._cache.clear()
        self._cache[word] = ids
        return ids


_ENCODERS: "weakref.WeakKeyDictionary[TokenizerModel, _Encoder]" = (
    weakref.WeakKeyDictionary()
)


def _encoder_for(model: TokenizerModel) -> _Encoder:
    encoder = _ENCODERS.get(model)
    if encoder is None:
        encoder = _Encoder(model)
        _ENCODERS[model] = encoder
    return encoder


def encode(model: TokenizerModel, text: str) -> list[int]:
    """Segment text into token ids by applying merges in learned order.

    Byte-level, so every string is encodable and the output never has more
    tokens than the text has UTF-8 bytes. Special ids are never produced.
    """
    return _encoder_for(model).encode_bytes(text.encode("utf-8"))


def encode_bytes(model: TokenizerModel, data: bytes) -> list[int]:
    """Encode a raw byte sequence (used when pieces are not valid UTF-8)."""
    return _encoder_for(model).encode_bytes(data)


def decode(model: TokenizerModel, ids: Iterable[int]) -> str:
    """Concatenate piece bytes and decode as UTF-8.

    Raises IndexError for out-of-range ids, ValueError for special ids, and
    UnicodeDecodeError when an adversarial id list concatenates to invalid
    UTF-8.
    """
    specials = {v: k for k, v in model.special_tokens.items()}
    count = len(model.pieces)
    parts = []
    for token_id in ids:
        if not 0 <= token_id < count:
            raise IndexError(
                f"token id {token_id} out of range for vocabulary of {count} pieces"
            )
        if token_id in specials:
            raise ValueError(
                f"token id {token_id} is the special token {specials[token_id]!r}"
            )
        parts.append(model.pieces[token_id])
    return b"".join(parts).decode("utf-8")


@dataclass(frozen=True)
class FertilityReport:
    """Average token counts for one language under one tokenizer."""

    language: str
    doc_count: int
    total_tokens: int
    tokens_per_doc: float
    tokens_per_word: float

    def to_json_dict(self) -> dict:
        return {
            "language": self.language,
            "doc_count": self.doc_count,
            "total_tokens": self.total_tokens,
            "tokens_per_doc": self.tokens_per_doc,
            "tokens_per_word": self.tokens_per_word,
        }


def fertility(
    model: TokenizerModel, docs: Iterable[CorpusDocument]
) -> list[FertilityReport]:
    """Measure per-language token counts of a document stream.

    ``tokens_per_word`` divides by whitespace word counts (the same counting
    rule as :func:`langadapt.corpus.corpus_stats`); whitespace tokens are
    included in the numerator. Reports are sorted by language code.
    """
    encoder = _encoder_for(model)
    acc: dict[str, list[int]] = {}
    for doc in docs:
        entry = acc.setdefault(doc.language, [0, 0, 0])
        entry[0] += 1
        entry[1] += len(encoder.encode_bytes(doc.text.encode("utf-8")))
        entry[2] += len(doc.text.split())
    if not acc:
        raise ValueError("fertility requires a non-empty document stream")
    return [
        FertilityReport(
            language=lang,
            doc_count=n_docs,
            total_tokens=n_tokens,
            tokens_per_doc=n_tokens / n_docs,
            tokens_per_word=(n_tokens / n_words) if n_words else 0.0,
        )
        for lang, (n_docs, n_tokens, n_words) in sorted(acc.items())
    ]


def compare_fertility(a: FertilityReport, b: FertilityReport) -> float:
    """Relative token-efficiency improvement of ``a`` over ``b``, in percent.

    Computed as (b.tokens_per_doc - a.tokens_per_doc) / b.tokens_per_doc * 100;
    positive when ``a`` is the more efficient tokenizer.
    """
    if a.language != b.language:
        raise ValueError(
            f"cannot compare fertility across languages ({a.language!r} vs {b.language!r})"
        )
    if b.tokens_per_doc <= 0:
        raise ValueError("baseline tokens_per_doc must be positive")
    return (b.tokens_per_doc - a.tokens_per_doc) / b.tokens_per_doc * 100.0


def serialize_model(model: TokenizerModel) -> bytes:
    """Canonical UTF-8 serialization: pretty-printed JSON with LF endings."""
    payload = {
        "version": model.version,
        "special_tokens": dict(model.special_tokens),
        "pieces": [base64.b64encode(p).decode("ascii") for p in model.pieces],
        "merges": [list(m) for m in model.merges],
    }
    return (json.dumps(payload, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def model_hash(model: TokenizerModel) -> str:
    """Truncated hex SHA-256 over the canonical model file bytes (32 chars)."""
    return hashlib.sha256(serialize_model(model)).hexdigest()[:32]


def save_model(model: TokenizerModel, path) -> None:
    validate_model(model)
    Path(path).write_bytes(serialize_model(model))


def load_model(path) -> TokenizerModel:
    """Load and validate a tokenizer model file."""
    raw = Path(path).read_bytes()
    try:
        payload = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: not a valid tokenizer model file: {exc}") from exc
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: model file must contain a JSON object")
    missing = {"version", "special_tokens", "pieces", "merges"} - payload.keys()
    if missing:
        raise ValueError(f"{path}: model file missing keys {sorted(missing)}")
    try:
        pieces = tuple(
            base64.b64decode(entry, validate=True) for entry in payload["pieces"]
        )
        merges = tuple((int(l), int(r)) for l, r in payload["merges"])
        specials = {str(k): int(v) for k, v in payload["special_tokens"].items()}
        version = int(payload["version"])
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed model file: {exc}") from exc
    model = TokenizerModel(
        pieces=pieces, merges=merges, special_tokens=specials, version=version
    )
    try:
        validate_model(model)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc
    return model
