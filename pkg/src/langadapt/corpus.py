"""Corpus ingestion, text normalization, and per-language counting.

Raw corpora arrive either as plain text (one document per line) or as JSON
lines with a required ``"text"`` field. Documents are NFC-normalized and
trimmed on ingestion so that downstream tokenizer training and token
statistics are reproducible. Malformed records fail fast; corpus builds must
be auditable, so nothing is silently skipped except empty lines (which are
counted).
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator

__all__ = [
    "CorpusDocument",
    "IngestError",
    "IngestStats",
    "LanguageStats",
    "TaskRecord",
    "TaskType",
    "corpus_stats",
    "ingest",
    "merge_stats",
    "normalize",
    "read_task_records",
]

PLAIN_LINES = "plain_lines"
JSON_LINES = "json_lines"
_FORMATS = (PLAIN_LINES, JSON_LINES)


class TaskType(str, Enum):
    """Task families a dataset record can belong to."""

    CLASSIFICATION = "classification"
    TRANSLATION = "translation"
    SUMMARIZATION = "summarization"
    QUESTION_ANSWERING = "question_answering"
    PARAPHRASING = "paraphrasing"
    GENERATION = "generation"


class IngestError(ValueError):
    """Malformed corpus input; the message names the offending line."""


def _check_language(code: str) -> None:
    if len(code) != 3 or not code.isascii() or not code.isalpha() or not code.islower():
        raise ValueError(f"language must be a lowercase 3-letter code, got {code!r}")


@dataclass(frozen=True)
class CorpusDocument:
    """One unit of raw text, uniquely identified by (source, id)."""

    id: str
    text: str
    language: str
    source: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("document id must be non-empty")
        if not self.source:
            raise ValueError("document source must be non-empty")
        _check_language(self.language)


@dataclass(frozen=True)
class TaskRecord:
    """One row of a task dataset: named string slots plus an optional label.

    By convention classification records carry a ``text`` slot and a label,
    and translation records carry both a ``src`` and a ``tgt`` slot. The
    ``fields`` mapping is treated as immutable after construction.
    """

    id: str
    fields: dict[str, str]
    label: str | None
    task_type: TaskType
    language: str
    source: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("record id must be non-empty")
        if not self.source:
            raise ValueError("record source must be non-empty")
        _check_language(self.language)
        object.__setattr__(self, "task_type", TaskType(self.task_type))
        for key, value in self.fields.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ValueError(f"record {self.id!r}: slots must map str to str")
        if self.task_type is TaskType.CLASSIFICATION and not self.label:
            raise ValueError(f"classification record {self.id!r} has no label")
        if self.task_type is TaskType.TRANSLATION:
            if "src" not in self.fields or "tgt" not in self.fields:
                raise ValueError(
                    f"translation record {self.id!r} must carry 'src' and 'tgt' slots"
                )


def normalize(text: str) -> str:
    """NFC-normalize, collapse whitespace runs to single ASCII spaces, trim.

    Idempotent, and never increases the codepoint count beyond what NFC
    composition itself does.
    """
    return " ".join(unicodedata.normalize("NFC", text).split())


@dataclass
class IngestStats:
    """Mutable counters filled in while an ingest stream is consumed."""

    lines_read: int = 0
    documents: int = 0
    skipped_empty: int = 0


def ingest(
    path,
    format: str = PLAIN_LINES,
    *,
    language: str,
    source: str,
    stats: IngestStats | None = None,
) -> Iterator[CorpusDocument]:
    """Stream documents from a corpus file, one per non-empty line or record.

    Text is NFC-normalized and trimmed; lines that are empty after trimming
    are skipped and counted in ``stats``. JSON lines must be objects with a
    ``"text"`` field; a missing ``"id"`` defaults to the 0-based line number
    as a decimal string (plain lines are numbered the same way). Malformed
    records raise :class:`IngestError` naming the 1-based line.
    """
    if format not in _FORMATS:
        raise ValueError(f"unknown corpus format {format!r}; expected one of {_FORMATS}")
    if stats is None:
        stats = IngestStats()
    seen: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle):
            stats.lines_read += 1
            if format == PLAIN_LINES:
                doc_id = str(lineno)
                text = line
            else:
                payload = line.strip()
                if not payload:
                    stats.skipped_empty += 1
                    continue
                try:
                    record = json.loads(payload)
                except json.JSONDecodeError as exc:
                    raise IngestError(
                        f"{path}: line {lineno + 1}: invalid JSON: {exc.msg}"
                    ) from exc
                if not isinstance(record, dict) or "text" not in record:
                    raise IngestError(
                        f"{path}: line {lineno + 1}: record has no 'text' field"
                    )
                text = record["text"]
                if not isinstance(text, str):
                    raise IngestError(
                        f"{path}: line {lineno + 1}: 'text' must be a string"
                    )
                doc_id = str(record["id"]) if "id" in record else str(lineno)
            text = unicodedata.normalize("NFC", text).strip()
            if not text:
                stats.skipped_empty += 1
                continue
            if doc_id in seen:
                raise IngestError(
                    f"{path}: duplicate document id {doc_id!r} for source {source!r}"
                )
            seen.add(doc_id)
            stats.documents += 1
            yield CorpusDocument(id=doc_id, text=text, language=language, source=source)


def read_task_records(
    path,
    *,
    language: str | None = None,
    source: str,
) -> Iterator[TaskRecord]:
    """Stream task records from a JSON-lines file.

    Each line is an object with a ``"fields"`` mapping and a ``"task_type"``;
    ``"id"``, ``"label"`` and ``"language"`` are optional (a record-level
    language overrides the default passed here). (source, id) pairs must be
    unique within the file.
    """
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle):
            payload = line.strip()
            if not payload:
                continue
            try:
                record = json.loads(payload)
            except json.JSONDecodeError as exc:
                raise IngestError(
                    f"{path}: line {lineno + 1}: invalid JSON: {exc.msg}"
                ) from exc
            if not isinstance(record, dict):
                raise IngestError(f"{path}: line {lineno + 1}: record must be an object")
            try:
                fields = record.get("fields", {})
                if not isinstance(fields, dict):
                    raise ValueError("'fields' must be an object")
                lang = record.get("language", language)
                if lang is None:
                    raise ValueError("record has no language and no default was given")
                rec = TaskRecord(
                    id=str(record["id"]) if "id" in record else str(lineno),
                    fields={str(k): str(v) for k, v in fields.items()},
                    label=record.get("label"),
                    task_type=TaskType(record.get("task_type", "")),
                    language=lang,
                    source=str(record.get("source", source)),
                )
            except ValueError as exc:
                raise IngestError(f"{path}: line {lineno + 1}: {exc}") from exc
            key = (rec.source, rec.id)
            if key in seen:
                raise IngestError(
                    f"{path}: duplicate record id {rec.id!r} for source {rec.source!r}"
                )
            seen.add(key)
            yield rec


@dataclass(frozen=True)
class LanguageStats:
    """Exact counts for one language within a document stream."""

    doc_count: int = 0
    whitespace_word_count: int = 0
    codepoint_count: int = 0


def corpus_stats(docs: Iterable[CorpusDocument]) -> dict[str, LanguageStats]:
    """Count documents, whitespace-delimited words, and codepoints per language.

    A word is a maximal non-whitespace run. Totals are invariant under any
    permutation of the input stream.
    """
    acc: dict[str, list[int]] = {}
    for doc in docs:
        entry = acc.setdefault(doc.language, [0, 0, 0])
        entry[0] += 1
        entry[1] += len(doc.text.split())
        entry[2] += len(doc.text)
    return {lang: LanguageStats(*entry) for lang, entry in sorted(acc.items())}


def merge_stats(
    a: dict[str, LanguageStats], b: dict[str, LanguageStats]
) -> dict[str, LanguageStats]:
    """Associatively merge two partial count maps (for sharded counting)."""
    merged: dict[str, LanguageStats] = {}
    for lang in sorted(set(a) | set(b)):
        left = a.get(lang, LanguageStats())
        right = b.get(lang, LanguageStats())
        merged[lang] = LanguageStats(
            left.doc_count + right.doc_count,
            left.whitespace_word_count + right.whitespace_word_count,
            left.codepoint_count + right.codepoint_count,
        )
    return merged
