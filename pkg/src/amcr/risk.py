"""Risk corpus and max-cosine risk scoring of prompt phrases and slots."""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .backends import TextEncoder, fold
from .errors import ConsistencyError, ContractViolation, ValidationError
from .numerics import cosine, normalize_unit
from .slots import SLOT_ORDER, SlotKind, StructuredPrompt

RESIDUE = "residue"


@dataclass(frozen=True)
class CorpusEntry:
    phrase: str
    embedding: np.ndarray
    tag: str = ""


@dataclass(frozen=True)
class RiskCorpus:
    entries: tuple[CorpusEntry, ...]
    encoder_id: str
    _folded: frozenset[str] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        dims = {e.embedding.shape for e in self.entries}
        if len(dims) > 1:
            raise ConsistencyError(f"corpus embeddings have mixed shapes {sorted(dims)}")
        folded = [fold(e.phrase) for e in self.entries]
        if len(set(folded)) != len(folded):
            raise ConsistencyError("corpus phrases are not unique after case-folding")
        object.__setattr__(self, "_folded", frozenset(folded))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> int:
        return int(self.entries[0].embedding.shape[0]) if self.entries else 0

    def contains(self, phrase: str) -> bool:
        return fold(phrase) in self._folded

    def phrases(self) -> list[str]:
        return [e.phrase for e in self.entries]

    @classmethod
    def build(cls, phrases: Iterable[str], encoder: TextEncoder, tags: Sequence[str] | None = None) -> RiskCorpus:
        records = [{"phrase": p} for p in phrases]
        for rec, tag in zip(records, tags or [], strict=False):
            rec["tag"] = tag
        return _from_records(records, encoder, source="<memory>")


def _from_records(records: list[dict[str, Any]], encoder: TextEncoder | None, source: str) -> RiskCorpus:
    entries: list[CorpusEntry] = []
    seen: set[str] = set()
    pending: list[int] = []
    vectors: list[np.ndarray | None] = []
    dim = encoder.dim if encoder is not None else None
    for lineno, rec in records_with_lines(records):
        key = fold(rec["phrase"])
        if key in seen:
            continue
        seen.add(key)
        emb = rec.get("embedding")
        if emb is None:
            pending.append(len(vectors))
            vectors.append(None)
        else:
            v = np.asarray(emb, dtype=np.float64)
            if v.ndim != 1 or v.size == 0 or not np.all(np.isfinite(v)):
                raise ValidationError(f"{source}:{lineno}: embedding must be a finite real array")
            if dim is None:
                dim = v.size
            if v.size != dim:
                raise ConsistencyError(f"{source}:{lineno}: embedding has dimension {v.size}, expected {dim}")
            vectors.append(normalize_unit(v))
        entries.append(CorpusEntry(rec["phrase"], np.empty(0), rec.get("tag", "")))
    if pending:
        if encoder is None:
            raise ContractViolation("an encoder is needed for corpus entries without embeddings")
        embedded = encoder.embed([fold(entries[i].phrase) for i in pending])
        for i, v in zip(pending, embedded, strict=True):
            vectors[i] = v
    final = tuple(CorpusEntry(e.phrase, v, e.tag) for e, v in zip(entries, vectors, strict=True))
    encoder_id = encoder.id if encoder is not None else "precomputed"
    return RiskCorpus(final, encoder_id)


def records_with_lines(records: list[dict[str, Any]]) -> Iterable[tuple[int, dict[str, Any]]]:
    for i, rec in enumerate(records, start=1):
        yield rec.get("_line", i), rec


def parse_corpus_lines(lines: Iterable[str], source: str = "<corpus>") -> list[dict[str, Any]]:
    """Parse line-delimited corpus records (JSON objects or JSON strings)."""
    records = []
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{source}:{lineno}: malformed record ({exc.msg})") from None
        if isinstance(rec, str):
            rec = {"phrase": rec}
        if not isinstance(rec, dict) or not isinstance(rec.get("phrase"), str) or not rec["phrase"].strip():
            raise ValidationError(f"{source}:{lineno}: record needs a non-empty 'phrase' string")
        tag = rec.get("tag", "")
        if not isinstance(tag, str):
            raise ValidationError(f"{source}:{lineno}: 'tag' must be a string")
        emb = rec.get("embedding")
        if emb is not None and not (isinstance(emb, list) and all(isinstance(x, (int, float)) for x in emb)):
            raise ValidationError(f"{source}:{lineno}: 'embedding' must be an array of reals")
        records.append({"phrase": rec["phrase"].strip(), "tag": tag, "embedding": emb, "_line": lineno})
    return records


def load_corpus(source: str | Path, encoder: TextEncoder | None) -> RiskCorpus:
    path = Path(source)
    with path.open(encoding="utf-8") as fh:
        records = parse_corpus_lines(fh, str(path))
    if not records:
        raise ValidationError(f"{path}: corpus is empty")
    return _from_records(records, encoder, str(path))


def _check(corpus: RiskCorpus, encoder: TextEncoder) -> None:
    if not len(corpus):
        raise ContractViolation("risk corpus is empty")
    if corpus.encoder_id not in (encoder.id, "precomputed"):
        raise ConsistencyError(f"corpus was embedded with {corpus.encoder_id!r}, scoring with {encoder.id!r}")
    if corpus.dim != encoder.dim:
        raise ConsistencyError(f"corpus dimension {corpus.dim} != encoder dimension {encoder.dim}")


def nearest(s: str, corpus: RiskCorpus, encoder: TextEncoder) -> tuple[float, str]:
    """Highest cosine against the corpus and the phrase that attains it.

    Linear scan; the earliest entry wins ties.
    """
    if not s or not s.strip():
        raise ContractViolation("cannot score an empty phrase")
    _check(corpus, encoder)
    q = encoder.embed([fold(s)])[0]
    best, best_phrase = -np.inf, ""
    for entry in corpus.entries:
        c = cosine(q, entry.embedding)
        if c > best:
            best, best_phrase = c, entry.phrase
    return float(best), best_phrase


def score_text(s: str, corpus: RiskCorpus, encoder: TextEncoder) -> float:
    return nearest(s, corpus, encoder)[0]


def score_slot(phrases: Sequence[str], corpus: RiskCorpus, encoder: TextEncoder) -> float:
    """Risk of a slot: the largest phrase risk, 0 for an empty slot."""
    if not phrases:
        return 0.0
    return max(score_text(p, corpus, encoder) for p in phrases)


@dataclass
class SlotRiskReport:
    per_phrase: dict[str, dict[str, Any]]
    per_slot: dict[str, float]
    ranking: list[str]

    def to_dict(self) -> dict[str, Any]:
        return {"per_phrase": self.per_phrase, "per_slot": self.per_slot, "ranking": self.ranking}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SlotRiskReport:
        return cls(dict(data["per_phrase"]), dict(data["per_slot"]), list(data["ranking"]))


def slot_buckets(sp: StructuredPrompt) -> list[tuple[str, tuple[str, ...]]]:
    """Non-empty slots in fixed kind order, residue last."""
    buckets = [(k.value, sp.get(k)) for k in SLOT_ORDER if sp.get(k)]
    if sp.residue:
        buckets.append((RESIDUE, sp.residue))
    return buckets


def bucket_kind(name: str) -> SlotKind | None:
    return None if name == RESIDUE else SlotKind(name)


def rank_slots(sp: StructuredPrompt, corpus: RiskCorpus, encoder: TextEncoder) -> SlotRiskReport:
    per_phrase: dict[str, dict[str, Any]] = {}
    per_slot: dict[str, float] = {}
    order: dict[str, int] = {}
    for i, (name, phrases) in enumerate(slot_buckets(sp)):
        order[name] = i
        scores = []
        for p in phrases:
            if p not in per_phrase:
                score, near = nearest(p, corpus, encoder)
                per_phrase[p] = {"score": score, "nearest_corpus_phrase": near}
            scores.append(per_phrase[p]["score"])
        per_slot[name] = max(scores) if scores else 0.0
    ranking = sorted(per_slot, key=lambda name: (-per_slot[name], order[name]))
    return SlotRiskReport(per_phrase, per_slot, ranking)
