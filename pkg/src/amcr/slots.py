"""Slot structuring of raw prompts.

A small deterministic grammar splits a prompt into comma / conjunction
delimited clauses, uses marker words ("wearing", "in", "with", gerunds,
infinitives) to pick a slot for each clause, and falls back on editable
lexicons shipped in ``data/lexicons.json``.  An external language-model
provider can be plugged in through :func:`parse_with_provider`; its answer
is validated and the grammar is used whenever it is unusable.
"""

from __future__ import annotations

import enum
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Protocol

from .errors import EmptyPromptError, ProviderError

log = logging.getLogger(__name__)


class SlotKind(str, enum.Enum):
    SUBJECT = "subject"
    SCENE = "scene"
    ACTION = "action"
    CLOTHING = "clothing"
    COLORS = "colors"
    PROPS = "props"
    STYLE = "style"
    LIGHTING = "lighting"
    SHOT = "shot"
    TEXT_LOGO_ENTITY = "text_logo_entity"
    NAMED_ENTITY = "named_entity"


SLOT_ORDER: tuple[SlotKind, ...] = tuple(SlotKind)
SLOT_SCHEMA: tuple[str, ...] = tuple(k.value for k in SlotKind)

RECONSTRUCT_ORDER: tuple[SlotKind, ...] = (
    SlotKind.SUBJECT,
    SlotKind.ACTION,
    SlotKind.SCENE,
    SlotKind.CLOTHING,
    SlotKind.COLORS,
    SlotKind.PROPS,
    SlotKind.STYLE,
    SlotKind.LIGHTING,
    SlotKind.SHOT,
    SlotKind.TEXT_LOGO_ENTITY,
    SlotKind.NAMED_ENTITY,
)

# Marked renderings used by reconstruct_prompt when a bare phrase would be
# re-parsed into a different slot.
_MARKED = {
    SlotKind.CLOTHING: "wearing {}",
    SlotKind.SCENE: "in {}",
    SlotKind.PROPS: "with {}",
    SlotKind.STYLE: "{} style",
    SlotKind.SHOT: "{} shot",
    SlotKind.LIGHTING: "{} lighting",
}

_SEGMENT_SPLIT = re.compile(r"[,;:!?]|\.(?=\s|$)")
_TOKEN = re.compile(r"[^\s\"()\[\]{}]+")
_WORDLIKE = re.compile(r"^[a-z][a-z'\-]*$")


@dataclass(frozen=True)
class Lexicons:
    style: frozenset[str]
    shot: frozenset[str]
    lighting: frozenset[str]
    lighting_heads: frozenset[str]
    colors: frozenset[str]
    color_heads: frozenset[str]
    color_modifiers: frozenset[str]
    clothing_heads: frozenset[str]
    scene_heads: frozenset[str]
    text_logo_heads: frozenset[str]
    non_noun_words: frozenset[str]
    ing_nouns: frozenset[str]
    stopwords: frozenset[str]
    slot_suffixes: frozenset[str]

    @classmethod
    def from_mapping(cls, data: dict[str, list[str]]) -> Lexicons:
        lex = cls(**{name: frozenset(w.lower() for w in data[name]) for name in cls.__dataclass_fields__})
        for name in ("style", "shot", "lighting"):
            for entry in getattr(lex, name):
                for w in entry.split():
                    if w in lex.stopwords or _is_gerund_word(w, lex.ing_nouns):
                        raise ValueError(f"{name} lexicon entry {entry!r} contains marker word {w!r}")
        return lex


@lru_cache(maxsize=1)
def default_lexicons() -> Lexicons:
    text = resources.files("amcr").joinpath("data/lexicons.json").read_text(encoding="utf-8")
    return Lexicons.from_mapping(json.loads(text))


def _is_gerund_word(w: str, ing_nouns: frozenset[str]) -> bool:
    return len(w) >= 5 and w.endswith("ing") and w.isalpha() and w.islower() and w not in ing_nouns


def tokenize(text: str) -> list[str]:
    return [t for seg in _SEGMENT_SPLIT.split(text) for t in _TOKEN.findall(seg)]


def content_words(text: str, lex: Lexicons | None = None) -> list[str]:
    """Case-folded tokens of ``text`` that carry content (non-stopwords)."""
    lex = lex or default_lexicons()
    skip = lex.stopwords | lex.slot_suffixes
    return [t.lower() for t in tokenize(text) if t.lower() not in skip]


class SlotProvider(Protocol):
    """External slotting service.

    ``request`` receives ``{"prompt": str, "schema": [kind names]}`` and
    returns a mapping from slot kind name to a list of phrases.
    """

    def request(self, payload: dict[str, Any]) -> dict[str, Any]: ...


@dataclass(frozen=True)
class StructuredPrompt:
    slots: dict[SlotKind, tuple[str, ...]]
    source: str
    residue: tuple[str, ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        clean: dict[SlotKind, tuple[str, ...]] = {}
        seen: dict[str, SlotKind] = {}
        for kind in SLOT_ORDER:
            phrases = tuple(p.strip() for p in self.slots.get(kind, ()))
            if any(not p for p in phrases):
                raise ValueError(f"empty phrase in slot {kind.value}")
            for p in phrases:
                other = seen.setdefault(p.casefold(), kind)
                if other is not kind:
                    raise ValueError(f"phrase {p!r} appears in both {other.value} and {kind.value}")
            if phrases:
                clean[kind] = phrases
        unknown = set(self.slots) - set(SLOT_ORDER)
        if unknown:
            raise ValueError(f"unknown slot kinds: {unknown}")
        residue = tuple(r.strip() for r in self.residue)
        if any(not r for r in residue):
            raise ValueError("empty residue phrase")
        object.__setattr__(self, "slots", clean)
        object.__setattr__(self, "residue", residue)

    def get(self, kind: SlotKind) -> tuple[str, ...]:
        return self.slots.get(kind, ())

    def phrases(self) -> list[str]:
        return [p for kind in SLOT_ORDER for p in self.get(kind)] + list(self.residue)

    def is_empty(self) -> bool:
        return not self.slots and not self.residue

    def replace(self, kind: SlotKind | None, old: str, new: str) -> StructuredPrompt:
        """Copy with the first occurrence of ``old`` in ``kind`` swapped.

        ``kind=None`` addresses the residue bucket.
        """
        if kind is None:
            residue = list(self.residue)
            residue[residue.index(old)] = new
            return StructuredPrompt(dict(self.slots), self.source, tuple(residue), self.warnings)
        phrases = list(self.get(kind))
        phrases[phrases.index(old)] = new
        slots = dict(self.slots)
        slots[kind] = tuple(phrases)
        return StructuredPrompt(slots, self.source, self.residue, self.warnings)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {k.value: list(v) for k, v in self.slots.items()}
        out["residue"] = list(self.residue)
        out["source"] = self.source
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> StructuredPrompt:
        slots = {SlotKind(k): tuple(v) for k, v in data.items() if k in SLOT_SCHEMA}
        return cls(slots, data.get("source", ""), tuple(data.get("residue", ())))


class _Parser:
    def __init__(self, lex: Lexicons, subject_taken: bool = False):
        self.lex = lex
        self.subject_taken = subject_taken
        self.items: list[tuple[SlotKind | None, str]] = []

    # -- segmentation -------------------------------------------------
    def clauses(self, segment: str) -> list[tuple[str | None, list[str]]]:
        lex = self.lex
        words = _TOKEN.findall(segment)
        out: list[tuple[str | None, list[str]]] = []
        marker: str | None = None
        cur: list[str] = []

        def flush() -> None:
            if cur:
                out.append((marker, list(cur)))
            cur.clear()

        for i, w in enumerate(words):
            lw = w.lower()
            nxt = words[i + 1] if i + 1 < len(words) else ""
            if lw in ("and", "or", "&"):
                flush()
                marker = marker if marker in ("wearing", "scene", "with") else None
            elif lw == "wearing":
                flush()
                marker = "wearing"
            elif lw in ("in", "at", "on"):
                flush()
                marker = "scene"
            elif lw == "with":
                flush()
                marker = "with"
            elif _is_gerund_word(w, lex.ing_nouns) or (
                lw == "to" and _WORDLIKE.match(nxt) and nxt not in lex.stopwords
            ):
                flush()
                marker = "action"
                cur.append(w)
            else:
                cur.append(w)
        flush()
        return out

    # -- classification -----------------------------------------------
    def _strip(self, words: list[str], keep_leading: bool) -> list[str]:
        sw = self.lex.stopwords
        lo, hi = 0, len(words)
        if not keep_leading:
            while lo < hi and words[lo].lower() in sw:
                lo += 1
        while hi > lo and words[hi - 1].lower() in sw:
            hi -= 1
        return words[lo:hi]

    def _noun_like(self, words: list[str]) -> bool:
        head = words[-1].lower()
        return bool(_WORDLIKE.match(head)) and not head.endswith("ly") and head not in self.lex.non_noun_words

    def _lexical(self, words: list[str]) -> tuple[SlotKind, str] | None:
        lex = self.lex
        low = [w.lower() for w in words]
        phrase = " ".join(words)
        folded = " ".join(low)
        if folded in lex.shot:
            return SlotKind.SHOT, phrase
        if folded in lex.style:
            return SlotKind.STYLE, phrase
        if folded in lex.lighting:
            return SlotKind.LIGHTING, phrase
        if len(words) > 1 and low[-1] == "style":
            inner = self._strip(words[:-1], keep_leading=False)
            if inner:
                return SlotKind.STYLE, " ".join(inner)
        if len(words) > 1 and low[-1] == "shot":
            inner = self._strip(words[:-1], keep_leading=False)
            if inner:
                return SlotKind.SHOT, " ".join(inner)
        if low[-1] in lex.lighting_heads:
            return SlotKind.LIGHTING, phrase
        palette = lex.colors | lex.color_heads | lex.color_modifiers
        if all(w in palette for w in low) and any(w in lex.colors or w in lex.color_heads for w in low):
            return SlotKind.COLORS, phrase
        return None

    def _named_run(self, words: list[str]) -> tuple[int, int] | None:
        i = 0
        while i < len(words):
            j = i
            while j < len(words) and words[j][:1].isupper() and words[j].lower() not in self.lex.stopwords:
                j += 1
            if j - i >= 2:
                return i, j
            i = max(j, i + 1)
        return None

    def classify(self, marker: str | None, words: list[str]) -> None:
        words = self._strip(words, keep_leading=marker == "action")
        if not words:
            return
        phrase = " ".join(words)
        if marker == "wearing":
            self._add(SlotKind.CLOTHING, phrase)
            return
        if marker == "scene":
            self._add(SlotKind.SCENE, phrase)
            return
        if marker == "action":
            self._add(SlotKind.ACTION, phrase)
            return
        hit = self._lexical(words)
        if hit:
            self._add(*hit)
            return
        run = self._named_run(words)
        if run:
            i, j = run
            if (i, j) == (0, len(words)):
                self._add(SlotKind.NAMED_ENTITY, phrase)
                return
            if marker is None:
                self.classify(None, words[:i])
                self._add(SlotKind.NAMED_ENTITY, " ".join(words[i:j]))
                self.classify(None, words[j:])
                return
        lex = self.lex
        if marker is None:
            k = 0
            while k < len(words) - 1 and words[k].lower() in lex.style:
                k += 1
            if k:
                for w in words[:k]:
                    self._add(SlotKind.STYLE, w)
                self.classify(None, words[k:])
                return
        head = words[-1].lower()
        if head in lex.text_logo_heads:
            self._add(SlotKind.TEXT_LOGO_ENTITY, phrase)
        elif marker == "with":
            self._add(SlotKind.PROPS, phrase)
        elif not self._noun_like(words):
            self._add(None, phrase)
        elif not self.subject_taken:
            self.subject_taken = True
            self._add(SlotKind.SUBJECT, phrase)
        elif head in lex.clothing_heads:
            self._add(SlotKind.CLOTHING, phrase)
        elif head in lex.scene_heads:
            self._add(SlotKind.SCENE, phrase)
        else:
            self._add(SlotKind.PROPS, phrase)

    def _add(self, kind: SlotKind | None, phrase: str) -> None:
        # A repeated phrase stays in the slot it was first assigned to.
        folded = phrase.casefold()
        for k, p in self.items:
            if p.casefold() == folded:
                kind = k
                break
        self.items.append((kind, phrase))

    def run(self, text: str) -> list[tuple[SlotKind | None, str]]:
        for segment in _SEGMENT_SPLIT.split(text):
            for marker, words in self.clauses(segment):
                self.classify(marker, words)
        return self.items


def _assemble(raw: str, items: list[tuple[SlotKind | None, str]], warnings: tuple[str, ...] = ()) -> StructuredPrompt:
    slots: dict[SlotKind, list[str]] = {}
    residue: list[str] = []
    for kind, phrase in items:
        if kind is None:
            residue.append(phrase)
        else:
            slots.setdefault(kind, []).append(phrase)
    return StructuredPrompt({k: tuple(v) for k, v in slots.items()}, raw, tuple(residue), warnings)


def parse_prompt(raw: str, lex: Lexicons | None = None) -> StructuredPrompt:
    """Split ``raw`` into slots with the built-in grammar."""
    if not raw or not raw.strip():
        raise EmptyPromptError("prompt is empty")
    lex = lex or default_lexicons()
    return _assemble(raw, _Parser(lex).run(raw))


def _validate_provider_response(raw: str, response: Any, lex: Lexicons) -> StructuredPrompt:
    if not isinstance(response, dict):
        raise ValueError(f"provider response is {type(response).__name__}, not an object")
    slots: dict[SlotKind, tuple[str, ...]] = {}
    for key, value in response.items():
        if key not in SLOT_SCHEMA:
            raise ValueError(f"unknown slot kind {key!r}")
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ValueError(f"slot {key!r} is not a list of strings")
        phrases = tuple(v.strip() for v in value)
        if any(not p for p in phrases):
            raise ValueError(f"empty phrase in slot {key!r}")
        if phrases:
            slots[SlotKind(key)] = phrases
    available = Counter(content_words(raw, lex))
    used: Counter[str] = Counter()
    for phrases in slots.values():
        for p in phrases:
            used.update(content_words(p, lex))
    invented = used - available
    if invented:
        raise ValueError(f"provider phrases mention words absent from the prompt: {sorted(invented)}")
    leftover = available - used
    residue = []
    for w in content_words(raw, lex):
        if leftover[w] > 0:
            leftover[w] -= 1
            residue.append(w)
    return StructuredPrompt(slots, raw, tuple(residue))


def parse_with_provider(raw: str, provider: SlotProvider, lex: Lexicons | None = None) -> StructuredPrompt:
    """Slot ``raw`` with an external provider, falling back to :func:`parse_prompt`.

    Any provider failure or schema violation yields the grammar parse with a
    warning attached to ``StructuredPrompt.warnings``.
    """
    if not raw or not raw.strip():
        raise EmptyPromptError("prompt is empty")
    lex = lex or default_lexicons()
    try:
        response = provider.request({"prompt": raw, "schema": list(SLOT_SCHEMA)})
        return _validate_provider_response(raw, response, lex)
    except (ProviderError, TimeoutError, OSError) as exc:
        reason = f"slot provider failed ({exc}); used fallback grammar"
    except ValueError as exc:
        reason = f"slot provider response rejected ({exc}); used fallback grammar"
    log.warning(reason)
    fallback = parse_prompt(raw, lex)
    return StructuredPrompt(fallback.slots, raw, fallback.residue, (reason,))


def _standalone(phrase: str, subject_taken: bool, lex: Lexicons) -> list[tuple[SlotKind | None, str]]:
    return _Parser(lex, subject_taken).run(phrase)


def reconstruct_prompt(sp: StructuredPrompt, lex: Lexicons | None = None) -> str:
    """Flatten slots back into a comma-joined prompt.

    Phrases are emitted bare in template order; a phrase that would be
    re-parsed into a different slot on its own is emitted with its slot
    marker ("wearing ...", "in ...", "... style") instead.
    """
    if sp.is_empty():
        raise EmptyPromptError("structured prompt has no content")
    lex = lex or default_lexicons()
    parts: list[str] = []
    subject_taken = False
    for kind in RECONSTRUCT_ORDER:
        for phrase in sp.get(kind):
            text = phrase
            if _standalone(phrase, subject_taken, lex) != [(kind, phrase)] and kind in _MARKED:
                marked = _MARKED[kind].format(phrase)
                if _standalone(marked, subject_taken, lex) == [(kind, phrase)]:
                    text = marked
            parts.append(text)
            if kind is SlotKind.SUBJECT:
                subject_taken = True
    parts.extend(sp.residue)
    return ", ".join(parts)
