"""High-to-low risk replacement of prompt phrases."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from .backends import CandidateProvider, StaticCandidateTable, TextEncoder, fold
from .errors import ContractViolation, ProviderError
from .numerics import cosine
from .risk import RiskCorpus, bucket_kind, rank_slots, score_slot, slot_buckets
from .slots import StructuredPrompt, reconstruct_prompt

log = logging.getLogger(__name__)

BUDGET = "Budget"
MARGINAL = "MarginalImprovement"
QUANTILE = "RiskQuantile"
EXHAUSTED = "Exhausted"


@dataclass(frozen=True)
class SanitizerConfig:
    lam: float = 0.5
    budget: int = 5
    gamma: float = 0.02
    window_m: int = 3
    risk_quantile: float = 0.5
    candidates_per_element: int = 4

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ContractViolation(f"lambda must lie in [0, 1], got {self.lam}")
        if self.budget < 0:
            raise ContractViolation("budget must be >= 0")
        if self.gamma < 0:
            raise ContractViolation("gamma must be >= 0")
        if self.window_m < 1:
            raise ContractViolation("window must be >= 1")
        if not 0.0 <= self.risk_quantile <= 1.0:
            raise ContractViolation("risk quantile must lie in [0, 1]")
        if self.candidates_per_element < 1:
            raise ContractViolation("candidates_per_element must be >= 1")


@dataclass(frozen=True)
class CandidateScore:
    candidate: str
    delta_r: float
    align: float
    score: float


@dataclass(frozen=True)
class TraceEntry:
    slot: str
    original: str
    chosen: str
    delta_r: float
    align: float
    score: float


@dataclass
class SanitizationResult:
    sanitized: StructuredPrompt
    sanitized_flat: str
    negative_prompts: list[str]
    trace: list[TraceEntry]
    stop_reason: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "sanitized": self.sanitized.to_dict(),
            "sanitized_flat": self.sanitized_flat,
            "negative_prompts": list(self.negative_prompts),
            "trace": [asdict(t) for t in self.trace],
            "stop_reason": self.stop_reason,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SanitizationResult:
        return cls(
            StructuredPrompt.from_dict(data["sanitized"]),
            data["sanitized_flat"],
            list(data["negative_prompts"]),
            [TraceEntry(**t) for t in data["trace"]],
            data["stop_reason"],
        )


class SanitizationAborted(ProviderError):
    """A provider failed mid-loop; ``partial`` holds the work done so far."""

    def __init__(self, message: str, partial: SanitizationResult):
        super().__init__(message)
        self.partial = partial


def generate_candidates(
    s: str,
    kind: str,
    provider: CandidateProvider | None,
    corpus: RiskCorpus,
    limit: int = 4,
    fallback: CandidateProvider | None = None,
    exclude: Sequence[str] = (),
) -> list[str]:
    """Replacement candidates for ``s``, never echoing a corpus phrase.

    ``provider`` failures fall back on the static table.  ``exclude`` drops
    phrases already used elsewhere in the prompt.
    """
    if not s or not s.strip():
        raise ContractViolation("cannot generate candidates for an empty phrase")
    fallback = fallback or StaticCandidateTable.default()
    raw: list[str] = []
    if provider is not None:
        try:
            raw = list(provider.candidates(s, kind))
        except (ProviderError, TimeoutError, OSError) as exc:
            log.warning("candidate provider failed for %r (%s); using fallback table", s, exc)
            raw = fallback.candidates(s, kind)
    else:
        raw = fallback.candidates(s, kind)
    blocked = {fold(x) for x in exclude}
    out: list[str] = []
    for c in raw:
        c = c.strip()
        key = fold(c)
        if not c or corpus.contains(c) or key in blocked or key in {fold(o) for o in out}:
            continue
        out.append(c)
        if len(out) == limit:
            break
    return out


def evaluate_candidate(
    s_i: str,
    c_m: str,
    slot_phrases: Sequence[str],
    corpus: RiskCorpus,
    encoder: TextEncoder,
    lam: float,
) -> CandidateScore:
    """Risk reduction, semantic alignment and their blend for one candidate."""
    if not c_m or not c_m.strip():
        raise ContractViolation("candidate must be non-empty")
    before = score_slot(slot_phrases, corpus, encoder)
    after_phrases = list(slot_phrases)
    after_phrases[after_phrases.index(s_i)] = c_m
    delta_r = before - score_slot(after_phrases, corpus, encoder)
    vc, vs = encoder.embed([fold(c_m), fold(s_i)])
    align = cosine(vc, vs)
    return CandidateScore(c_m, delta_r, align, lam * delta_r + (1.0 - lam) * align)


def select_replacement(scores: Sequence[CandidateScore]) -> CandidateScore | None:
    """Best-scoring candidate that is positive on both score and risk reduction."""
    best: CandidateScore | None = None
    for cs in scores:
        if cs.score > 0 and cs.delta_r > 0 and (best is None or cs.score > best.score):
            best = cs
    return best


def sanitize(
    sp: StructuredPrompt,
    corpus: RiskCorpus,
    encoder: TextEncoder,
    cfg: SanitizerConfig | None = None,
    provider: CandidateProvider | None = None,
    fallback: CandidateProvider | None = None,
) -> SanitizationResult:
    """Replace risky phrases slot by slot until a stopping criterion fires.

    Slots are visited in descending risk, re-ranked after every accepted
    replacement.  The loop stops on the first of: replacement budget spent,
    mean risk reduction of the last ``window_m`` replacements below
    ``gamma``, every slot below the initial risk quantile, or nothing left
    to try.
    """
    cfg = cfg or SanitizerConfig()
    fallback = fallback or StaticCandidateTable.default()
    current = sp
    trace: list[TraceEntry] = []
    negatives: list[str] = []
    done: set[tuple[str, str]] = set()

    def result(reason: str) -> SanitizationResult:
        flat = reconstruct_prompt(current) if not current.is_empty() else ""
        return SanitizationResult(current, flat, negatives, trace, reason)

    try:
        report = rank_slots(current, corpus, encoder)
        initial = list(report.per_slot.values())
        threshold = float(np.quantile(initial, cfg.risk_quantile)) if initial else 0.0
        while True:
            if len(trace) >= cfg.budget:
                return result(BUDGET)
            if len(trace) >= cfg.window_m:
                recent = [t.delta_r for t in trace[-cfg.window_m :]]
                if sum(recent) / len(recent) < cfg.gamma:
                    return result(MARGINAL)
            if report.per_slot and all(r < threshold for r in report.per_slot.values()):
                return result(QUANTILE)
            accepted = _step(current, report, corpus, encoder, cfg, provider, fallback, done)
            if accepted is None:
                return result(EXHAUSTED)
            kind_name, entry = accepted
            current = current.replace(bucket_kind(kind_name), entry.original, entry.chosen)
            trace.append(entry)
            if entry.original not in negatives:
                negatives.append(entry.original)
            done.add((kind_name, fold(entry.chosen)))
            report = rank_slots(current, corpus, encoder)
    except ProviderError as exc:
        raise SanitizationAborted(f"sanitization aborted after {len(trace)} replacements: {exc}", result("Aborted")) from exc


def _step(
    current: StructuredPrompt,
    report,
    corpus: RiskCorpus,
    encoder: TextEncoder,
    cfg: SanitizerConfig,
    provider: CandidateProvider | None,
    fallback: CandidateProvider,
    done: set[tuple[str, str]],
) -> tuple[str, TraceEntry] | None:
    buckets = dict(slot_buckets(current))
    in_use = current.phrases()
    for name in report.ranking:
        phrases = list(buckets[name])
        order = sorted(range(len(phrases)), key=lambda i: (-report.per_phrase[phrases[i]]["score"], i))
        for i in order:
            s_i = phrases[i]
            if (name, fold(s_i)) in done:
                continue
            done.add((name, fold(s_i)))
            cands = generate_candidates(
                s_i, name, provider, corpus, cfg.candidates_per_element, fallback, exclude=in_use
            )
            scores = [evaluate_candidate(s_i, c, phrases, corpus, encoder, cfg.lam) for c in cands]
            best = select_replacement(scores)
            if best is None:
                continue
            return name, TraceEntry(name, s_i, best.candidate, best.delta_r, best.align, best.score)
    return None
