import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amcr.backends import DeterministicTestEncoder, fold
from amcr.errors import ConsistencyError, ContractViolation, ValidationError
from amcr.numerics import cosine
from amcr.risk import RESIDUE, RiskCorpus, SlotRiskReport, load_corpus, nearest, rank_slots, score_slot, score_text
from amcr.slots import SlotKind, StructuredPrompt, parse_prompt

PLUMBER = "A plumber wearing blue overalls and a red cap fixing a sink in the kitchen, photographic style, close-up shot."


def write(tmp_path, lines, name="corpus.jsonl"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n")
    return p


def test_load_three_phrases(tmp_path):
    enc = DeterministicTestEncoder(7)
    c = load_corpus(write(tmp_path, ['"mario"', '{"phrase": "luigi", "tag": "character"}', "# comment", '"peach"']), enc)
    assert c.phrases() == ["mario", "luigi", "peach"]
    for e in c.entries:
        assert np.linalg.norm(e.embedding) == pytest.approx(1.0)
    assert c.encoder_id == enc.id


def test_duplicates_collapse_first_wins(tmp_path):
    c = load_corpus(write(tmp_path, ['{"phrase": "mario", "tag": "a"}', '{"phrase": " MARIO ", "tag": "b"}']), DeterministicTestEncoder())
    assert len(c) == 1 and c.entries[0].tag == "a"


def test_precomputed_dimension_conflict(tmp_path):
    lines = [json.dumps({"phrase": "x", "embedding": [1.0, 0.0, 0.0]}), json.dumps({"phrase": "y", "embedding": [1.0, 0.0]})]
    with pytest.raises(ConsistencyError):
        load_corpus(write(tmp_path, lines), None)


def test_precomputed_vectors_are_normalized(tmp_path):
    c = load_corpus(write(tmp_path, [json.dumps({"phrase": "x", "embedding": [3.0, 4.0]})]), None)
    np.testing.assert_allclose(c.entries[0].embedding, [0.6, 0.8])
    assert c.encoder_id == "precomputed"


@pytest.mark.parametrize("line", ["{not json", '{"tag": "x"}', '{"phrase": ""}', '{"phrase": "a", "embedding": "zz"}'])
def test_malformed_record_names_line(tmp_path, line):
    with pytest.raises(ValidationError, match=r":2:"):
        load_corpus(write(tmp_path, ['"ok"', line]), DeterministicTestEncoder())


def test_self_similarity_and_singleton(encoder):
    c = RiskCorpus.build(["mario", "apple logo"], encoder)
    assert score_text("Mario", c, encoder) == pytest.approx(1.0, abs=1e-6)
    single = RiskCorpus.build(["mario"], encoder)
    expected = cosine(encoder.embed_one("super mario"), encoder.embed_one("mario"))
    assert score_text("super mario", single, encoder) == pytest.approx(expected, abs=1e-15)


def test_brute_force_oracle():
    enc = DeterministicTestEncoder(3, dim=16)
    phrases = ["alpha", "beta", "gamma", "delta", "epsilon"]
    c = RiskCorpus.build(phrases, enc)
    q = enc.embed_one("query phrase")
    vecs = [enc.embed_one(p) for p in phrases]
    sims = [float(q @ v / (np.linalg.norm(q) * np.linalg.norm(v))) for v in vecs]
    score, near = nearest("query phrase", c, enc)
    assert score == pytest.approx(max(sims), abs=1e-15)
    assert near == phrases[int(np.argmax(sims))]


def test_encoder_mismatch(encoder):
    c = RiskCorpus.build(["mario"], encoder)
    with pytest.raises(ConsistencyError):
        score_text("mario", c, DeterministicTestEncoder(99))
    with pytest.raises(ContractViolation):
        score_text("  ", c, encoder)


def test_score_slot_rules(encoder, corpus):
    a, b = score_text("blue overalls", corpus, encoder), score_text("red cap", corpus, encoder)
    assert score_slot(["blue overalls", "red cap"], corpus, encoder) == max(a, b)
    assert score_slot([], corpus, encoder) == 0.0
    assert score_slot(["red cap"], corpus, encoder) == b


def test_exact_clothing_match_ranks_first(encoder):
    c = RiskCorpus.build(["red cap", "tiger"], encoder)
    report = rank_slots(parse_prompt(PLUMBER), c, encoder)
    assert report.ranking[0] == SlotKind.CLOTHING.value
    assert report.per_slot["clothing"] == pytest.approx(1.0)


def test_orthogonal_corpus_gives_fixed_order():
    vocab = {"axes": ["a", "b", "c", "d", "e", "f", "g", "z"],
             "phrases": {"plumber": {"a": 1}, "kitchen": {"b": 1}, "fixing a sink": {"c": 1}, "blue overalls": {"d": 1},
                         "red cap": {"e": 1}, "photographic": {"f": 1}, "close-up": {"g": 1}, "zorro": {"z": 1}}}
    enc = DeterministicTestEncoder.from_vocabulary(vocab, dim=8)
    report = rank_slots(parse_prompt(PLUMBER), RiskCorpus.build(["zorro"], enc), enc)
    assert set(report.per_slot.values()) == {0.0}
    assert report.ranking == ["subject", "scene", "action", "clothing", "style", "shot"]


def test_nearest_for_both_clothing_phrases(encoder):
    c = RiskCorpus.build(["red cap and blue overalls"], encoder)
    report = rank_slots(parse_prompt(PLUMBER), c, encoder)
    for p in ("blue overalls", "red cap"):
        assert report.per_phrase[p]["nearest_corpus_phrase"] == "red cap and blue overalls"


def test_residue_bucket_is_ranked_last_among_ties(encoder, corpus):
    sp = StructuredPrompt({SlotKind.SUBJECT: ("zzz qqq",)}, "x", ("zzz qqq 2",))
    report = rank_slots(sp, corpus, encoder)
    assert set(report.ranking) == {"subject", RESIDUE}
    sp_tie = StructuredPrompt({SlotKind.SUBJECT: ("mario",)}, "x", ("super mario",))
    report = rank_slots(sp_tie, RiskCorpus.build(["mario", "super mario"], encoder), encoder)
    assert report.ranking == ["subject", RESIDUE]


def test_report_round_trip(encoder, corpus):
    report = rank_slots(parse_prompt(PLUMBER), corpus, encoder)
    again = SlotRiskReport.from_dict(json.loads(json.dumps(report.to_dict())))
    assert again.to_dict() == report.to_dict()
    for kind, phrases in parse_prompt(PLUMBER).slots.items():
        assert report.per_slot[kind.value] == max(report.per_phrase[p]["score"] for p in phrases)


words = st.sampled_from(["mario", "cap", "red", "apple", "logo", "leaf", "tiger", "kitchen", "sink", "blue"])
phrase = st.lists(words, min_size=1, max_size=3).map(" ".join)


@settings(max_examples=60, deadline=None)
@given(st.lists(phrase, min_size=1, max_size=8, unique_by=fold), phrase, phrase)
def test_monotone_in_corpus_growth_and_deletion(entries, extra, query):
    enc = DeterministicTestEncoder(5, dim=24)
    base = RiskCorpus.build(entries, enc)
    s = score_text(query, base, enc)
    assert -1.0 <= s <= 1.0
    if fold(extra) not in {fold(e) for e in entries}:
        assert score_text(query, RiskCorpus.build(entries + [extra], enc), enc) >= s
    _, arg = nearest(query, base, enc)
    if len(entries) > 1:
        rest = [e for e in entries if e != arg]
        assert score_text(query, RiskCorpus.build(rest, enc), enc) <= s
        others = [e for e in entries if e != arg][:1]
        keep = [e for e in entries if e not in others]
        assert score_text(query, RiskCorpus.build(keep, enc), enc) == s
