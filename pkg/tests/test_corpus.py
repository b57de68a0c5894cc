import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentbank import corpus as C
from latentbank.backbone import END, PAD, UNK


def record(**over):
    r = {
        "id": "x",
        "sessions": [
            {"turns": [{"speaker": "A", "text": "My cat is red."}, {"speaker": "B", "text": "nice"}]},
            {"turns": [{"speaker": "A", "text": "hello again"}]},
        ],
        "qa": [{"question": "What is my cat?", "answer": "red", "evidence_turns": [0]}],
    }
    r.update(over)
    return r


def test_normalize_words():
    assert C.normalize_words("My CAT, is red!  ok?") == ["my", "cat", "is", "red", "ok"]


def test_conversation_fields_and_derived_sessions():
    conv = C.conversation_from_dict(record())
    assert conv.n_turns == 3 and conv.n_sessions == 2
    assert [t.session for t in conv.turns] == [0, 0, 1]
    assert conv.qa[0].evidence_sessions == (1,)
    assert conv.qa[0].qid == "x:What is my cat?"


@pytest.mark.parametrize(
    "over,where",
    [
        ({"qa": [{"question": "q", "answer": "a", "evidence_turns": [3]}]}, r"qa\[0\]\.evidence_turns"),
        ({"qa": [{"question": "q", "answer": "a", "evidence_turns": [0], "evidence_sessions": [2]}]}, "disagrees"),
        ({"qa": [{"question": "q", "answer": "?!", "evidence_turns": [0]}]}, r"qa\[0\]\.answer"),
        ({"sessions": [{"turns": [{"speaker": "A", "text": "  "}]}]}, r"turns\[0\]\.text"),
        ({"sessions": [{"turns": [{"speaker": "A"}]}]}, r"turns\[0\]\.text: missing"),
        ({"sessions": []}, "at least one session"),
    ],
)
def test_malformed_records_name_the_field(over, where):
    with pytest.raises(C.CorpusError, match=where):
        C.conversation_from_dict(record(**over))


def test_duplicate_ids_rejected():
    with pytest.raises(C.CorpusError, match="unique"):
        C.from_records([record(), record()])


def test_load_json_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[{")
    with pytest.raises(C.CorpusError, match="line 1"):
        C.load_json(bad)
    with pytest.raises(C.CorpusError, match="cannot read"):
        C.load_json(tmp_path / "missing.json")


def test_json_roundtrip(small_corpus, tmp_path):
    path = tmp_path / "c.json"
    path.write_text(C.dump_json(small_corpus))
    again = C.load_json(path)
    assert C.dump_json(again) == C.dump_json(small_corpus)


def test_tokenizer_ranking_and_codec():
    conv = C.conversation_from_dict(record())
    tok = C.build_tokenizer([conv], 8)
    # "red" occurs 3 times (turn, answer... ) and ties break alphabetically
    assert tok.words[:3] == C.RESERVED
    assert tok.words[3:] == ("cat", "is", "my", "red", "again")
    assert tok.encode("my dog") == [tok.id_of("my"), UNK]
    assert tok.decode([tok.id_of("red"), PAD, tok.id_of("cat"), END, tok.id_of("is")]) == "red cat"
    assert C.Tokenizer.from_dict(json.loads(json.dumps(tok.to_dict()))) == tok
    assert tok.fingerprint() == C.build_tokenizer([conv], 8).fingerprint()


def test_tokenizer_requires_reserved_prefix():
    with pytest.raises(ValueError):
        C.Tokenizer(("a", "b", "c"))


def test_allocate_oracles():
    assert C.allocate([1, 1, 1], 7) == [3, 2, 2]
    assert C.allocate([0.5, 0.25, 0.25], 4) == [2, 1, 1]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=6), st.integers(0, 40), st.integers(0, 2**31))
def test_allocate_stays_within_one_of_exact(shares, total, seed):
    for rng in (None, np.random.default_rng(seed)):
        counts = C.allocate(shares, total, rng)
        exact = np.asarray(shares) / sum(shares) * total
        assert sum(counts) == total
        assert all(np.floor(e) <= c <= np.ceil(e) for c, e in zip(counts, exact))


def test_systematic_allocation_is_unbiased():
    rng = np.random.default_rng(0)
    counts = np.array([C.allocate([1, 1, 1, 1], 1, rng) for _ in range(4000)])
    np.testing.assert_allclose(counts.mean(axis=0), 0.25, atol=0.03)


def test_toy_lag_edges():
    assert C.toy_lag_edges() == (0, 4, 8, 16, 32)
    with pytest.raises(ValueError):
        C.toy_lag_edges(1 / 64)


def test_synthetic_is_deterministic(small_spec):
    a = C.generate_synthetic(small_spec, "a")
    assert C.dump_json([a]) == C.dump_json([C.generate_synthetic(small_spec, "a")])
    assert C.dump_json([a]) != C.dump_json([C.generate_synthetic(small_spec, "b")])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(1, 1, 0, 0, 0), (0, 1, 0, 0, 0), (0, 0, 1, 1, 0)]))
def test_synthetic_facts_land_in_their_buckets(seed, shares):
    spec = C.SyntheticSpec(
        n_sessions=2, turns_per_session=8, n_facts=2, distractor_ratio=0.875,
        lag_distribution=shares, lag_edges=(0, 2, 4, 8, 16), seed=seed,
    )
    conv = C.generate_synthetic(spec, "s")
    T = conv.n_turns
    edges = list(spec.lag_edges) + [10**9]
    for q in conv.qa:
        (e,) = q.evidence_turns
        lag = T - e
        b = max(i for i in range(5) if edges[i] <= lag)
        assert shares[b] > 0
        text = conv.turns[e].text
        assert text.endswith(q.answer) and q.question.split()[-1] in text
        assert q.evidence_sessions == (e // 8 + 1,)


def test_restatements_follow_their_fact():
    spec = C.SyntheticSpec(n_sessions=1, turns_per_session=8, n_facts=2, distractor_ratio=0.5, seed=1)
    conv = C.generate_synthetic(spec, "r")
    fact_turns = [t for t in conv.turns if t.text.startswith("my ")]
    assert len(fact_turns) == 4 and len(conv.qa) == 2
    first = {}
    for t in fact_turns:
        first.setdefault(t.text, t.index)
    assert sorted(first.values()) == sorted(q.evidence_turns[0] for q in conv.qa)


@pytest.mark.parametrize(
    "kw",
    [
        {"n_facts": 9, "turns_per_session": 8, "n_sessions": 1},
        {"n_facts": 25},
        {"distractor_ratio": 1.5},
        {"lag_distribution": (1, 1)},
    ],
)
def test_infeasible_specs(kw):
    with pytest.raises(ValueError):
        C.SyntheticSpec(**kw)


def test_split_is_disjoint_and_seeded(small_corpus):
    tr, ev = C.split(small_corpus, 0.5, seed=3)
    assert {c.id for c in tr}.isdisjoint({c.id for c in ev})
    assert len(tr) + len(ev) == len(small_corpus)
    assert [c.id for c in C.split(small_corpus, 0.5, seed=3)[0]] == [c.id for c in tr]


def test_vocabulary_from_a_a_b():
    conv = C.conversation_from_dict(
        {"sessions": [{"turns": [{"speaker": "A", "text": "a a b"}]}], "qa": []}
    )
    assert C.build_tokenizer([conv], 5).words == C.RESERVED + ("a", "b")


def test_ten_conversations_split_eight_two(small_spec):
    convs = C.generate_corpus(small_spec, 10, "s")
    tr, ev = C.split(convs, 0.8)
    assert (len(tr), len(ev)) == (8, 2)


def test_fact_at_turn_zero_has_lag_t():
    spec = C.SyntheticSpec(n_sessions=1, turns_per_session=6, n_facts=1, distractor_ratio=5 / 6,
                           lag_distribution=(0, 0, 0, 1, 0), lag_edges=(0, 2, 3, 6, 9), seed=0)
    conv = C.generate_synthetic(spec, "z")
    (q,) = conv.qa
    assert q.evidence_turns == (0,)
    assert conv.n_turns - q.evidence_turns[0] == 6


def test_no_distractors_means_all_fact_turns():
    spec = C.SyntheticSpec(n_sessions=1, turns_per_session=8, n_facts=8, distractor_ratio=0.0, seed=2)
    conv = C.generate_synthetic(spec, "f")
    assert all(t.text.startswith("my ") for t in conv.turns)
    assert sorted(q.evidence_turns[0] for q in conv.qa) == list(range(8))


def test_lag_histogram_within_one_of_request():
    spec = C.SyntheticSpec(n_sessions=4, turns_per_session=8, n_facts=10, distractor_ratio=0.6875,
                           lag_distribution=(1, 2, 3, 4, 0), lag_edges=(0, 4, 8, 16, 32), seed=3)
    exact = np.array([1, 2, 3, 4, 0]) / 10 * 10
    for i in range(100):
        conv = C.generate_synthetic(spec, f"h{i}")
        lags = [conv.n_turns - q.evidence_turns[0] for q in conv.qa]
        hist = np.histogram(lags, bins=[0, 4, 8, 16, 32, 10**6])[0]
        assert np.all(np.abs(hist - exact) <= 1)
