"""Conversation data, JSON loading, tokenisation and synthetic fact-recall data.

On disk a corpus is a JSON list of conversations::

    {"id": "c0",
     "sessions": [{"turns": [{"speaker": "A", "text": "my cat is red"}]}],
     "qa": [{"question": "what is my cat", "answer": "red",
             "evidence_turns": [0], "evidence_sessions": [1]}]}

Turn indices are global across sessions and start at 0.  Session indices in
``evidence_sessions`` start at 1; the field is optional and derived from the
evidence turns when absent.  Every question is asked after the last turn.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import END, PAD, UNK
from .rng import KeyedRNG


class CorpusError(ValueError):
    """Raised for unreadable or invalid corpora; the message names the field."""


_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_words(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class Turn:
    index: int
    session: int
    speaker: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise CorpusError(f"turn {self.index}: text must be nonempty")


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    evidence_turns: tuple[int, ...]
    evidence_sessions: tuple[int, ...]
    conversation_id: str = ""

    @property
    def qid(self) -> str:
        return f"{self.conversation_id}:{self.question}"


@dataclass(frozen=True)
class Conversation:
    id: str
    sessions: tuple[tuple[Turn, ...], ...]
    qa: tuple[QAPair, ...]

    @property
    def turns(self) -> list[Turn]:
        return [t for s in self.sessions for t in s]

    @property
    def n_turns(self) -> int:
        return sum(len(s) for s in self.sessions)

    @property
    def n_sessions(self) -> int:
        return len(self.sessions)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "sessions": [{"turns": [{"speaker": t.speaker, "text": t.text} for t in s]} for s in self.sessions],
            "qa": [
                {
                    "question": q.question,
                    "answer": q.answer,
                    "evidence_turns": list(q.evidence_turns),
                    "evidence_sessions": list(q.evidence_sessions),
                }
                for q in self.qa
            ],
        }


def _need(obj, key, where, kind):
    if not isinstance(obj, dict):
        raise CorpusError(f"{where}: expected an object")
    if key not in obj:
        raise CorpusError(f"{where}.{key}: missing field")
    val = obj[key]
    if not isinstance(val, kind) or (kind is int and isinstance(val, bool)):
        raise CorpusError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}")
    return val


def conversation_from_dict(raw: dict, where: str = "conversation", default_id: str = "") -> Conversation:
    sessions_raw = _need(raw, "sessions", where, list)
    if not sessions_raw:
        raise CorpusError(f"{where}.sessions: at least one session required")
    sessions = []
    index = 0
    for si, s in enumerate(sessions_raw):
        swhere = f"{where}.sessions[{si}]"
        turns = []
        for ti, t in enumerate(_need(s, "turns", swhere, list)):
            twhere = f"{swhere}.turns[{ti}]"
            speaker = _need(t, "speaker", twhere, str)
            text = _need(t, "text", twhere, str)
            if not text.strip():
                raise CorpusError(f"{twhere}.text: must be nonempty")
            turns.append(Turn(index, si, speaker, text))
            index += 1
        sessions.append(tuple(turns))
    session_of = [t.session for s in sessions for t in s]
    cid = raw.get("id", default_id)
    if not isinstance(cid, str):
        raise CorpusError(f"{where}.id: expected str")
    qas = []
    for qi, q in enumerate(_need(raw, "qa", where, list)):
        qwhere = f"{where}.qa[{qi}]"
        question = _need(q, "question", qwhere, str)
        answer = _need(q, "answer", qwhere, str)
        ev = _need(q, "evidence_turns", qwhere, list)
        if not ev:
            raise CorpusError(f"{qwhere}.evidence_turns: must be nonempty")
        for e in ev:
            if not isinstance(e, int) or isinstance(e, bool) or not 0 <= e < index:
                raise CorpusError(f"{qwhere}.evidence_turns: index {e!r} does not name one of {index} turns")
        derived = sorted({session_of[e] + 1 for e in ev})
        if "evidence_sessions" in q:
            es = _need(q, "evidence_sessions", qwhere, list)
            for e in es:
                if not isinstance(e, int) or isinstance(e, bool) or not 1 <= e <= len(sessions):
                    raise CorpusError(f"{qwhere}.evidence_sessions: session {e!r} out of range 1..{len(sessions)}")
            if sorted(set(es)) != derived:
                raise CorpusError(f"{qwhere}.evidence_sessions: {es} disagrees with evidence turns (sessions {derived})")
        if not normalize_words(answer):
            raise CorpusError(f"{qwhere}.answer: must contain a word")
        qas.append(QAPair(question, answer, tuple(ev), tuple(derived), cid))
    return Conversation(cid, tuple(sessions), tuple(qas))


def from_records(records) -> list[Conversation]:
    if not isinstance(records, list):
        raise CorpusError("corpus: top level must be a list of conversations")
    out = [conversation_from_dict(r, f"corpus[{i}]", f"c{i}") for i, r in enumerate(records)]
    ids = [c.id for c in out]
    if len(set(ids)) != len(ids):
        raise CorpusError("corpus: conversation ids must be unique")
    return out


def load_json(path) -> list[Conversation]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CorpusError(f"{path}: cannot read ({e.strerror})") from e
    try:
        records = json.loads(text)
    except json.JSONDecodeError as e:
        raise CorpusError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}") from e
    return from_records(records)


def dump_json(conversations: Sequence[Conversation]) -> str:
    return json.dumps([c.to_dict() for c in conversations], indent=1, sort_keys=True)


# -- tokenizer ----------------------------------------------------------------

RESERVED = ("<pad>", "<end>", "<unk>")


@dataclass(frozen=True)
class Tokenizer:
    words: tuple[str, ...]
    seed: int = 0
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.words[:3] != RESERVED or len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary must start with the reserved tokens and be duplicate-free")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    @property
    def vocab_size(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        return [self._index.get(w, UNK) for w in normalize_words(text)]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if i == END:
                break
            if i != PAD:
                out.append(self.words[i] if 0 <= i < len(self.words) else RESERVED[UNK])
        return " ".join(out)

    def id_of(self, word: str) -> int:
        return self._index.get(word, UNK)

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256("\n".join(self.words).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {"words": list(self.words), "seed": self.seed}

    @classmethod
    def from_dict(cls, raw: dict) -> "Tokenizer":
        return cls(tuple(raw["words"]), int(raw.get("seed", 0)))


def corpus_texts(conversations: Sequence[Conversation]):
    for c in conversations:
        for t in c.turns:
            yield t.text
        for q in c.qa:
            yield q.question
            yield q.answer


def build_tokenizer(conversations: Sequence[Conversation], vocab_size: int, seed: int = 0) -> Tokenizer:
    """Most frequent words first, ties broken lexicographically."""
    if vocab_size < len(RESERVED) + 1:
        raise ValueError("vocab_size must leave room for at least one word")
    counts = Counter(w for text in corpus_texts(conversations) for w in normalize_words(text))
    if not counts:
        raise CorpusError("cannot build a tokenizer from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [w for w, _ in ranked[: vocab_size - len(RESERVED)]]
    return Tokenizer(RESERVED + tuple(keep), seed)


# -- synthetic corpus ---------------------------------------------------------

NOUNS = (
    "cat", "dog", "car", "boat", "house", "hat", "bike", "lamp", "door", "book",
    "cup", "bag", "coat", "desk", "shoe", "kite", "drum", "ring", "fish", "tree",
)
VALUES = (
    "red", "blue", "green", "gold", "pink", "gray", "tall", "small", "old", "new",
    "fast", "slow", "loud", "soft", "warm", "cold", "dark", "bright", "round", "flat",
)
FILLERS = (
    "hello", "yes", "no", "maybe", "today", "we", "went", "out", "later", "sure",
    "nice", "thanks", "really", "okay", "then", "again", "well", "fine",
)


def toy_lag_edges(scale: float = 1 / 8) -> tuple[int, ...]:
    """Lag bucket lower edges ``0, 32, 64, 128, 256`` multiplied by ``scale``."""
    edges = tuple(int(round(e * scale)) for e in (0, 32, 64, 128, 256))
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"scale {scale} collapses lag buckets: {edges}")
    return edges


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of one synthetic conversation.

    ``lag_distribution`` gives the share of facts per lag bucket (lower edges
    ``lag_edges``); ``None`` places facts uniformly.  Fact turns beyond
    ``n_facts`` restate an earlier fact.
    """

    n_sessions: int = 10
    turns_per_session: int = 8
    n_facts: int = 20
    distractor_ratio: float = 0.5
    lag_distribution: tuple[float, ...] | None = None
    lag_edges: tuple[int, ...] = (0, 4, 8, 16, 32)
    seed: int = 42

    def __post_init__(self):
        if self.n_sessions < 1 or self.turns_per_session < 1:
            raise ValueError("need at least one session and one turn per session")
        if not 0.0 <= self.distractor_ratio <= 1.0:
            raise ValueError("distractor_ratio must lie in [0, 1]")
        if not 1 <= self.n_facts <= min(len(NOUNS), len(VALUES)):
            raise ValueError(f"n_facts must lie in 1..{min(len(NOUNS), len(VALUES))}")
        if self.n_facts > self.n_fact_turns:
            raise ValueError(
                f"infeasible spec: {self.n_facts} facts but only {self.n_fact_turns} fact turns "
                f"in {self.n_turns} turns"
            )
        if self.lag_distribution is not None:
            if len(self.lag_distribution) != len(self.lag_edges):
                raise ValueError("lag_distribution needs one share per lag bucket")
            if min(self.lag_distribution) < 0 or sum(self.lag_distribution) <= 0:
                raise ValueError("lag_distribution shares must be nonnegative with positive sum")

    @property
    def n_turns(self) -> int:
        return self.n_sessions * self.turns_per_session

    @property
    def n_fact_turns(self) -> int:
        return self.n_turns - int(round(self.distractor_ratio * self.n_turns))


def allocate(shares: Sequence[float], total: int, rng: np.random.Generator | None = None) -> list[int]:
    """Split ``total`` into integer counts within one of ``total * share``.

    Floors are assigned first.  The leftover units go to the largest
    remainders, or, with ``rng``, to buckets drawn without replacement with
    probability proportional to their remainders, so that the expected count
    of every bucket equals its exact share.
    """
    shares = np.asarray(shares, dtype=float)
    exact = shares / shares.sum() * total
    counts = np.floor(exact).astype(int)
    rem = exact - counts
    left = total - int(counts.sum())
    if left:
        if rng is None:
            pick = np.argsort(-rem, kind="stable")[:left]
        else:
            pick = _systematic(rem, rng)
        counts[pick] += 1
    return counts.tolist()


def _systematic(rem: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # systematic sampling: one uniform offset, unit spacing along the
    # cumulative remainders; inclusion probability equals each remainder
    cum = np.concatenate([[0.0], np.cumsum(rem)])
    points = rng.random() + np.arange(int(round(cum[-1])))
    return np.searchsorted(cum, points, side="right") - 1


def _plant_positions(spec: SyntheticSpec, rng: np.random.Generator) -> list[int]:
    T = spec.n_turns
    if spec.lag_distribution is None:
        return sorted(rng.choice(T, size=spec.n_facts, replace=False).tolist())
    counts = allocate(spec.lag_distribution, spec.n_facts, rng)
    edges = list(spec.lag_edges) + [None]
    chosen: list[int] = []
    for b, c in enumerate(counts):
        if c == 0:
            continue
        lo, hi = edges[b], edges[b + 1]
        # lag = T - turn, so the bucket [lo, hi) holds turns (T - hi, T - lo]
        first = 0 if hi is None else max(0, T - hi + 1)
        last = T - max(lo, 1)
        pool = np.arange(first, last + 1)
        if len(pool) < c:
            raise ValueError(f"infeasible spec: {c} facts requested in lag bucket {b} with {len(pool)} turns")
        chosen.extend(rng.choice(pool, size=c, replace=False).tolist())
    return sorted(chosen)


def generate_synthetic(spec: SyntheticSpec, conversation_id: str = "syn") -> Conversation:
    """Plant facts at controlled positions between distractor turns."""
    rng = KeyedRNG(spec.seed).child("synthetic", conversation_id).generator()
    T = spec.n_turns
    nouns = rng.choice(len(NOUNS), size=spec.n_facts, replace=False)
    values = rng.choice(len(VALUES), size=spec.n_facts, replace=True)
    plant = _plant_positions(spec, rng)
    order = rng.permutation(spec.n_facts)
    fact_at = {p: int(order[i]) for i, p in enumerate(plant)}
    free = np.array(sorted(set(range(T)) - set(plant)))
    n_restate = spec.n_fact_turns - spec.n_facts
    if n_restate:
        eligible = free[free > plant[0]]
        if len(eligible) < n_restate:
            raise ValueError("infeasible spec: not enough turns after the first fact for restatements")
        for p in sorted(rng.choice(eligible, size=n_restate, replace=False).tolist()):
            earlier = [fact_at[q] for q in plant if q < p]
            fact_at[p] = int(earlier[rng.integers(len(earlier))])
    texts = []
    for t in range(T):
        if t in fact_at:
            f = fact_at[t]
            texts.append(f"my {NOUNS[nouns[f]]} is {VALUES[values[f]]}")
        else:
            n = int(rng.integers(3, 6))
            texts.append(" ".join(FILLERS[i] for i in rng.integers(len(FILLERS), size=n)))
    per = spec.turns_per_session
    sessions = tuple(
        tuple(Turn(s * per + i, s, "AB"[(s * per + i) % 2], texts[s * per + i]) for i in range(per))
        for s in range(spec.n_sessions)
    )
    qas = []
    for p in plant:
        f = fact_at[p]
        qas.append(
            QAPair(
                f"what is my {NOUNS[nouns[f]]}",
                VALUES[values[f]],
                (p,),
                (p // per + 1,),
                conversation_id,
            )
        )
    return Conversation(conversation_id, sessions, tuple(qas))


def generate_corpus(spec: SyntheticSpec, n_conversations: int, prefix: str = "syn") -> list[Conversation]:
    """Independent conversations keyed by id under one spec seed."""
    if n_conversations < 1:
        raise ValueError("n_conversations must be >= 1")
    return [generate_synthetic(spec, f"{prefix}{i:04d}") for i in range(n_conversations)]


def split(conversations: Sequence[Conversation], train_fraction: float, seed: int = 42):
    """Deterministic conversation-level split into (train, eval)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(conversations)
    if n < 2:
        raise ValueError("need at least two conversations to split")
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    perm = KeyedRNG(seed).child("split").generator().permutation(n)
    train_idx = sorted(perm[:n_train].tolist())
    eval_idx = sorted(perm[n_train:].tolist())
    return [conversations[i] for i in train_idx], [conversations[i] for i in eval_idx]
