"""Forgetting curves, knowledge curves and adapter interference.

Every question is answered twice with identical question tokens: once with
the accumulated memory state and once with the state forced to zero.  The
memory recall rate is the F1 gain of the first arm over the second,
normalised by the headroom left by the zero arm.  Means that enter the
tax/benefit algebra are kept as exact fractions so the identity
``tax + benefit == f1_mem - f1_zero`` holds without rounding.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import adapters as A
from .adapters import AdapterParams, MethodId
from .corpus import Conversation, QAPair, normalize_words
from .tensor import ContractError
from .training import TurnEncoder, type2_accumulate

EPS = 1e-6
PAPER_LAG_EDGES = (0, 32, 64, 128, 256)


def _words(x) -> list[str]:
    if isinstance(x, str):
        return normalize_words(x)
    return [w for t in x for w in normalize_words(str(t))]


def token_f1_exact(prediction, gold) -> Fraction:
    g = _words(gold)
    if not g:
        raise ContractError("gold answer has no tokens")
    p = _words(prediction)
    if not p:
        return Fraction(0)
    overlap = sum((Counter(p) & Counter(g)).values())
    return Fraction(2 * overlap, len(p) + len(g))


def token_f1(prediction, gold) -> float:
    """Bag-of-tokens F1 after lowercasing and punctuation stripping."""
    return float(token_f1_exact(prediction, gold))


def evidence_lag(q: QAPair, total_turns: int) -> int:
    """Turns between the oldest supporting turn and the question at ``total_turns``."""
    if not q.evidence_turns:
        raise ContractError("question has no evidence turns")
    if max(q.evidence_turns) > total_turns or min(q.evidence_turns) < 0:
        raise ContractError(f"evidence {q.evidence_turns} lies outside 0..{total_turns}")
    return total_turns - min(q.evidence_turns)


def memory_recall_rate(f1_mem: float, f1_zero: float, eps: float = EPS) -> float:
    if not eps > 0:
        raise ValueError("eps must be positive")
    return max(0.0, f1_mem - f1_zero) / max(1.0 - f1_zero, eps)


def isotonic_fit_nonincreasing(values: Sequence[float], weights: Sequence[float] | None = None) -> list[float]:
    """Weighted least-squares non-increasing fit by pooling adjacent violators."""
    v = [float(x) for x in values]
    if not v:
        raise ValueError("isotonic fit of an empty sequence")
    w = [1.0] * len(v) if weights is None else [float(x) for x in weights]
    if len(w) != len(v):
        raise ValueError("values and weights differ in length")
    if min(w) <= 0:
        raise ValueError("weights must be positive")
    # blocks of (weighted mean, total weight, length); a violation is a block
    # whose mean exceeds the block before it
    blocks: list[list[float]] = []
    for x, wt in zip(v, w):
        blocks.append([x, wt, 1])
        while len(blocks) > 1 and blocks[-2][0] < blocks[-1][0]:
            m2, w2, n2 = blocks.pop()
            m1, w1, n1 = blocks[-1]
            tw = w1 + w2
            blocks[-1] = [(m1 * w1 + m2 * w2) / tw, tw, n1 + n2]
    out: list[float] = []
    for m, _, n in blocks:
        out.extend([m] * int(n))
    return out


@dataclass(frozen=True)
class LagBuckets:
    """Half-open lag ranges given by their lower edges; the last is unbounded."""

    edges: tuple[int, ...] = PAPER_LAG_EDGES

    def __post_init__(self):
        if not self.edges or self.edges[0] != 0:
            raise ValueError("lag buckets must start at 0")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("lag bucket edges must increase")

    @classmethod
    def scaled(cls, factor: float) -> "LagBuckets":
        edges = tuple(int(round(e * factor)) for e in PAPER_LAG_EDGES)
        return cls(edges)

    def __len__(self) -> int:
        return len(self.edges)

    def bounds(self, b: int) -> tuple[int, float]:
        hi = self.edges[b + 1] if b + 1 < len(self.edges) else math.inf
        return self.edges[b], hi

    def index(self, lag: int) -> int:
        if lag < 0:
            raise ValueError("lag must be nonnegative")
        return int(np.searchsorted(self.edges, lag, side="right") - 1)

    def counts(self, lags: Sequence[int]) -> list[int]:
        c = [0] * len(self)
        for lag in lags:
            c[self.index(lag)] += 1
        return c


@dataclass(frozen=True)
class CurvePoint:
    bucket: int
    lo: int
    hi: float
    n: int
    raw: float | None
    smooth: float | None


def forgetting_curve(results: Sequence[tuple[float, int]], buckets: LagBuckets) -> list[CurvePoint]:
    """Bucket means of ``(rho, lag)`` pairs, then a count-weighted
    non-increasing fit over the nonempty buckets.  Empty buckets stay absent."""
    if not results:
        raise ValueError("no results to bucket")
    sums = [0.0] * len(buckets)
    counts = [0] * len(buckets)
    for rho, lag in results:
        b = buckets.index(lag)
        sums[b] += rho
        counts[b] += 1
    present = [b for b in range(len(buckets)) if counts[b]]
    raw = {b: sums[b] / counts[b] for b in present}
    fit = isotonic_fit_nonincreasing([raw[b] for b in present], [counts[b] for b in present])
    smooth = dict(zip(present, fit))
    return [
        CurvePoint(b, *buckets.bounds(b), counts[b], raw.get(b), smooth.get(b))
        for b in range(len(buckets))
    ]


@dataclass(frozen=True)
class KnowledgeCurve:
    """``K[s-1]`` is the mean F1 after sessions ``1..s``; ``None`` where nothing is answerable."""

    K: tuple[float | None, ...]
    n: tuple[int, ...]

    @property
    def delta(self) -> float | None:
        defined = [k for k in self.K if k is not None]
        if not defined:
            return None
        return defined[-1] - defined[0]


def knowledge_curve(
    conversations: Sequence[Conversation],
    answer_fn: Callable[[Conversation, int, list[QAPair]], list[str]],
) -> KnowledgeCurve:
    """Probe after every session boundary ``s`` with the questions whose
    evidence sessions all lie in ``1..s``.  ``answer_fn(conv, s, qas)``
    returns one prediction per question."""
    n_max = max(c.n_sessions for c in conversations)
    per_s: list[list[Fraction]] = [[] for _ in range(n_max)]
    for conv in conversations:
        for s in range(1, n_max + 1):
            qas = [q for q in conv.qa if max(q.evidence_sessions) <= s]
            if not qas:
                continue
            preds = answer_fn(conv, min(s, conv.n_sessions), qas)
            per_s[s - 1].extend(token_f1_exact(p, q.answer) for p, q in zip(preds, qas))
    K = tuple(float(sum(f) / len(f)) if f else None for f in per_s)
    return KnowledgeCurve(K, tuple(len(f) for f in per_s))


def adapter_tax(f1_base, f1_zero_adapter):
    """Positive when the adapter with empty memory is worse than the baseline."""
    return f1_base - f1_zero_adapter


def net_benefit(f1_mem, f1_base):
    return f1_mem - f1_base


# -- protocol -----------------------------------------------------------------


class Answerer:
    """Batched greedy answering for one method with fixed parameters."""

    def __init__(self, params: AdapterParams, encoder: TurnEncoder, max_steps: int = 4, min_len: int = 1, chunk: int = 256):
        self.params = params
        self.min_len = min_len
        self.encoder = encoder
        self.max_steps = max_steps
        self.chunk = chunk
        self.tp = A.param_tensors(params)
        self.trace: list[tuple[str, tuple[int, ...]]] = []

    @property
    def method(self) -> MethodId:
        return self.params.method

    def zero(self) -> np.ndarray:
        return A.zero_state(self.method, self.params.hyper, self.params.d).values

    def __call__(self, states: Sequence[np.ndarray], questions: Sequence[str], arm: str = "mem") -> list[str]:
        out: list[str] = []
        bb = self.encoder.backbone
        tok = self.encoder.tokenizer
        for i in range(0, len(questions), self.chunk):
            qs = [self.encoder.tokens(q) for q in questions[i : i + self.chunk]]
            self.trace.extend((arm, tuple(q)) for q in qs)
            ids, mask = A.pad_batch(qs)
            S = None if self.method is MethodId.M0 else np.stack(states[i : i + self.chunk])
            for seq in A.answer(self.method, bb, self.tp, S, ids, mask, self.max_steps, self.min_len):
                out.append(tok.decode(seq))
        return out


def _fmt(x: Fraction) -> str:
    return f"{x.numerator}/{x.denominator}"


@dataclass
class QuestionResult:
    qid: str
    question: str
    gold: str
    lag: int
    bucket: int
    pred_mem: str
    pred_zero: str
    f1_mem: float
    f1_zero: float
    f1_base: float
    rho: float


@dataclass
class Interference:
    """Mean F1 of the three arms and the derived tax and benefit, as exact
    fractions ``"p/q"`` plus floats.  ``averaging`` is ``question`` or ``bucket``."""

    averaging: str
    f1_base: str
    f1_zero: str
    f1_mem: str
    tax: str
    benefit: str

    @classmethod
    def build(cls, averaging: str, base: Fraction, zero: Fraction, mem: Fraction) -> "Interference":
        return cls(averaging, _fmt(base), _fmt(zero), _fmt(mem), _fmt(adapter_tax(base, zero)), _fmt(net_benefit(mem, base)))

    def exact(self, name: str) -> Fraction:
        return Fraction(getattr(self, name))

    def holds(self) -> bool:
        return self.exact("tax") + self.exact("benefit") == self.exact("f1_mem") - self.exact("f1_zero")

    def as_floats(self) -> dict[str, float]:
        return {k: float(self.exact(k)) for k in ("f1_base", "f1_zero", "f1_mem", "tax", "benefit")}


@dataclass
class MethodReport:
    method: str
    curve: list[CurvePoint]
    questions: list[QuestionResult]
    knowledge: KnowledgeCurve
    interference: list[Interference]

    def bucket_rho(self, b: int, smooth: bool = False) -> float | None:
        p = self.curve[b]
        return p.smooth if smooth else p.raw


@dataclass
class EvalReport:
    config: dict
    methods: dict[str, MethodReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"config": self.config, "methods": {}}
        for label, r in self.methods.items():
            curve = []
            for p in r.curve:
                c = asdict(p)
                c["hi"] = None if math.isinf(p.hi) else int(p.hi)
                curve.append(c)
            out["methods"][label] = {
                "method": r.method,
                "curve": curve,
                "questions": [asdict(q) for q in r.questions],
                "knowledge": {"K": list(r.knowledge.K), "n": list(r.knowledge.n), "delta": r.knowledge.delta},
                "interference": [asdict(i) for i in r.interference],
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        methods = {}
        for label, r in raw["methods"].items():
            curve = [
                CurvePoint(c["bucket"], c["lo"], math.inf if c["hi"] is None else c["hi"], c["n"], c["raw"], c["smooth"])
                for c in r["curve"]
            ]
            methods[label] = MethodReport(
                r["method"],
                curve,
                [QuestionResult(**q) for q in r["questions"]],
                KnowledgeCurve(tuple(r["knowledge"]["K"]), tuple(r["knowledge"]["n"])),
                [Interference(**i) for i in r["interference"]],
            )
        return cls(raw["config"], methods)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "bucket_lo", "bucket_hi", "n", "raw_rho", "smooth_rho"])
        for label, r in self.methods.items():
            for p in r.curve:
                w.writerow([
                    label,
                    p.lo,
                    "inf" if math.isinf(p.hi) else int(p.hi),
                    p.n,
                    "" if p.raw is None else repr(p.raw),
                    "" if p.smooth is None else repr(p.smooth),
                ])
        return buf.getvalue()


def _mean(xs: Sequence[Fraction]) -> Fraction:
    return sum(xs, Fraction(0)) / len(xs) if xs else Fraction(0)


def session_states(params: AdapterParams, conv: Conversation, encoder: TurnEncoder) -> list[np.ndarray]:
    """State after each session; entry ``s`` follows sessions ``1..s`` (entry 0 is empty memory)."""
    state = A.zero_state(params.method, params.hyper, params.d)
    out = [state.values]
    for session in conv.sessions:
        state = type2_accumulate(params, state, session, encoder)
        out.append(state.values)
    return out


def run_protocol(
    params: dict,
    conversations: Sequence[Conversation],
    encoder: TurnEncoder,
    buckets: LagBuckets,
    eps: float = EPS,
    max_steps: int = 4,
    min_len: int = 1,
    methods: Sequence | None = None,
    banks: dict | None = None,
    config: dict | None = None,
) -> EvalReport:
    """Answer every question under each method with the memory arm and the
    zero-state arm, then assemble curves, knowledge series and interference.

    ``params`` maps method to trained ``AdapterParams``; M0 is added when
    missing.  ``banks`` optionally maps method to ``{conversation_id: state}``
    to replace the end-of-conversation accumulation.
    """
    if not conversations:
        raise ValueError("no conversations to evaluate")
    params = {MethodId.parse(k): v for k, v in params.items()}
    requested = [MethodId.parse(m) for m in (methods or list(params))]
    if MethodId.M0 not in requested:
        requested.insert(0, MethodId.M0)
    cfg = encoder.backbone.config
    hyper = next((p.hyper for p in params.values()), A.MemoryHyper.toy())
    if MethodId.M0 not in params:
        params[MethodId.M0] = A.init_params(MethodId.M0, cfg, hyper)
    missing = [m.value for m in requested if m not in params]
    if missing:
        raise KeyError(f"no trained parameters for {', '.join(missing)}")
    banks = {MethodId.parse(k): v for k, v in (banks or {}).items()}

    qas = [(c, q) for c in conversations for q in c.qa]
    lags = [evidence_lag(q, c.n_turns) for c, q in qas]
    questions = [q.question for _, q in qas]

    base_run = Answerer(params[MethodId.M0], encoder, max_steps, min_len)
    base_pred = base_run([None] * len(qas), questions, "base")
    base_f1 = [token_f1_exact(p, q.answer) for p, (_, q) in zip(base_pred, qas)]

    report = EvalReport(
        dict(
            config or {},
            eps=eps,
            lag_edges=list(buckets.edges),
            max_steps=max_steps,
            min_len=min_len,
            methods=[m.value for m in requested],
            n_conversations=len(conversations),
            n_questions=len(qas),
            tokenizer=encoder.tokenizer.fingerprint(),
            backbone=encoder.backbone.weight_hash(),
        )
    )
    for m in requested:
        p = params[m]
        run = Answerer(p, encoder, max_steps, min_len)
        if m is MethodId.M0:
            pred_mem = pred_zero = base_pred
        else:
            trajectories = {c.id: session_states(p, c, encoder) for c in conversations}
            final = {}
            for c in conversations:
                bank = banks.get(m, {}).get(c.id)
                final[c.id] = trajectories[c.id][-1] if bank is None else np.asarray(bank)
            pred_mem = run([final[c.id] for c, _ in qas], questions, "mem")
            zero = run.zero()
            pred_zero = run([zero] * len(qas), questions, "zero")
            mem_q = [t for a, t in run.trace if a == "mem"]
            zero_q = [t for a, t in run.trace if a == "zero"]
            if mem_q != zero_q:
                raise AssertionError("memory and zero arms saw different question tokens")
        f_mem = [token_f1_exact(pr, q.answer) for pr, (_, q) in zip(pred_mem, qas)]
        f_zero = [token_f1_exact(pr, q.answer) for pr, (_, q) in zip(pred_zero, qas)]
        results = []
        for i, (c, q) in enumerate(qas):
            rho = 0.0 if m is MethodId.M0 else memory_recall_rate(float(f_mem[i]), float(f_zero[i]), eps)
            results.append(
                QuestionResult(
                    q.qid, q.question, q.answer, lags[i], buckets.index(lags[i]),
                    pred_mem[i], pred_zero[i], float(f_mem[i]), float(f_zero[i]), float(base_f1[i]), rho,
                )
            )
        curve = forgetting_curve([(r.rho, r.lag) for r in results], buckets)

        if m is MethodId.M0:
            def answer_fn(conv, s, probe, _run=run):
                return _run([None] * len(probe), [q.question for q in probe], "k")
        else:
            def answer_fn(conv, s, probe, _run=run, _tr=trajectories):
                return _run([_tr[conv.id][s]] * len(probe), [q.question for q in probe], "k")
        knowledge = knowledge_curve(conversations, answer_fn)

        inter = [Interference.build("question", _mean(base_f1), _mean(f_zero), _mean(f_mem))]
        present = sorted({r.bucket for r in results})
        by_b = lambda xs, b: _mean([x for x, r in zip(xs, results) if r.bucket == b])
        inter.append(
            Interference.build(
                "bucket",
                _mean([by_b(base_f1, b) for b in present]),
                _mean([by_b(f_zero, b) for b in present]),
                _mean([by_b(f_mem, b) for b in present]),
            )
        )
        report.methods[m.label] = MethodReport(m.value, curve, results, knowledge, inter)
    return report
