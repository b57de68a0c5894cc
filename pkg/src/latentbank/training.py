"""Offline adapter training (Type 1) and gradient-free accumulation (Type 2).

Write rules run on plain arrays, so every memory state is detached from the
tape by construction.  A training example is one conversation segment of at
most ``k`` turns: the state after the segment is probed with every question
whose evidence turns have all been written, and only the answers carry loss.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import adapters as A
from . import backbone as B
from . import tensor as T
from .adapters import AdapterParams, MemoryHyper, MemoryState, MethodId
from .backbone import FrozenBackbone
from .corpus import Conversation, Tokenizer, Turn
from .rng import KeyedRNG


class TrainingDivergence(FloatingPointError):
    def __init__(self, step: int, method: MethodId, what: str = "loss"):
        self.step = step
        self.method = method
        super().__init__(f"non-finite {what} at step {step} while training {method.label}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    warmup_steps: int = 200
    grad_clip: float = 1.0
    epochs: int = 10
    batch: int = 2
    grad_accum: int = 8
    tbptt_window: int = 8
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_answer_len: int = 4

    def __post_init__(self):
        for name in ("lr", "grad_clip", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        for name in ("warmup_steps", "epochs", "batch", "grad_accum", "tbptt_window", "max_answer_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    @property
    def segments_per_step(self) -> int:
        return self.batch * self.grad_accum

    def to_dict(self) -> dict:
        return asdict(self)


def warmup_factor(step: int, warmup: int) -> float:
    return min(1.0, step / warmup)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns the pre-clip norm too."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    s = max_norm / norm
    return {k: (g * s).astype(g.dtype) for k, g in grads.items()}, norm


def optimizer_step(
    opt: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], config: TrainConfig
) -> dict[str, np.ndarray]:
    """One AdamW update with decoupled decay and linear warmup.

    The step counter is advanced first, so the first update uses warmup
    factor ``1/warmup_steps``.
    """
    if set(grads) != set(params):
        raise ValueError("gradients do not match the trainable parameters")
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise T.NonFiniteError(f"non-finite gradient for {k}")
    opt.step += 1
    t = opt.step
    lr = config.lr * warmup_factor(t, config.warmup_steps)
    b1, b2 = config.beta1, config.beta2
    out = {}
    for k, p in params.items():
        g = grads[k].astype(np.float64)
        m = b1 * opt.m[k] + (1 - b1) * g
        v = b2 * opt.v[k] + (1 - b2) * g * g
        opt.m[k] = m.astype(p.dtype)
        opt.v[k] = v.astype(p.dtype)
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new = p.astype(np.float64) * (1 - lr * config.weight_decay) - lr * mhat / (np.sqrt(vhat) + config.eps)
        out[k] = new.astype(p.dtype)
    return out


# -- turn encoding and state trajectories ------------------------------------


class TurnEncoder:
    """Caches frozen encoder outputs per token sequence; identical input gives identical rows."""

    def __init__(self, backbone: FrozenBackbone, tokenizer: Tokenizer):
        self.backbone = backbone
        self.tokenizer = tokenizer
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def tokens(self, text: str) -> list[int]:
        ids = self.tokenizer.encode(text)
        if not ids:
            ids = [B.UNK]
        return ids[: self.backbone.config.max_len]

    def latent(self, text_or_ids) -> np.ndarray:
        ids = tuple(self.tokens(text_or_ids) if isinstance(text_or_ids, str) else text_or_ids)
        z = self._cache.get(ids)
        if z is None:
            z = B.encode(self.backbone, list(ids)).z.data
            self._cache[ids] = z
        return z


def accumulate(params: AdapterParams, state: MemoryState, latents: Sequence[np.ndarray]) -> MemoryState:
    for z in latents:
        state = A.write(params, state, z)
    return state


def type2_accumulate(
    params: AdapterParams, state: MemoryState, turns: Sequence, encoder: TurnEncoder
) -> MemoryState:
    """Sequential writes over ``turns`` (texts, token lists or Turn objects); no tape is opened."""
    latents = [encoder.latent(t.text if isinstance(t, Turn) else t) for t in turns]
    return accumulate(params, state, latents)


def tbptt_segment(turns: Sequence, k: int) -> list[list]:
    """Consecutive windows of at most ``k`` turns."""
    if k < 1:
        raise ValueError("k must be >= 1")
    turns = list(turns)
    return [turns[i : i + k] for i in range(0, len(turns), k)]


@dataclass
class Segment:
    """State after a window of turns plus the questions answerable from it."""

    state: np.ndarray
    questions: list[list[int]]
    answers: list[list[int]]
    conversation_id: str
    end_turn: int


def build_segments(
    params: AdapterParams, conversations: Sequence[Conversation], encoder: TurnEncoder, k: int
) -> list[Segment]:
    """Training segments in corpus order.  States cross window boundaries as
    plain arrays, which detaches them from any gradient path."""
    hyper, d = params.hyper, params.d
    segments = []
    for conv in conversations:
        state = A.zero_state(params.method, hyper, d)
        qs = [(q, max(q.evidence_turns)) for q in conv.qa]
        for window in tbptt_segment(conv.turns, k):
            state = type2_accumulate(params, state, window, encoder)
            end = window[-1].index
            probes = [q for q, last in qs if last <= end]
            if not probes:
                continue
            segments.append(
                Segment(
                    state.values,
                    [encoder.tokens(q.question) for q in probes],
                    [encoder.tokens(q.answer) for q in probes],
                    conv.id,
                    end,
                )
            )
    return segments


def _batch_loss(method, backbone, tp, chunk: list[Segment], max_answer_len: int) -> T.Tensor:
    questions, gold, weights, states = [], [], [], []
    for seg in chunk:
        w = 1.0 / (len(chunk) * len(seg.questions))
        for q, a in zip(seg.questions, seg.answers):
            questions.append(q)
            gold.append(a[:max_answer_len] + [B.END])
            weights.append(w)
            states.append(seg.state)
    ids, mask = A.pad_batch(questions)
    S = np.stack(states) if method is not MethodId.M0 else None
    return A.answer_loss(method, backbone, tp, S, ids, mask, gold, weights)


@dataclass
class TraceRow:
    step: int
    loss: float
    lr: float
    grad_norm: float


def trace_csv(trace: Sequence[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "lr", "grad_norm"])
    for r in trace:
        w.writerow([r.step, repr(r.loss), repr(r.lr), repr(r.grad_norm)])
    return buf.getvalue()


def type1_train(
    method,
    conversations: Sequence[Conversation],
    encoder: TurnEncoder,
    hyper: MemoryHyper,
    config: TrainConfig,
    params: AdapterParams | None = None,
    on_step: Callable[[TraceRow], None] | None = None,
) -> tuple[AdapterParams, list[TraceRow]]:
    """Train the read-side parameters of ``method``; frozen sets are untouched.

    Each optimizer step averages the answer loss over ``batch * grad_accum``
    segments, which equals accumulating ``grad_accum`` micro-batch gradients.
    """
    method = MethodId.parse(method)
    backbone = encoder.backbone
    if params is None:
        params = A.init_params(method, backbone.config, hyper, config.seed)
    elif params.method is not method:
        raise ValueError(f"params belong to {params.method.value}, not {method.value}")
    if not params.trainable:
        return params, []
    segments = build_segments(params, conversations, encoder, config.tbptt_window)
    if not segments:
        raise ValueError("corpus has no answerable questions to train on")
    per_step = config.segments_per_step
    steps_per_epoch = math.ceil(len(segments) / per_step)
    total = steps_per_epoch * config.epochs
    if config.warmup_steps > total:
        raise ValueError(f"warmup_steps={config.warmup_steps} exceeds the {total} optimizer steps of this run")
    values = {k: v.copy() for k, v in params.trainable.items()}
    opt = OptimizerState.zeros(values)
    order_rng = KeyedRNG(config.seed).child("train", method.value, "order").generator()
    trace: list[TraceRow] = []
    names = sorted(values)
    for _ in range(config.epochs):
        perm = order_rng.permutation(len(segments))
        for s in range(steps_per_epoch):
            chunk = [segments[i] for i in perm[s * per_step : (s + 1) * per_step]]
            leaves = {k: T.Tensor(values[k], trainable=True, name=k) for k in names}
            with T.Tape() as tape:
                loss = _batch_loss(method, backbone, leaves, chunk, config.max_answer_len)
            step = opt.step + 1
            if not np.isfinite(loss.item()):
                raise TrainingDivergence(step, method)
            g = tape.gradient(loss, [leaves[k] for k in names])
            grads = dict(zip(names, g))
            if not all(np.isfinite(x).all() for x in grads.values()):
                raise TrainingDivergence(step, method, "gradient")
            grads, norm = clip_global_norm(grads, config.grad_clip)
            lr = config.lr * warmup_factor(step, config.warmup_steps)
            values = optimizer_step(opt, values, grads, config)
            row = TraceRow(step, float(loss.item()), lr, norm)
            trace.append(row)
            if on_step is not None:
                on_step(row)
    return params.with_trainable(values), trace
