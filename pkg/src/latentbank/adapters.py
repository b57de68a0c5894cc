"""Persistent-memory adapters: write rules, read rules, parameter partitions.

Each method pairs a gradient-free write rule over a persistent state with a
differentiable read path that turns the state into something the frozen
backbone consumes: a soft encoder prefix (M1) or an extension block of extra
decoder cross-attention rows (M2-M6).  Writes operate on plain arrays and are
therefore never recorded on a tape.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone as B
from . import tensor as T
from .backbone import BackboneConfig, FrozenBackbone
from .rng import KeyedRNG
from .tensor import Tensor


class MethodId(str, enum.Enum):
    M0 = "m0"
    M1 = "m1"
    M2 = "m2"
    M3 = "m3"
    M4 = "m4"
    M5 = "m5"
    M6 = "m6"

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def code(self) -> int:
        return int(self.value[1])

    @property
    def state_kind(self) -> str:
        if self is MethodId.M0:
            return "none"
        if self is MethodId.M4:
            return "assoc"
        if self is MethodId.M6:
            return "slots"
        return "bank"

    @classmethod
    def parse(cls, text: str | int | "MethodId") -> "MethodId":
        if isinstance(text, MethodId):
            return text
        key = str(text).strip().lower()
        for m in cls:
            if key in (m.value, m.label.lower(), str(m.code), m.value[1]):
                return m
        valid = ", ".join(m.value for m in cls)
        raise ValueError(f"unknown method {text!r}; valid ids: {valid}")


_LABELS = {
    MethodId.M0: "M0_Baseline",
    MethodId.M1: "M1_Prefix",
    MethodId.M2: "M2_XAttn",
    MethodId.M3: "M3_KVExt",
    MethodId.M4: "M4_Hebbian",
    MethodId.M5: "M5_Gated",
    MethodId.M6: "M6_Slot",
}

MEMORY_METHODS = tuple(m for m in MethodId if m is not MethodId.M0)


@dataclass(frozen=True)
class MemoryHyper:
    """Memory sizes and write decay.  Defaults are the full-scale 1x values."""

    n_P: int = 64
    gamma: float = 0.95
    d_h: int = 256
    S: int = 64
    k: int = 8
    m: int | None = None
    b_g: float = -4.0
    capacity_scale: int = 1

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 1 <= self.k <= self.S:
            raise ValueError(f"need 1 <= k <= S, got k={self.k}, S={self.S}")
        if min(self.n_P, self.d_h, self.S) < 1:
            raise ValueError("memory extents must be >= 1")
        if self.m is not None and self.m < 1:
            raise ValueError("m must be >= 1")

    @property
    def prefix_slots(self) -> int:
        return self.n_P if self.m is None else self.m

    @classmethod
    def paper(cls, capacity_scale: int = 1, **kw) -> "MemoryHyper":
        if capacity_scale == 1:
            return cls(n_P=64, d_h=256, S=64, k=8, capacity_scale=1, **kw)
        if capacity_scale == 10:
            return cls(n_P=640, d_h=810, S=640, k=8, capacity_scale=10, **kw)
        raise ValueError("capacity_scale must be 1 or 10")

    @classmethod
    def toy(cls, capacity_scale: int = 1, **kw) -> "MemoryHyper":
        # d_h grows by sqrt(10) per axis, as 256 -> 810 does at paper scale
        if capacity_scale == 1:
            return cls(n_P=16, d_h=64, S=16, k=4, capacity_scale=1, **kw)
        if capacity_scale == 10:
            return cls(n_P=160, d_h=int(round(64 * np.sqrt(10))), S=160, k=4, capacity_scale=10, **kw)
        raise ValueError("capacity_scale must be 1 or 10")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass(frozen=True, eq=False)
class MemoryState:
    kind: str
    values: np.ndarray
    turn_counter: int = 0

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise T.NonFiniteError("memory state must be finite")
        self.values.flags.writeable = False

    def equals(self, other: "MemoryState") -> bool:
        return (
            self.kind == other.kind
            and self.turn_counter == other.turn_counter
            and self.values.dtype == other.values.dtype
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )


def state_shape(method: MethodId, hyper: MemoryHyper, d: int) -> tuple[int, int]:
    kind = MethodId.parse(method).state_kind
    if kind == "none":
        return (0, d)
    if kind == "assoc":
        return (hyper.d_h, hyper.d_h)
    if kind == "slots":
        return (hyper.S, d)
    return (hyper.n_P, d)


def zero_state(method, hyper: MemoryHyper, d: int, dtype=np.float32) -> MemoryState:
    method = MethodId.parse(method)
    return MemoryState(method.state_kind, np.zeros(state_shape(method, hyper, d), dtype=dtype), 0)


# -- parameters ---------------------------------------------------------------

WRITE_SIDE = {
    "bank": ("W_Q", "W_K", "W_V"),
    "assoc": ("W_KH", "W_VH"),
    "slots": ("W_a", "W_u"),
    "none": (),
}


@dataclass(eq=False)
class AdapterParams:
    method: MethodId
    hyper: MemoryHyper
    d: int
    trainable: dict[str, np.ndarray]
    frozen: dict[str, np.ndarray]
    subkeys: dict[str, str] = field(default_factory=dict)

    @property
    def gamma(self) -> float:
        return self.hyper.gamma

    def trainable_names(self) -> list[str]:
        return sorted(self.trainable)

    def frozen_names(self) -> list[str]:
        return sorted(self.frozen)

    def frozen_hash(self) -> str:
        return _hash_arrays(self.frozen, extra=repr(self.hyper.gamma))

    def trainable_hash(self) -> str:
        return _hash_arrays(self.trainable)

    def with_trainable(self, values: dict[str, np.ndarray]) -> "AdapterParams":
        if set(values) != set(self.trainable):
            raise ValueError("trainable set mismatch")
        return replace(self, trainable={k: np.array(v, dtype=self.trainable[k].dtype) for k, v in values.items()})

    def astype(self, dtype) -> "AdapterParams":
        return replace(
            self,
            trainable={k: v.astype(dtype) for k, v in self.trainable.items()},
            frozen={k: v.astype(dtype) for k, v in self.frozen.items()},
        )

    def n_trainable(self) -> int:
        return int(sum(v.size for v in self.trainable.values()))


def _hash_arrays(arrays: dict[str, np.ndarray], extra: str = "") -> str:
    h = hashlib.sha256(extra.encode())
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(str(arrays[name].dtype).encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


def init_params(method, config: BackboneConfig, hyper: MemoryHyper, seed: int = 42) -> AdapterParams:
    """Fresh adapter parameters with the safe-startup initialisation.

    Read projections feeding the decoder start at zero (W_P, W_Mem), the
    blend coefficients beta start at zero, and the gated branch starts with a
    zero value projection behind a negative gate bias, so every method decodes
    exactly like the baseline before training.  Write-side projections are
    random maps with std ``1/sqrt(fan_in)``.
    """
    method = MethodId.parse(method)
    d = config.d
    rng = KeyedRNG(seed).child("adapter", method.value)
    tr: dict[str, np.ndarray] = {}
    fr: dict[str, np.ndarray] = {}

    def rand(name, shape, std):
        return rng.child(name).normal(shape, std)

    kind = method.state_kind
    if kind == "bank":
        for name in WRITE_SIDE["bank"]:
            fr[name] = rand(name, (d, d), d ** -0.5)
    elif kind == "assoc":
        # unit-norm keys and values, so one write has Frobenius norm O(1) and
        # the clamp rescales an accumulated history instead of a single turn
        for name in WRITE_SIDE["assoc"]:
            fr[name] = rand(name, (d, hyper.d_h), (d * hyper.d_h) ** -0.5)
    elif kind == "slots":
        for name in WRITE_SIDE["slots"]:
            fr[name] = rand(name, (d, d), d ** -0.5)

    if method is MethodId.M1:
        tr["W_P"] = np.zeros((d, d), np.float32)
        if hyper.prefix_slots != hyper.n_P:
            tr["U_P"] = rand("U_P", (hyper.prefix_slots, hyper.n_P), hyper.n_P ** -0.5)
    elif method is MethodId.M2:
        for name in ("Wq_mem", "Wk_mem", "Wv_mem", "O_mem"):
            tr[name] = rand(name, (d, d), d ** -0.5)
        tr["beta"] = np.zeros(config.n_layers_dec, np.float32)
    elif method in (MethodId.M3, MethodId.M6):
        tr["W_mem"] = np.zeros((d, d), np.float32)
    elif method is MethodId.M4:
        tr["W_QH"] = rand("W_QH", (d, hyper.d_h), 0.02)
        tr["W_mem"] = np.zeros((hyper.d_h, d), np.float32)
    elif method is MethodId.M5:
        tr["Wq_mem"] = rand("Wq_mem", (d, d), d ** -0.5)
        tr["Wk_mem"] = rand("Wk_mem", (d, d), d ** -0.5)
        tr["Wv_mem"] = np.zeros((d, d), np.float32)
        tr["W_g"] = rand("W_g", (2 * d, d), (2 * d) ** -0.5)
        tr["b_g"] = np.full(d, hyper.b_g, np.float32)
    return AdapterParams(method, hyper, d, tr, fr, dict(rng.registry))


# -- write rules (no gradient recording) -------------------------------------


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def write_attention(P, z, W_Q, W_K, W_V, gamma: float) -> np.ndarray:
    """Attention-coupled bank write: ``gamma*P + softmax(Q K^T/sqrt d)^T V``.

    Queries and values come from the turn latent ``z``; keys come from the
    current bank, so the turn is spread over the rows it addresses.
    """
    P, z = _arr(P), _arr(z)
    W_Q, W_K, W_V = _arr(W_Q), _arr(W_K), _arr(W_V)
    if z.shape[1] != W_Q.shape[0] or P.shape[1] != W_K.shape[0]:
        raise T.DimensionError(f"write_attention: z {z.shape}, P {P.shape}")
    d = z.shape[1]
    A = _softmax((z @ W_Q) @ (P @ W_K).T / np.sqrt(d))
    g = np.asarray(gamma, P.dtype)
    return (g * P + A.T @ (z @ W_V)).astype(P.dtype)


def frobenius(M: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(M, dtype=np.float64))))


def write_hebbian(M, z, W_KH, W_VH, gamma: float) -> np.ndarray:
    """Decayed outer-product write, rescaled so the Frobenius norm is at most 1.

    ``n`` in the ``1/n`` normaliser is the number of (unpadded) rows of ``z``.
    """
    M, z = _arr(M), _arr(z)
    W_KH, W_VH = _arr(W_KH), _arr(W_VH)
    if z.shape[1] != W_KH.shape[0] or M.shape != (W_KH.shape[1], W_VH.shape[1]):
        raise T.DimensionError(f"write_hebbian: z {z.shape}, M {M.shape}")
    n = z.shape[0]
    g = np.asarray(gamma, M.dtype)
    upd = g * M + ((z @ W_KH).T @ (z @ W_VH)) / np.asarray(n, M.dtype)
    upd = upd.astype(M.dtype)
    norm = frobenius(upd)
    if norm <= 1.0:
        return upd
    out = (upd / np.asarray(norm, M.dtype)).astype(M.dtype)
    # rounding can leave the norm a few ulps above one
    shrink = np.asarray(1.0 - np.finfo(M.dtype).eps, M.dtype)
    while frobenius(out) > 1.0:
        out = out * shrink
    return out


def top_k_mask(a: np.ndarray, k: int) -> np.ndarray:
    """Indicator of the ``k`` largest entries; ties go to the lowest index."""
    a = np.asarray(a)
    if not 1 <= k <= a.shape[0]:
        raise ValueError(f"k={k} out of range for {a.shape[0]} slots")
    order = np.argsort(-a, kind="stable")[:k]
    mask = np.zeros(a.shape[0], dtype=bool)
    mask[order] = True
    return mask


def write_slots(P, z, W_a, W_u, gamma: float, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Sparse slot write: only the top-``k`` addressed slots move toward the turn summary."""
    P, z = _arr(P), _arr(z)
    W_a, W_u = _arr(W_a), _arr(W_u)
    if z.shape[1] != W_a.shape[0] or P.shape[1] != W_a.shape[1]:
        raise T.DimensionError(f"write_slots: z {z.shape}, P {P.shape}")
    if k > P.shape[0]:
        raise ValueError(f"k={k} exceeds slot count {P.shape[0]}")
    d = z.shape[1]
    zbar = z.mean(axis=0)
    a = _softmax((zbar @ W_a) @ P.T / np.sqrt(d))
    mask = top_k_mask(a, k)
    u = zbar @ W_u
    g = np.asarray(gamma, P.dtype)
    out = P.copy()
    out[mask] = g * P[mask] + (np.asarray(1.0, P.dtype) - g) * u
    return out.astype(P.dtype), mask


def write(params: AdapterParams, state: MemoryState, z) -> MemoryState:
    """Apply the method's write rule for one turn latent ``z`` (``[n, d]``)."""
    z = _arr(z)
    fr, g = params.frozen, params.hyper.gamma
    kind = params.method.state_kind
    if state.kind != kind:
        raise T.DimensionError(f"state kind {state.kind!r} does not match method {params.method.value}")
    if kind == "none":
        new = state.values
    elif kind == "bank":
        new = write_attention(state.values, z, fr["W_Q"], fr["W_K"], fr["W_V"], g)
    elif kind == "assoc":
        new = write_hebbian(state.values, z, fr["W_KH"], fr["W_VH"], g)
    else:
        new, _ = write_slots(state.values, z, fr["W_a"], fr["W_u"], g, params.hyper.k)
    return MemoryState(kind, new, state.turn_counter + 1)


def step(params: AdapterParams, state: MemoryState, backbone: FrozenBackbone, turn_tokens) -> MemoryState:
    """Encode one turn with the frozen encoder and write it into the state."""
    z = B.encode(backbone, turn_tokens).z.data
    return write(params, state, z)


# -- read rules (differentiable) ---------------------------------------------


def read_prefix(P, W_P, U_P=None) -> Tensor:
    """Soft prefix ``U_P P W_P``; with ``U_P`` omitted it is the identity."""
    P = T.as_tensor(P)
    if U_P is not None:
        U_P = T.as_tensor(U_P)
        if U_P.shape[-1] != P.shape[-2]:
            raise T.DimensionError(f"U_P {U_P.shape} does not mix {P.shape[-2]} rows")
        P = T.transpose(T.transpose(P) @ T.transpose(U_P))
    return P @ W_P


def read_kv_extension(P, W_mem) -> Tensor:
    """Pseudo-encoder rows ``P W_Mem`` for the decoder extension block."""
    return T.as_tensor(P) @ W_mem


def _memory_xattn(P, z, Wq, Wk, Wv) -> Tensor:
    P, z = T.as_tensor(P), T.as_tensor(z)
    d = z.shape[-1]
    scores = (z @ Wq) @ T.transpose(P @ Wk)
    return T.softmax_rows(scores * (1.0 / np.sqrt(d))) @ (P @ Wv)


def read_xattn_proxy(P, z, Wq, Wk, Wv, O, beta) -> Tensor:
    """Memory cross-attention computed once with ``z`` standing in for decoder
    states, projected by ``O`` and scaled by the mean blend coefficient."""
    c = _memory_xattn(P, z, Wq, Wk, Wv) @ O
    return c * T.mean(beta)


def read_hebbian(M, z, W_QH, W_mem) -> Tensor:
    """Associative recall ``((z W_QH) M) W_Mem``."""
    M, z = T.as_tensor(M), T.as_tensor(z)
    if M.shape[-2] != T.as_tensor(W_QH).shape[-1]:
        raise T.DimensionError(f"W_QH {T.as_tensor(W_QH).shape} does not match M {M.shape}")
    return ((z @ W_QH) @ M) @ W_mem


def read_gated_proxy(P, z, Wq, Wk, Wv, W_g, b_g) -> Tensor:
    """Gated memory read ``sigmoid(W_g [z; c] + b_g) * c``, one gate per feature."""
    z = T.as_tensor(z)
    W_g = T.as_tensor(W_g)
    d = z.shape[-1]
    c = _memory_xattn(P, z, Wq, Wk, Wv)
    pre = z @ T.slice_rows(W_g, 0, d) + c @ T.slice_rows(W_g, d, 2 * d)
    gate = T.sigmoid(pre + b_g)
    return gate * c


@dataclass
class ReadOut:
    """Encoder rows and extension block handed to the frozen decoder."""

    enc: Tensor
    enc_mask: np.ndarray
    ext: Tensor | None
    ext_mask: np.ndarray | None

    @property
    def n_extra(self) -> int:
        return 0 if self.ext is None else self.ext.shape[-2]


def param_tensors(params: AdapterParams, trainable: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, trainable=trainable, dtype=v.dtype) for k, v in params.trainable.items()}


def read(
    method,
    backbone: FrozenBackbone,
    tp: dict[str, Tensor],
    states: np.ndarray | None,
    q_ids: np.ndarray,
    q_mask: np.ndarray,
    z: Tensor | None = None,
) -> ReadOut:
    """Batched read path for questions ``q_ids`` (``[B, n]``) given states ``[B, ...]``.

    ``z`` may carry precomputed encoder rows for the questions; M1 ignores it
    because its prefix changes the encoding.
    """
    method = MethodId.parse(method)
    q_ids = np.asarray(q_ids)
    if method is MethodId.M1:
        S = read_prefix(Tensor._wrap(np.asarray(states)), tp["W_P"], tp.get("U_P"))
        enc = B.encode_batch(backbone, q_ids, q_mask, prefix=S)
        return ReadOut(enc, q_mask, None, None)
    enc = z if z is not None else B.encode_batch(backbone, q_ids, q_mask)
    if method is MethodId.M0:
        return ReadOut(enc, q_mask, None, None)
    mem = Tensor._wrap(np.asarray(states))
    if method is MethodId.M2:
        ext = read_xattn_proxy(mem, enc, tp["Wq_mem"], tp["Wk_mem"], tp["Wv_mem"], tp["O_mem"], tp["beta"])
        return ReadOut(enc, q_mask, ext, q_mask)
    if method in (MethodId.M3, MethodId.M6):
        return ReadOut(enc, q_mask, read_kv_extension(mem, tp["W_mem"]), None)
    if method is MethodId.M4:
        return ReadOut(enc, q_mask, read_hebbian(mem, enc, tp["W_QH"], tp["W_mem"]), q_mask)
    ext = read_gated_proxy(mem, enc, tp["Wq_mem"], tp["Wk_mem"], tp["Wv_mem"], tp["W_g"], tp["b_g"])
    return ReadOut(enc, q_mask, ext, q_mask)


def pad_batch(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token lists with PAD; returns ids and a validity mask."""
    if not seqs:
        raise ValueError("empty batch")
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), B.PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        if not s:
            raise ValueError("empty token sequence in batch")
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def answer_loss(method, backbone, tp, states, q_ids, q_mask, gold: list[list[int]], item_weights, z=None) -> Tensor:
    """Weighted sum over items of per-answer mean token cross-entropy."""
    ro = read(method, backbone, tp, states, q_ids, q_mask, z)
    dec_in, targets, w = B.teacher_forcing_batch(gold)
    logits = B.decode_batch(backbone, ro.enc, ro.enc_mask, ro.ext, ro.ext_mask, dec_in)
    w = w * np.asarray(item_weights, dtype=float)[:, None]
    return T.cross_entropy(logits, targets, w)


def answer(method, backbone, tp, states, q_ids, q_mask, max_steps: int, min_len: int = 0, z=None) -> list[list[int]]:
    """Greedy answers for a batch of questions."""
    ro = read(method, backbone, tp, states, q_ids, q_mask, z)
    return B.greedy_decode_batch(backbone, ro.enc, ro.enc_mask, ro.ext, ro.ext_mask, max_steps, min_len)


def batch_states(states: list[MemoryState]) -> np.ndarray:
    return np.stack([s.values for s in states])
