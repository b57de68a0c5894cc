"""A seeded, frozen toy encoder-decoder.

Pre-norm transformer blocks (RMS norm without gains), fixed sinusoidal
positions, no biases.  Attention layers accept an optional *extension block*
of extra key/value rows.  The extension block is attended through its own
softmax and added to the ordinary attention output, so extension rows that
are exactly zero contribute exactly zero.  Memory rows enter the decoder this
way (cross-attention) and soft prefixes enter the encoder this way
(self-attention); neither carries a positional encoding.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import tensor as T
from .rng import KeyedRNG
from .tensor import Tensor

PAD, END, UNK = 0, 1, 2
START = PAD
NEG = -1e9


class BackboneInputError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    d: int = 32
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    n_heads: int = 2
    d_k: int | None = None
    d_v: int | None = None
    d_ff: int | None = None
    max_len: int = 64
    seed: int = 42
    head_gain: float = 2.0

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        for name in ("vocab_size", "d", "n_layers_enc", "n_layers_dec", "n_heads", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must leave room for the reserved ids")

    @property
    def dk(self) -> int:
        return self.d_k or self.d // self.n_heads

    @property
    def dv(self) -> int:
        return self.d_v or self.d // self.n_heads

    @property
    def dff(self) -> int:
        return self.d_ff or 2 * self.d

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass(frozen=True, eq=False)
class FrozenBackbone:
    config: BackboneConfig
    weights: Mapping[str, np.ndarray]
    subkeys: Mapping[str, str]

    @property
    def dtype(self) -> np.dtype:
        return self.weights["embed"].dtype

    def const(self, name: str) -> Tensor:
        return _const_cache(self)[name]

    def weight_hash(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "FrozenBackbone":
        return _freeze(self.config, {k: v.astype(dtype) for k, v in self.weights.items()}, self.subkeys)


_CACHE: dict[int, tuple[FrozenBackbone, dict[str, Tensor]]] = {}


def _const_cache(bb: FrozenBackbone) -> dict[str, Tensor]:
    hit = _CACHE.get(id(bb))
    if hit is None or hit[0] is not bb:
        consts = {k: Tensor._wrap(v) for k, v in bb.weights.items()}
        pe = sinusoidal_positions(bb.config.max_len, bb.config.d).astype(bb.dtype)
        pe.flags.writeable = False
        consts["_pe"] = Tensor._wrap(pe)
        _CACHE[id(bb)] = (bb, consts)
        return consts
    return hit[1]


def _freeze(config: BackboneConfig, weights: dict[str, np.ndarray], subkeys) -> FrozenBackbone:
    for arr in weights.values():
        arr.flags.writeable = False
    return FrozenBackbone(config, MappingProxyType(dict(weights)), MappingProxyType(dict(subkeys)))


def init_frozen(config: BackboneConfig) -> FrozenBackbone:
    """Draw all backbone weights from the seeded stream tree.

    Embeddings are unit normal; projections use std ``1/sqrt(fan_in)`` so a
    random stack neither vanishes nor explodes; the output head uses
    ``head_gain/sqrt(d)``.
    """
    c = config
    root = KeyedRNG(c.seed).child("backbone")
    w: dict[str, np.ndarray] = {}

    def draw(name, shape, std):
        w[name] = root.child(name).normal(shape, std)

    d, h = c.d, c.n_heads
    draw("embed", (c.vocab_size, d), 1.0)
    for l in range(c.n_layers_enc):
        _draw_attn(draw, f"enc{l}.self", d, h, c.dk, c.dv)
        draw(f"enc{l}.ff1", (d, c.dff), d ** -0.5)
        draw(f"enc{l}.ff2", (c.dff, d), c.dff ** -0.5)
    for l in range(c.n_layers_dec):
        _draw_attn(draw, f"dec{l}.self", d, h, c.dk, c.dv)
        _draw_attn(draw, f"dec{l}.cross", d, h, c.dk, c.dv)
        draw(f"dec{l}.ff1", (d, c.dff), d ** -0.5)
        draw(f"dec{l}.ff2", (c.dff, d), c.dff ** -0.5)
    draw("head", (d, c.vocab_size), c.head_gain * d ** -0.5)
    return _freeze(c, w, root.registry)


def _draw_attn(draw, prefix, d, h, dk, dv):
    draw(f"{prefix}.wq", (d, h * dk), d ** -0.5)
    draw(f"{prefix}.wk", (d, h * dk), d ** -0.5)
    draw(f"{prefix}.wv", (d, h * dv), d ** -0.5)
    draw(f"{prefix}.wo", (h * dv, d), (h * dv) ** -0.5)


# -- batched building blocks ------------------------------------------------


def _split_heads(x: Tensor, h: int) -> Tensor:
    B, n, width = x.shape
    return T.permute(T.reshape(x, (B, n, h, width // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, n, dh = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (B, n, h * dh))


def _mask_add(key_mask: np.ndarray | None, shape, dtype) -> np.ndarray | None:
    if key_mask is None:
        return None
    add = np.where(key_mask, 0.0, NEG).astype(dtype)[:, None, None, :]
    return np.broadcast_to(add, shape)


def attention(bb, prefix, qn, kvn, key_mask=None, ext=None, ext_mask=None, causal=False) -> Tensor:
    """Multi-head attention of ``qn`` over ``kvn`` plus an optional extension block."""
    c = bb.config
    W = bb.const
    h = c.n_heads
    scale = 1.0 / np.sqrt(c.dk)
    q = _split_heads(qn @ W(f"{prefix}.wq"), h)
    k = _split_heads(kvn @ W(f"{prefix}.wk"), h)
    v = _split_heads(kvn @ W(f"{prefix}.wv"), h)
    s = (q @ T.transpose(k)) * scale
    add = _mask_add(key_mask, s.shape, s.data.dtype)
    if causal:
        n = s.shape[-1]
        tri = np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0, NEG).astype(s.data.dtype)
        tri = np.broadcast_to(tri, s.shape)
        add = tri if add is None else add + tri
    if add is not None:
        s = s + add
    out = T.softmax_rows(s) @ v
    if ext is not None:
        ke = _split_heads(ext @ W(f"{prefix}.wk"), h)
        ve = _split_heads(ext @ W(f"{prefix}.wv"), h)
        se = (q @ T.transpose(ke)) * scale
        eadd = _mask_add(ext_mask, se.shape, se.data.dtype)
        if eadd is not None:
            se = se + eadd
        out = out + T.softmax_rows(se) @ ve
    return _merge_heads(out) @ W(f"{prefix}.wo")


def _ffn(bb, prefix, x: Tensor) -> Tensor:
    return T.relu(x @ bb.const(f"{prefix}.ff1")) @ bb.const(f"{prefix}.ff2")


def embed(bb, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    n = ids.shape[-1]
    x = bb.weights["embed"][ids] + bb.const("_pe").data[:n]
    return Tensor._wrap(x.astype(bb.dtype))


def check_tokens(bb, ids: np.ndarray) -> None:
    ids = np.asarray(ids)
    if ids.shape[-1] < 1:
        raise BackboneInputError("empty token sequence")
    if ids.shape[-1] > bb.config.max_len:
        raise BackboneInputError(f"sequence length {ids.shape[-1]} exceeds max_len {bb.config.max_len}")
    if ids.min() < 0 or ids.max() >= bb.config.vocab_size:
        raise BackboneInputError(f"token id out of range for vocab_size {bb.config.vocab_size}")


def encode_batch(bb, ids: np.ndarray, mask: np.ndarray | None = None, prefix: Tensor | None = None) -> Tensor:
    """Encode padded token batches ``[B, n]`` to ``[B, n, d]``.

    ``prefix`` (``[B, m, d]``) is a block of soft rows prepended to the input:
    ordinary rows attend to it through the extension path, while prefix rows
    only attend among themselves.  Only the ordinary rows are returned.
    Padded rows of the output are zero.
    """
    ids = np.asarray(ids)
    check_tokens(bb, ids)
    if mask is None:
        mask = np.ones(ids.shape, dtype=bool)
    x = embed(bb, ids)
    p = prefix
    for l in range(bb.config.n_layers_enc):
        name = f"enc{l}.self"
        xn = T.rms_norm(x)
        pn = T.rms_norm(p) if p is not None else None
        dx = attention(bb, name, xn, xn, key_mask=mask, ext=pn)
        if p is not None:
            p = p + attention(bb, name, pn, pn)
        x = x + dx
        x = x + _ffn(bb, f"enc{l}", T.rms_norm(x))
        if p is not None:
            p = p + _ffn(bb, f"enc{l}", T.rms_norm(p))
    z = T.rms_norm(x)
    if not mask.all():
        z = z * np.broadcast_to(mask[..., None], z.shape).astype(z.data.dtype)
    return z


def decode_batch(bb, enc: Tensor, enc_mask, ext: Tensor | None, ext_mask, dec_ids: np.ndarray) -> Tensor:
    """Logits ``[B, L, V]`` for decoder inputs ``dec_ids`` (``[B, L]``)."""
    dec_ids = np.asarray(dec_ids)
    check_tokens(bb, dec_ids)
    if enc.shape[-2] == 0 and (ext is None or ext.shape[-2] == 0):
        raise BackboneInputError("decoder needs at least one encoder position")
    h = embed(bb, dec_ids)
    for l in range(bb.config.n_layers_dec):
        hn = T.rms_norm(h)
        h = h + attention(bb, f"dec{l}.self", hn, hn, causal=True)
        hn = T.rms_norm(h)
        h = h + attention(bb, f"dec{l}.cross", hn, enc, key_mask=enc_mask, ext=ext, ext_mask=ext_mask)
        h = h + _ffn(bb, f"dec{l}", T.rms_norm(h))
    return T.rms_norm(h) @ bb.const("head")


def greedy_decode_batch(bb, enc, enc_mask, ext, ext_mask, max_steps: int, min_len: int = 0) -> list[list[int]]:
    """Argmax decoding per row; stops at END.  Ties go to the lowest id.

    END is excluded from the argmax for the first ``min_len`` steps.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if not 0 <= min_len <= max_steps:
        raise ValueError("min_len must lie in 0..max_steps")
    B = enc.shape[0]
    seq = np.full((B, 1), START, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    for _ in range(max_steps):
        logits = decode_batch(bb, enc, enc_mask, ext, ext_mask, seq).data[:, -1, :]
        if seq.shape[1] <= min_len:
            logits = logits.copy()
            logits[:, END] = -np.inf
        nxt = logits.argmax(axis=-1)
        for b in range(B):
            if done[b]:
                continue
            if nxt[b] == END:
                done[b] = True
            else:
                out[b].append(int(nxt[b]))
        if done.all():
            break
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out


def teacher_forcing_batch(gold: list[list[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decoder inputs, targets and per-token weights for answers ending in END.

    Each row's weights sum to one, so a weighted sum of token losses is the
    per-answer mean token cross-entropy.
    """
    if any(len(g) == 0 for g in gold):
        raise ValueError("gold answer must be nonempty")
    L = max(len(g) for g in gold)
    B = len(gold)
    targets = np.full((B, L), PAD, dtype=np.int64)
    weights = np.zeros((B, L))
    for b, g in enumerate(gold):
        targets[b, : len(g)] = g
        weights[b, : len(g)] = 1.0 / len(g)
    dec_in = np.concatenate([np.full((B, 1), START, dtype=np.int64), targets[:, :-1]], axis=1)
    return dec_in, targets, weights


# -- single-sequence interface ----------------------------------------------


@dataclass(frozen=True)
class EncoderLatent:
    z: Tensor
    token_count: int


def encode(bb: FrozenBackbone, tokens) -> EncoderLatent:
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    z = encode_batch(bb, ids)
    return EncoderLatent(T.reshape(z, z.shape[1:]), ids.shape[1])


def _split_positions(enc_positions, n_extra: int):
    pos = T.as_tensor(enc_positions)
    if pos.ndim != 2 or pos.shape[0] == 0:
        raise BackboneInputError("encoder positions must be a nonempty [n x d] matrix")
    n = pos.shape[0] - n_extra
    if n < 0:
        raise BackboneInputError("more extra rows than positions")
    enc = T.reshape(T.slice_rows(pos, 0, n), (1, n, pos.shape[1]))
    ext = None
    if n_extra:
        ext = T.reshape(T.slice_rows(pos, n), (1, n_extra, pos.shape[1]))
    return enc, ext


def decode(bb: FrozenBackbone, enc_positions, target_prefix, n_extra: int = 0) -> Tensor:
    """Next-token logits after ``target_prefix`` (which starts after START).

    The last ``n_extra`` rows of ``enc_positions`` form the memory extension.
    """
    enc, ext = _split_positions(enc_positions, n_extra)
    ids = np.asarray([START, *target_prefix], dtype=np.int64)[None, :]
    logits = decode_batch(bb, enc, None, ext, None, ids)
    return T.reshape(T.slice_rows(logits, ids.shape[1] - 1), (bb.config.vocab_size,))


def greedy_decode(bb: FrozenBackbone, enc_positions, max_steps: int, n_extra: int = 0) -> list[int]:
    enc, ext = _split_positions(enc_positions, n_extra)
    return greedy_decode_batch(bb, enc, None, ext, None, max_steps)[0]


def teacher_forced_loss(bb: FrozenBackbone, enc_positions, gold, n_extra: int = 0) -> Tensor:
    """Mean token cross-entropy of ``gold`` under teacher forcing."""
    gold = list(gold)
    if not gold:
        raise ValueError("gold answer must be nonempty")
    enc, ext = _split_positions(enc_positions, n_extra)
    dec_in, targets, weights = teacher_forcing_batch([gold])
    logits = decode_batch(bb, enc, None, ext, None, dec_in)
    return T.cross_entropy(logits, targets, weights)
