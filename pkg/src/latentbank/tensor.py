"""Dense tensors with a recording tape for reverse-mode differentiation.

Values are numpy arrays wrapped in :class:`Tensor`.  Leaves created with
``trainable=True`` are tracked; any op that consumes a tracked tensor while a
:class:`Tape` is active records a node holding its vector-Jacobian product.
Untracked tensors (frozen weights, detached memory) are plain constants and
never accumulate gradient storage.

Shape rules are strict: elementwise ops need equal shapes, a trailing row
vector, or a scalar; ``matmul`` takes equal leading (batch) extents or
a 2-D right operand applied row-wise.  Everything else is a
:class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ContractError(ValueError):
    pass


_DTYPE = [np.dtype(np.float32)]
_TAPES: list["Tape"] = []


def default_dtype() -> np.dtype:
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    _DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.pop()


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """An immutable array, optionally tracked for differentiation."""

    __slots__ = ("data", "trainable", "tracked", "name")

    def __init__(self, data, trainable: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        _check_finite(arr, "Tensor()")
        arr.flags.writeable = False
        self.data = arr
        self.trainable = trainable
        self.tracked = trainable
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, tracked: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.trainable = False
        out.tracked = tracked
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = " trainable" if self.trainable else (" tracked" if self.tracked else "")
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(default_dtype())
    _check_finite(arr, "as_tensor")
    return Tensor._wrap(arr)


def detach(x) -> Tensor:
    """Same values, no gradient path to anything upstream."""
    return Tensor._wrap(as_tensor(x).data)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive ops on tracked tensors.

    Use as a context manager; ops executed inside it are recorded.  Nodes are
    appended in execution order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        self.nodes.append(_Node(out, inputs, vjp))

    def gradient(self, loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. ``leaves`` (zeros if unreachable)."""
        grads = self._backprop(loss)
        return [
            grads.get(id(leaf), np.zeros_like(leaf.data)) for leaf in leaves
        ]

    def _backprop(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        if not loss.tracked:
            return grads
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads


def backward(tape: Tape, loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Map ``id(leaf) -> gradient`` for trainable leaves.

    With ``leaves`` given, every listed leaf gets an entry (zeros when the loss
    does not depend on it).  Frozen tensors never appear.
    """
    grads = tape._backprop(loss)
    if leaves is None:
        return grads
    return {id(leaf): grads.get(id(leaf), np.zeros_like(leaf.data)) for leaf in leaves if leaf.trainable}


def _emit(arr: np.ndarray, inputs: tuple, vjp: Callable, what: str) -> Tensor:
    _check_finite(arr, what)
    if _TAPES and any(t.tracked for t in inputs):
        out = Tensor._wrap(arr, tracked=True)
        _TAPES[-1].record(out, inputs, vjp)
        return out
    return Tensor._wrap(arr)


def _operand_kind(a: Tensor, b) -> str:
    if not isinstance(b, Tensor):
        return "scalar"
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar_tensor"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "row"
    raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")


def _sum_to_row(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    kind = _operand_kind(a, b if not isinstance(b, np.ndarray) else as_tensor(b))
    if kind == "scalar":
        c = float(b)
        return _emit(a.data + np.asarray(c, a.data.dtype), (a,), lambda g: (g,), "add")
    b = as_tensor(b)
    if kind == "same":
        return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if kind == "scalar_tensor":
        return _emit(a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum(), dtype=b.data.dtype)), "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, _sum_to_row(g)), "add")


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    return add(a, mul(as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    kind = _operand_kind(a, b if not isinstance(b, np.ndarray) else as_tensor(b))
    if kind == "scalar":
        c = np.asarray(float(b), a.data.dtype)
        return _emit(a.data * c, (a,), lambda g: (g * c,), "mul")
    b = as_tensor(b)
    ad, bd = a.data, b.data
    if kind == "same":
        return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    if kind == "scalar_tensor":
        return _emit(ad * bd, (a, b), lambda g: (g * bd, np.asarray((g * ad).sum(), dtype=bd.dtype)), "mul")
    return _emit(ad * bd, (a, b), lambda g: (g * bd, _sum_to_row(g * ad)), "mul")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (applied to every row of ``a``) or has exactly the same
    leading extents as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        out = ad @ bd

        def vjp(g):
            ga = g @ bd.T if a.tracked else None
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.tracked else None
            return ga, gb

        return _emit(out, (a, b), vjp, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"batch extents differ: {a.shape} @ {b.shape}")
    out = ad @ bd

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.tracked else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.tracked else None
        return ga, gb

    return _emit(out, (a, b), vjp, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _emit(out, (a,), lambda g: (g.reshape(old),), "reshape")


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), vjp, "softmax_rows")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign so neither branch overflows
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def rms_norm(x, eps: float = 1e-6) -> Tensor:
    """Scale each row to unit root-mean-square (no learned gain)."""
    x = as_tensor(x)
    d = x.data
    r = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + eps)
    y = d * r

    def vjp(g):
        return (r * g - (r ** 3) * d * (g * d).mean(axis=-1, keepdims=True),)

    return _emit(y, (x,), vjp, "rms_norm")


def concat_rows(a, b) -> Tensor:
    """Stack ``b`` under ``a`` along the row axis (second to last)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cannot concatenate rows of {a.shape} and {b.shape}")
    p = a.shape[-2]
    out = np.concatenate([a.data, b.data], axis=-2)
    return _emit(out, (a, b), lambda g: (g[..., :p, :], g[..., p:, :]), "concat_rows")


def slice_rows(a, start: int, stop: int | None = None) -> Tensor:
    a = as_tensor(a)
    stop = a.shape[-2] if stop is None else stop

    def vjp(g):
        full = np.zeros_like(a.data)
        full[..., start:stop, :] = g
        return (full,)

    return _emit(a.data[..., start:stop, :], (a,), vjp, "slice_rows")


def total(a) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    a = as_tensor(a)
    shape = a.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _emit(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.data.dtype),), "mean")


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of token negative log-likelihoods.

    ``logits`` has shape ``[..., V]``; ``targets`` and ``weights`` have the
    leading shape.  Callers normalise the weights (e.g. to a token mean).
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=logits.data.dtype)
    if targets.shape != logits.shape[:-1] or weights.shape != targets.shape:
        raise DimensionError(
            f"targets {targets.shape} / weights {weights.shape} do not match logits {logits.shape}"
        )
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(weights * picked).sum()

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * weights[..., None] * p,)

    return _emit(np.asarray(loss, dtype=x.dtype), (logits,), vjp, "cross_entropy")


def grad_check(
    f: Callable[..., Tensor],
    leaves: Sequence[np.ndarray],
    h: float = 1e-5,
    max_components: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` receives one Tensor per leaf and returns a scalar Tensor.  The error
    of a component is ``|analytic - fd| / max(|analytic|, |fd|, 1e-8)``.
    Run under ``precision(np.float64)`` for tight bounds.  With
    ``max_components`` only a seeded random subset of each leaf is probed.
    """
    arrays = [np.array(x, dtype=default_dtype()) for x in leaves]
    params = [Tensor(a, trainable=True) for a in arrays]
    with Tape() as tape:
        loss = f(*params)
    analytic = tape.gradient(loss, params)

    def evaluate(values) -> float:
        out = f(*[Tensor(v) for v in values])
        val = float(out.data)
        if not np.isfinite(val):
            raise NonFiniteError("objective is not finite at a perturbed point")
        return val

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, base in enumerate(arrays):
        idx = np.arange(base.size)
        if max_components is not None and base.size > max_components:
            idx = rng.choice(base.size, size=max_components, replace=False)
        for j in idx:
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].flat[j] += h
            minus[i].flat[j] -= h
            fd = (evaluate(plus) - evaluate(minus)) / (2 * h)
            an = float(analytic[i].flat[j])
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
