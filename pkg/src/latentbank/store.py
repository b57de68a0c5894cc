"""On-disk formats: memory bank files and adapter parameter files.

Bank file layout (all little-endian)::

    magic      4 bytes  b"LMB1"
    version    u16
    method     u8       0..6
    capacity   u8       1 or 10
    rows, cols u32, u32
    turns      u64      turn counter
    payload    rows*cols float32, row-major
    crc        u32      CRC32 of the payload bytes

Parameter files are JSON with arrays stored as base64 float32 so that equal
parameters give equal bytes.
"""

from __future__ import annotations

import base64
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .adapters import AdapterParams, MemoryHyper, MemoryState, MethodId, state_shape
from .backbone import BackboneConfig
from .corpus import Tokenizer

MAGIC = b"LMB1"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIIQ")


class BankFileError(ValueError):
    pass


class CRCError(BankFileError):
    pass


class VersionError(BankFileError):
    pass


class MethodMismatch(BankFileError):
    pass


def write_atomic(path, data: bytes | str) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def bank_bytes(state: MemoryState, method, capacity_scale: int = 1) -> bytes:
    method = MethodId.parse(method)
    if state.kind != method.state_kind:
        raise MethodMismatch(f"state kind {state.kind!r} does not belong to {method.value}")
    values = np.asarray(state.values)
    rows, cols = values.shape
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    head = _HEADER.pack(MAGIC, VERSION, method.code, capacity_scale, rows, cols, state.turn_counter)
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def parse_bank(data: bytes, expect_method=None) -> tuple[MemoryState, MethodId, int]:
    """Decode bank bytes; returns ``(state, method, capacity_scale)``."""
    if len(data) < _HEADER.size:
        raise CRCError("bank file truncated inside the header")
    magic, version, code, cap, rows, cols, turns = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BankFileError(f"not a bank file (magic {magic!r})")
    if version != VERSION:
        raise VersionError(f"bank file version {version}, expected {VERSION}")
    if code > 6:
        raise BankFileError(f"unknown method code {code}")
    method = MethodId.parse(code)
    size = rows * cols * 4
    if len(data) != _HEADER.size + size + 4:
        raise CRCError(f"bank file length {len(data)} does not match {rows}x{cols} payload")
    payload = data[_HEADER.size : _HEADER.size + size]
    (crc,) = struct.unpack_from("<I", data, _HEADER.size + size)
    if zlib.crc32(payload) != crc:
        raise CRCError("bank payload fails its CRC32 check")
    if expect_method is not None and MethodId.parse(expect_method) is not method:
        raise MethodMismatch(f"bank holds {method.value}, expected {MethodId.parse(expect_method).value}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(rows, cols)
    return MemoryState(method.state_kind, values, turns), method, cap


def save_bank(state: MemoryState, path, method, capacity_scale: int = 1) -> None:
    write_atomic(path, bank_bytes(state, method, capacity_scale))


def load_bank(path, expect_method=None) -> MemoryState:
    return parse_bank(Path(path).read_bytes(), expect_method)[0]


def check_bank_dims(state: MemoryState, params: AdapterParams) -> None:
    want = state_shape(params.method, params.hyper, params.d)
    if tuple(state.values.shape) != want:
        raise ValueError(f"bank shape {tuple(state.values.shape)} does not match parameters {want}")


# -- parameter files ----------------------------------------------------------


def _enc(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype="<f4")
    return {"shape": list(a.shape), "data": base64.b64encode(np.ascontiguousarray(a).tobytes()).decode("ascii")}


def _dec(raw: dict) -> np.ndarray:
    buf = base64.b64decode(raw["data"])
    return np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(raw["shape"])


def params_json(params: AdapterParams, backbone: BackboneConfig, tokenizer: Tokenizer, extra: dict | None = None) -> str:
    doc = {
        "format": "latentbank-params/1",
        "method": params.method.value,
        "hyper": params.hyper.to_dict(),
        "backbone": backbone.to_dict(),
        "tokenizer": tokenizer.to_dict(),
        "trainable": {k: _enc(v) for k, v in sorted(params.trainable.items())},
        "frozen": {k: _enc(v) for k, v in sorted(params.frozen.items())},
        "extra": extra or {},
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def save_params(path, params, backbone: BackboneConfig, tokenizer: Tokenizer, extra: dict | None = None) -> None:
    write_atomic(path, params_json(params, backbone, tokenizer, extra))


def load_params(path) -> tuple[AdapterParams, BackboneConfig, Tokenizer, dict]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("format") != "latentbank-params/1":
        raise ValueError(f"{path}: not a parameter file")
    method = MethodId.parse(raw["method"])
    hyper = MemoryHyper(**raw["hyper"])
    bcfg = BackboneConfig(**raw["backbone"])
    tok = Tokenizer.from_dict(raw["tokenizer"])
    params = AdapterParams(
        method,
        hyper,
        bcfg.d,
        {k: _dec(v) for k, v in raw["trainable"].items()},
        {k: _dec(v) for k, v in raw["frozen"].items()},
    )
    return params, bcfg, tok, raw.get("extra", {})
