"""Checkpoint files: a length-prefixed JSON header followed by a flat payload.

Layout::

    [u64 little-endian header length H][H bytes of minified JSON][payload]

The header maps tensor name -> {"dtype", "shape", "offsets"} plus an optional
``"__meta__"`` map of string provenance. Offsets are relative to the payload
start. Tensors are stored little-endian, row-major, in ascending name order.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

META_KEY = "__meta__"
_HEADER_PREFIX = 8


class CheckpointError(ValueError):
    """Malformed checkpoint file or invalid checkpoint value."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class IncompatibleCheckpoints(ValueError):
    def __init__(self, message: str, name: str | None = None, attribute: str | None = None):
        self.name = name
        self.attribute = attribute
        super().__init__(message)


class DType(enum.Enum):
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def width(self) -> int:
        return 4 if self is DType.F32 else 2

    @property
    def storage(self) -> np.dtype:
        """numpy dtype holding the raw little-endian elements."""
        return {
            DType.F32: np.dtype("<f4"),
            DType.F16: np.dtype("<f2"),
            DType.BF16: np.dtype("<u2"),
        }[self]


def bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << 16).view(np.float32)


def f32_to_bf16_bits(x: np.ndarray) -> np.ndarray:
    """Round float32 to bfloat16 bit patterns, nearest-even. NaNs stay quiet NaNs."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    bits = x.view(np.uint32)
    rounded = (bits + (((bits >> 16) & 1) + 0x7FFF)) >> 16
    nan = np.isnan(x)
    rounded = np.where(nan, (bits >> 16) | 0x0040, rounded)
    return rounded.astype(np.uint16)


def _f64_to_f32_round_to_odd(x: np.ndarray) -> np.ndarray:
    # Round-to-odd as the intermediate step keeps f64 -> f32 -> bf16 equal to a
    # single nearest-even rounding.
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        y = x.astype(np.float32)
        finite = np.isfinite(y) & np.isfinite(x)
        away = finite & (np.abs(y.astype(np.float64)) > np.abs(x))
        y = np.where(away, np.nextafter(y, np.float32(0)), y)
        inexact = finite & (y.astype(np.float64) != x)
    bits = y.view(np.uint32) | inexact.astype(np.uint32)
    return bits.view(np.float32)


def encode(values: np.ndarray, dtype: DType) -> bytes:
    """Cast float values to ``dtype`` (nearest-even) and return raw bytes."""
    values = np.asarray(values)
    if dtype is DType.BF16:
        if values.dtype == np.float64:
            values = _f64_to_f32_round_to_odd(values)
        out = f32_to_bf16_bits(values.astype(np.float32))
    else:
        with np.errstate(over="ignore"):  # out-of-range values become inf, as IEEE casting prescribes
            out = values.astype(dtype.storage)
    return np.ascontiguousarray(out).tobytes()


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    byte_range: tuple[int, int]

    @property
    def nbytes(self) -> int:
        return self.byte_range[1] - self.byte_range[0]


@dataclass(frozen=True, eq=False)
class Tensor:
    """One named tensor as raw little-endian bytes."""

    dtype: DType
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if any(d < 0 for d in self.shape):
            raise CheckpointError(f"negative dimension in shape {list(self.shape)}")
        expected = math.prod(self.shape) * self.dtype.width
        if len(self.data) != expected:
            raise CheckpointError(
                f"data length {len(self.data)} does not match shape {list(self.shape)} "
                f"with {self.dtype.value} ({expected} bytes)"
            )

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.dtype is other.dtype and self.shape == other.shape and self.data == other.data

    def __hash__(self):
        return hash((self.dtype, self.shape, self.data))

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    def raw(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=self.dtype.storage).reshape(self.shape)

    def to_float32(self) -> np.ndarray:
        raw = self.raw()
        if self.dtype is DType.BF16:
            return bf16_bits_to_f32(raw)
        return raw.astype(np.float32)

    @classmethod
    def from_array(cls, values, dtype: DType | str = DType.F32) -> "Tensor":
        dtype = DType(dtype) if isinstance(dtype, str) else dtype
        values = np.asarray(values)
        if values.dtype.kind not in "fiu":
            raise CheckpointError(f"cannot store array of kind {values.dtype}")
        if values.dtype.kind != "f":
            values = values.astype(np.float64)
        return cls(dtype, values.shape, encode(values, dtype))


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Named dense tensors plus free-form string provenance.

    Equality ignores insertion order; serialization always sorts by name.
    """

    tensors: Mapping[str, Tensor]
    provenance: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, t in self.tensors.items():
            if not isinstance(name, str) or not name:
                raise CheckpointError(f"tensor names must be non-empty strings, got {name!r}")
            if name == META_KEY:
                raise CheckpointError(f"tensor name {META_KEY!r} is reserved")
            if not isinstance(t, Tensor):
                raise CheckpointError(f"tensor {name!r} is not a Tensor")
        for k, v in self.provenance.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise CheckpointError("provenance must map strings to strings")
        object.__setattr__(self, "tensors", dict(self.tensors))
        object.__setattr__(self, "provenance", dict(self.provenance))

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return dict(self.tensors) == dict(other.tensors) and dict(self.provenance) == dict(other.provenance)

    def __len__(self):
        return len(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def metas(self) -> list[TensorMeta]:
        metas, offset = [], 0
        for name in self.names():
            t = self.tensors[name]
            n = len(t.data)
            metas.append(TensorMeta(name, t.dtype, t.shape, (offset, offset + n)))
            offset += n
        return metas

    def with_provenance(self, **extra: str) -> "Checkpoint":
        return Checkpoint(self.tensors, {**self.provenance, **extra})

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype: DType | str = DType.F32, **provenance: str):
        return cls({k: Tensor.from_array(v, dtype) for k, v in arrays.items()}, provenance)


def _header_bytes(ckpt: Checkpoint) -> bytes:
    header: dict = {}
    for m in ckpt.metas():
        header[m.name] = {"dtype": m.dtype.value, "shape": list(m.shape), "offsets": list(m.byte_range)}
    if ckpt.provenance:
        header[META_KEY] = dict(ckpt.provenance)
    return json.dumps(header, separators=(",", ":"), sort_keys=True, ensure_ascii=False).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = _header_bytes(ckpt)
    parts = [struct.pack("<Q", len(header)), header]
    parts.extend(ckpt.tensors[name].data for name in ckpt.names())
    return b"".join(parts)


def write_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    if not isinstance(ckpt, Checkpoint):
        raise CheckpointError(f"expected Checkpoint, got {type(ckpt).__name__}")
    path = Path(path)
    blob = to_bytes(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise CheckpointError(f"duplicate key {k!r} in header", _HEADER_PREFIX)
        out[k] = v
    return out


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def from_bytes(blob: bytes) -> Checkpoint:
    """Parse a checkpoint, rejecting anything that is not fully well-formed."""
    size = len(blob)
    if size < _HEADER_PREFIX:
        raise CheckpointError(f"file too short for header length ({size} bytes)", 0)
    (hlen,) = struct.unpack_from("<Q", blob, 0)
    if hlen > size - _HEADER_PREFIX:
        raise CheckpointError(f"header overruns file: declared {hlen} bytes, {size - _HEADER_PREFIX} available", 0)
    payload_start = _HEADER_PREFIX + hlen
    try:
        text = blob[_HEADER_PREFIX:payload_start].decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"header is not valid UTF-8: {e.reason}", _HEADER_PREFIX + e.start) from None
    try:
        header = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"header is not valid JSON: {e.msg}", _HEADER_PREFIX + e.pos) from None
    if not isinstance(header, dict):
        raise CheckpointError("header must be a JSON object", _HEADER_PREFIX)

    meta = header.pop(META_KEY, {})
    if not isinstance(meta, dict) or not all(isinstance(v, str) for v in meta.values()):
        raise CheckpointError(f"{META_KEY} must be a map of strings", _HEADER_PREFIX)

    payload_len = size - payload_start
    entries = []
    for name, info in header.items():
        if not name:
            raise CheckpointError("empty tensor name", _HEADER_PREFIX)
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "offsets"}:
            raise CheckpointError(f"tensor {name!r}: entry must have exactly dtype, shape, offsets", _HEADER_PREFIX)
        try:
            dtype = DType(info["dtype"])
        except ValueError:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {info['dtype']!r}", _HEADER_PREFIX) from None
        shape, offsets = info["shape"], info["offsets"]
        if not isinstance(shape, list) or not all(_is_int(d) and d >= 0 for d in shape):
            raise CheckpointError(f"tensor {name!r}: shape must be a list of non-negative integers", _HEADER_PREFIX)
        if not (isinstance(offsets, list) and len(offsets) == 2 and all(_is_int(o) for o in offsets)):
            raise CheckpointError(f"tensor {name!r}: offsets must be [begin, end]", _HEADER_PREFIX)
        begin, end = offsets
        if not 0 <= begin <= end:
            raise CheckpointError(f"tensor {name!r}: invalid byte range [{begin}, {end})", payload_start + max(begin, 0))
        if end > payload_len:
            raise CheckpointError(
                f"tensor {name!r}: byte range [{begin}, {end}) out of bounds (payload is {payload_len} bytes, truncated?)",
                payload_start + begin,
            )
        expected = math.prod(shape) * dtype.width
        if end - begin != expected:
            raise CheckpointError(
                f"tensor {name!r}: byte range length {end - begin} != {expected} for shape {shape}",
                payload_start + begin,
            )
        entries.append((name, dtype, tuple(shape), begin, end))

    cursor = 0
    for name, _, _, begin, end in sorted(entries, key=lambda e: e[0]):
        if begin < cursor:
            raise CheckpointError(f"tensor {name!r}: byte range overlaps previous tensor", payload_start + begin)
        if begin > cursor:
            raise CheckpointError(f"tensor {name!r}: gap before byte range (ranges must be contiguous)", payload_start + cursor)
        cursor = end
    if cursor != payload_len:
        raise CheckpointError(f"{payload_len - cursor} trailing bytes after last tensor", payload_start + cursor)

    tensors = {
        name: Tensor(dtype, shape, bytes(blob[payload_start + b : payload_start + e]))
        for name, dtype, shape, b, e in entries
    }
    return Checkpoint(tensors, meta)


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    return from_bytes(blob)


def validate_compatible(ckpts: Iterable[Checkpoint]) -> None:
    """Raise IncompatibleCheckpoints unless all share names, shapes and dtypes."""
    ckpts = list(ckpts)
    if not ckpts:
        raise ValueError("validate_compatible needs at least one checkpoint")
    ref = ckpts[0]
    ref_names = set(ref.tensors)
    for i, other in enumerate(ckpts[1:], start=1):
        names = set(other.tensors)
        missing = sorted(ref_names - names)
        if missing:
            raise IncompatibleCheckpoints(f"missing in checkpoint {i}: {missing[0]}", missing[0], "name")
        extra = sorted(names - ref_names)
        if extra:
            raise IncompatibleCheckpoints(f"missing in checkpoint 0: {extra[0]}", extra[0], "name")
        for name in sorted(ref_names):
            a, b = ref.tensors[name], other.tensors[name]
            if a.shape != b.shape:
                raise IncompatibleCheckpoints(
                    f"tensor {name!r}: shape {list(a.shape)} in checkpoint 0 vs {list(b.shape)} in checkpoint {i}",
                    name,
                    "shape",
                )
            if a.dtype is not b.dtype:
                raise IncompatibleCheckpoints(
                    f"tensor {name!r}: dtype {a.dtype.value} in checkpoint 0 vs {b.dtype.value} in checkpoint {i}",
                    name,
                    "dtype",
                )
