"""Lossy compression functions and error-compensation bookkeeping.

Wire layouts (little-endian):

* identity  -- raw float32 values, or float64 when encoding a float64 vector
* uniform8  -- ``[min:f4][max:f4][levels:u1 * N]``
* onebit    -- ``[scale:f4][signbits: ceil(N/8) bytes]``, bit k of the stream is
  element k (little-endian bit order), 1 = non-negative

The element count ``N`` is not part of a payload; it travels with the
enclosing message, so ``decode`` takes it explicitly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

KINDS = ("identity", "uniform8", "onebit")
ROUNDINGS = ("nearest", "stochastic")

_F4 = struct.Struct("<f")
_F4F4 = struct.Struct("<ff")


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class Codec:
    kind: str = "identity"
    rounding: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CodecError(f"unknown codec kind {self.kind!r}")
        if self.rounding not in ROUNDINGS:
            raise CodecError(f"unknown rounding {self.rounding!r}")

    @property
    def lossless(self) -> bool:
        return self.kind == "identity"

    def rng(self, rank: int = 0) -> np.random.Generator:
        """Per-worker generator for stochastic rounding."""
        return np.random.default_rng([self.seed, rank])

    def payload_size(self, n: int, dtype=np.float32) -> int:
        if self.kind == "identity":
            return n * np.dtype(dtype).itemsize
        if self.kind == "uniform8":
            return 8 + n
        return 4 + (n + 7) // 8


IDENTITY = Codec("identity")


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise CodecError("cannot encode non-finite values")


def encode(codec: Codec, x, rng: np.random.Generator | None = None) -> bytes:
    x = np.asarray(x)
    if x.dtype != np.float64:
        x = x.astype(np.float32, copy=False)
    x = x.reshape(-1)
    _check_finite(x)

    if codec.kind == "identity":
        return x.astype("<f8" if x.dtype == np.float64 else "<f4").tobytes()

    x32 = x.astype(np.float32)
    if codec.kind == "uniform8":
        return _encode_uniform8(codec, x32, rng)
    return _encode_onebit(x32)


def decode(codec: Codec, payload: bytes, n: int) -> np.ndarray:
    """Inverse of ``encode``; returns float32 (float64 only for wide identity)."""
    payload = bytes(payload)
    if codec.kind == "identity":
        if len(payload) == 4 * n:
            return np.frombuffer(payload, dtype="<f4").astype(np.float32)
        if len(payload) == 8 * n:
            return np.frombuffer(payload, dtype="<f8").astype(np.float64)
        raise CodecError(f"identity payload of {len(payload)} bytes for {n} elements")
    if len(payload) != codec.payload_size(n):
        raise CodecError(
            f"{codec.kind} payload of {len(payload)} bytes, expected {codec.payload_size(n)}")
    if codec.kind == "uniform8":
        return _decode_uniform8(payload, n)
    return _decode_onebit(payload, n)


def _encode_uniform8(codec, x, rng):
    if x.size == 0:
        return _F4F4.pack(0.0, 0.0)
    lo, hi = np.float32(x.min()), np.float32(x.max())
    span = float(hi) - float(lo)
    if span == 0.0:
        levels = np.zeros(x.size, dtype=np.uint8)
    else:
        pos = (x.astype(np.float64) - float(lo)) * 255.0 / span
        if codec.rounding == "stochastic":
            if rng is None:
                rng = codec.rng()
            pos = np.floor(pos + rng.random(x.size))
        else:
            pos = np.floor(pos + 0.5)
        levels = np.clip(pos, 0, 255).astype(np.uint8)
    return _F4F4.pack(lo, hi) + levels.tobytes()


def _decode_uniform8(payload, n):
    lo, hi = _F4F4.unpack_from(payload)
    levels = np.frombuffer(payload, dtype=np.uint8, offset=8, count=n).astype(np.float64)
    span = float(hi) - float(lo)
    return (lo + levels * span / 255.0).astype(np.float32)


def _encode_onebit(x):
    scale = np.float32(np.mean(np.abs(x.astype(np.float64)))) if x.size else np.float32(0)
    bits = np.packbits(x >= 0, bitorder="little")
    return _F4.pack(scale) + bits.tobytes()


def _decode_onebit(payload, n):
    (scale,) = _F4.unpack_from(payload)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8, offset=4),
                         count=n, bitorder="little")
    scale = np.float32(scale)
    return np.where(bits.astype(bool), scale, -scale).astype(np.float32)


def roundtrip(codec: Codec, x, rng=None) -> np.ndarray:
    x = np.asarray(x)
    return decode(codec, encode(codec, x, rng), x.size)


def compensate_encode(codec: Codec, x, delta, rng=None):
    """Encode ``x - delta`` and return ``(payload, new_delta)``.

    ``new_delta`` is float64 and satisfies
    ``decode(payload) + new_delta == fl(x - delta)`` where ``fl`` rounds to the
    dtype of ``x`` (float32 for ordinary tensors).
    """
    x = np.asarray(x)
    delta = np.asarray(delta, dtype=np.float64)
    if x.shape != delta.shape:
        raise CodecError(f"length mismatch: x {x.shape} vs delta {delta.shape}")
    wide = np.float64 if x.dtype == np.float64 else np.float32
    v = (x.astype(np.float64) - delta).astype(wide)
    payload = encode(codec, v, rng)
    residual = v.astype(np.float64) - decode(codec, payload, v.size).astype(np.float64)
    return payload, residual


@dataclass
class ErrorState:
    """Worker-side error ``delta`` over a bucket and owner-side ``epsilon``
    over the partition this worker aggregates."""

    delta: np.ndarray
    epsilon: np.ndarray

    @classmethod
    def zeros(cls, bucket_len: int, owned_len: int) -> ErrorState:
        return cls(np.zeros(bucket_len, dtype=np.float64), np.zeros(owned_len, dtype=np.float64))
