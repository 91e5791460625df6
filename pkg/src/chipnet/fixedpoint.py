"""Signed Q-format fixed point.

A value ``v`` in format ``(N, F)`` is stored as the integer ``round(v * 2**F)``
saturated to ``[-2**(N-1), 2**(N-1) - 1]``. Products of two formats carry
``F_a + F_b`` fraction bits and are accumulated at full width; a single
:func:`requantize` brings the sum back to an activation format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError, DomainError, ShapeError


class Rounding(str, Enum):
    HALF_AWAY = "half_away"
    HALF_EVEN = "half_even"


@dataclass(frozen=True)
class QFormat:
    total_bits: int
    fraction_bits: int

    def __post_init__(self):
        if not 2 <= self.total_bits <= 32:
            raise DomainError(f"total_bits must be in 2..32, got {self.total_bits}")
        if not 0 <= self.fraction_bits < self.total_bits:
            raise DomainError(
                f"fraction_bits must be in 0..{self.total_bits - 1}, got {self.fraction_bits}")

    @property
    def scale(self) -> int:
        return 1 << self.fraction_bits

    @property
    def raw_min(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def raw_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def min_value(self) -> float:
        return self.raw_min / self.scale

    @property
    def max_value(self) -> float:
        return self.raw_max / self.scale

    @property
    def step(self) -> float:
        return 1.0 / self.scale

    def __str__(self) -> str:
        return f"Q{self.total_bits}.{self.fraction_bits}"


# 18-bit defaults: weights below 8 and activations below 128 in magnitude never saturate
WEIGHT_FORMAT = QFormat(18, 14)
ACTIVATION_FORMAT = QFormat(18, 10)


def default_formats(total_bits: int) -> tuple[QFormat, QFormat]:
    """(weight, activation) formats for a bit length, keeping 4 and 8 integer bits."""
    return (QFormat(total_bits, max(total_bits - 4, 0)),
            QFormat(total_bits, max(total_bits - 8, 0)))


def _round(a: np.ndarray, mode: Rounding) -> np.ndarray:
    if mode == Rounding.HALF_EVEN:
        return np.rint(a)
    mag = np.abs(a)
    fl = np.floor(mag)
    # mag - floor(mag) is exact in binary floating point
    return np.copysign(fl + (mag - fl >= 0.5), a)


def to_raw(x, q: QFormat, mode: Rounding = Rounding.HALF_AWAY) -> np.ndarray:
    """Scaled, rounded and saturated integers (int64) for ``x``."""
    a = np.asarray(x, dtype=np.float64)
    if not np.isfinite(a).all():
        raise DomainError("cannot quantize non-finite values")
    r = _round(a * q.scale, mode)
    return np.clip(r, q.raw_min, q.raw_max).astype(np.int64)


def quantize_value(x: float, q: QFormat, mode: Rounding = Rounding.HALF_AWAY) -> float:
    return float(to_raw(x, q, mode)) / q.scale


@dataclass(frozen=True)
class FixedTensor:
    qformat: QFormat
    raw: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.raw)
        if raw.size and (raw.min() < self.qformat.raw_min or raw.max() > self.qformat.raw_max):
            raise DomainError(f"raw values exceed the range of {self.qformat}")
        object.__setattr__(self, "raw", raw)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.raw.shape


def quantize_tensor(t, q: QFormat, mode: Rounding = Rounding.HALF_AWAY) -> FixedTensor:
    return FixedTensor(q, to_raw(t, q, mode))


def dequantize(t: FixedTensor) -> np.ndarray:
    return np.asarray(t.raw, dtype=np.float64) / t.qformat.scale


def fake_quantize(x, q: QFormat, mode: Rounding = Rounding.HALF_AWAY) -> np.ndarray:
    """Quantize then dequantize, returning float64 values on the ``2**-F`` grid."""
    return to_raw(x, q, mode).astype(np.float64) / q.scale


def accumulator_bits(a: QFormat, b: QFormat, count: int) -> int:
    """Width that holds ``count`` signed products without overflow."""
    return a.total_bits + b.total_bits + max(math.ceil(math.log2(count)), 0) if count > 0 else 1


def accumulator_dtype(bits: int):
    """int64 when the accumulator fits, Python integers (object arrays) otherwise."""
    return np.int64 if bits <= 63 else object


def fixed_mul_acc(window: FixedTensor, kernel: FixedTensor, acc_bits: int | None = None) -> int:
    """Exact integer sum of raw products.

    The result carries ``window.F + kernel.F`` fraction bits. ``acc_bits``
    declares the accumulator width; a width that cannot hold the worst case
    is rejected before any arithmetic happens.
    """
    if window.shape != kernel.shape:
        raise ShapeError(f"window {window.shape} and kernel {kernel.shape} differ")
    need = accumulator_bits(window.qformat, kernel.qformat, window.raw.size)
    if acc_bits is not None and acc_bits < need:
        raise ConfigurationError(
            f"accumulator of {acc_bits} bits cannot hold {window.raw.size} products (needs {need})")
    return sum(int(a) * int(b) for a, b in zip(window.raw.ravel().tolist(),
                                               kernel.raw.ravel().tolist()))


def shift_round(acc, shift: int, mode: Rounding = Rounding.HALF_AWAY):
    """Arithmetic right shift by ``shift`` with rounding; works on ints and int arrays."""
    if shift <= 0:
        return acc * (1 << -shift)
    half = 1 << (shift - 1)
    if mode == Rounding.HALF_EVEN:
        q = acc >> shift
        rem = acc - (q << shift)
        up = (rem > half) | ((rem == half) & ((q & 1) == 1))
        return q + up
    mag = abs(acc)
    r = (mag + half) >> shift
    if isinstance(acc, np.ndarray):
        return np.where(acc < 0, -r, r)
    return -r if acc < 0 else r


def saturate(raw, q: QFormat):
    if isinstance(raw, np.ndarray):
        out = np.clip(raw, q.raw_min, q.raw_max)
        return out.astype(np.int64)
    return min(max(int(raw), q.raw_min), q.raw_max)


def requantize(acc, q: QFormat, acc_fraction_bits: int | None = None,
               mode: Rounding = Rounding.HALF_AWAY):
    """Bring an accumulator back to format ``q``.

    ``acc_fraction_bits`` defaults to ``2 * q.fraction_bits`` (both operands in ``q``).
    """
    if acc_fraction_bits is None:
        acc_fraction_bits = 2 * q.fraction_bits
    return saturate(shift_round(acc, acc_fraction_bits - q.fraction_bits, mode), q)
