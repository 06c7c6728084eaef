"""Software bfloat16 codec and single-bit fault model.

A pattern is a plain ``int`` in ``[0, 0xFFFF]``: bit 15 is the sign, bits
14..7 the biased exponent, bits 6..0 the mantissa.  Array helpers work on
``numpy.uint16`` buffers and are what the KV store uses on the hot path.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

SIGN_MASK = 0x8000
EXP_MASK = 0x7F80
MANT_MASK = 0x007F
EXP_BIAS = 127
MANT_BITS = 7

POS_INF = 0x7F80
NEG_INF = 0xFF80
QUIET_NAN = 0x7FC0


class FieldKind(enum.Enum):
    SIGN = "sign"
    EXPONENT = "exponent"
    MANTISSA = "mantissa"


@dataclass(frozen=True)
class BitField:
    """Semantic role of one bit position.

    ``weight_exponent`` is ``k`` in the value weight ``2**k`` of the bit
    within its field (``E7`` weighs ``2**7`` in the biased exponent, ``M0``
    weighs ``2**-7`` in the significand).  The sign bit has no weight.
    """

    kind: FieldKind
    index_within_field: int
    weight_exponent: int | None

    @property
    def symbol(self) -> str:
        if self.kind is FieldKind.SIGN:
            return "s"
        prefix = "E" if self.kind is FieldKind.EXPONENT else "M"
        return f"{prefix}{self.index_within_field}"


def _check_position(p: int) -> None:
    if not 0 <= p <= 15:
        raise ValueError(f"bit position must be in [0, 15], got {p}")


def _check_pattern(b: int) -> None:
    if not 0 <= b <= 0xFFFF:
        raise ValueError(f"bf16 pattern must fit in 16 bits, got {b:#x}")


def encode(x: float) -> int:
    """Round a real to the nearest bfloat16 pattern (ties to even).

    Rounds directly from binary64, so there is no double rounding through
    binary32.  Overflow saturates to infinity and every NaN maps to 0x7FC0.
    """
    if math.isnan(x):
        return QUIET_NAN
    sign = SIGN_MASK if math.copysign(1.0, x) < 0 else 0
    a = abs(x)
    if math.isinf(a):
        return sign | POS_INF
    if a == 0.0:
        return sign
    _, e = math.frexp(a)
    exp = e - 1  # a in [2**exp, 2**(exp + 1))
    if exp >= 1 - EXP_BIAS:
        # round() on a float is exact and breaks ties to even
        q = round(math.ldexp(a, MANT_BITS - exp))  # in [128, 256]
        bits = ((exp + EXP_BIAS) << MANT_BITS) + (q - (1 << MANT_BITS))
    else:
        # subnormal: value = m * 2**-133; m == 128 carries into the
        # smallest normal on its own
        bits = round(math.ldexp(a, EXP_BIAS - 1 + MANT_BITS))
    if bits >= POS_INF:
        return sign | POS_INF
    return sign | bits


def decode(b: int) -> float:
    """Exact real value of a pattern (subnormals, signed zero, inf, NaN)."""
    _check_pattern(b)
    return struct.unpack("<f", struct.pack("<I", b << 16))[0]


def flip_bit(b: int, p: int) -> int:
    _check_pattern(b)
    _check_position(p)
    return b ^ (1 << p)


def classify_bit(p: int) -> BitField:
    _check_position(p)
    if p == 15:
        return BitField(FieldKind.SIGN, 0, None)
    if p >= MANT_BITS:
        j = p - MANT_BITS
        return BitField(FieldKind.EXPONENT, j, j)
    return BitField(FieldKind.MANTISSA, p, p - MANT_BITS)


def is_finite_pattern(b: int) -> bool:
    return (b & EXP_MASK) != EXP_MASK


def _fields(b: int) -> tuple[int, int, int]:
    return b >> 15, (b & EXP_MASK) >> MANT_BITS, b & MANT_MASK


def _value_from_fields(s: int, e: int, m: int) -> float:
    # finite patterns only; ldexp is exact for every bf16 value
    if e == 0:
        mag = math.ldexp(m, 1 - EXP_BIAS - MANT_BITS)
    else:
        mag = math.ldexp((1 << MANT_BITS) | m, e - EXP_BIAS - MANT_BITS)
    return -mag if s else mag


def perturbation(b: int, p: int) -> float:
    """Value change caused by flipping bit ``p`` of a finite pattern.

    Worked out from the field layout rather than by decoding twice:

    * sign: ``-2 v``
    * mantissa bit ``k``: ``+-2**(k - 7 + e)`` with ``e`` the unbiased
      exponent (``-126`` for subnormals)
    * exponent bit: rescale the significand by the new exponent

    Non-finite outcomes come back as the IEEE special itself: ``nan`` when
    the flip produces a NaN pattern, ``+-inf`` when it produces an infinity.
    """
    _check_pattern(b)
    _check_position(p)
    if not is_finite_pattern(b):
        raise ValueError(f"perturbation requires a finite pattern, got {b:#06x}")
    s, e, m = _fields(b)
    v = _value_from_fields(s, e, m)
    if p == 15:
        return -2.0 * v
    if p < MANT_BITS:
        step = math.ldexp(1.0, p - MANT_BITS + max(e, 1) - EXP_BIAS)
        set_now = (m >> p) & 1
        delta = -step if set_now else step
        return -delta if s else delta
    e_new = e ^ (1 << (p - MANT_BITS))
    if e_new == 0xFF:
        if m:
            return math.nan
        return -math.inf if s else math.inf
    return _value_from_fields(s, e_new, m) - v


# --- array helpers -----------------------------------------------------------


def to_float32(bits: np.ndarray) -> np.ndarray:
    """Decode a uint16 array of patterns to float32 (exact)."""
    return (np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


def from_float32(values: np.ndarray) -> np.ndarray:
    """Encode float32 values with round-to-nearest-even; NaN -> 0x7FC0."""
    x = np.ascontiguousarray(values, dtype=np.float32)
    u = x.view(np.uint32)
    bias = np.uint32(0x7FFF) + ((u >> 16) & np.uint32(1))
    out = ((u + bias) >> 16).astype(np.uint16)
    out[np.isnan(x)] = QUIET_NAN
    return out


def perturbation_array(bits: np.ndarray, p: int) -> np.ndarray:
    """Vectorised :func:`perturbation` over a uint16 array, in float64.

    Entries whose input pattern is not finite are returned as NaN; callers
    must mask them out because the precondition does not hold there.
    """
    _check_position(p)
    b = np.asarray(bits, dtype=np.int64)
    s = b >> 15
    e = (b & EXP_MASK) >> MANT_BITS
    m = b & MANT_MASK
    sgn = np.where(s == 1, -1.0, 1.0)

    def value(e_: np.ndarray) -> np.ndarray:
        sig = np.where(e_ == 0, m, m | (1 << MANT_BITS)).astype(np.float64)
        return sgn * np.ldexp(sig, np.maximum(e_, 1) - EXP_BIAS - MANT_BITS)

    finite = e != 0xFF
    v = value(np.where(finite, e, 0))
    if p == 15:
        out = -2.0 * v
    elif p < MANT_BITS:
        step = np.ldexp(1.0, p - MANT_BITS + np.maximum(e, 1) - EXP_BIAS)
        set_now = (m >> p) & 1
        out = sgn * np.where(set_now == 1, -step, step)
    else:
        e_new = e ^ (1 << (p - MANT_BITS))
        with np.errstate(invalid="ignore"):
            out = value(np.where(e_new == 0xFF, 0, e_new)) - v
        special = e_new == 0xFF
        out = np.where(special & (m != 0), np.nan, out)
        out = np.where(special & (m == 0), sgn * np.inf, out)
    return np.where(finite, out, np.nan)
