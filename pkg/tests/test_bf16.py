import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import decode_fields, rne_via_binary32

from kvguard import bf16
from kvguard.bf16 import FieldKind

patterns = st.integers(0, 0xFFFF)
positions = st.integers(0, 15)
finite_patterns = patterns.filter(bf16.is_finite_pattern)


def test_encode_known_values():
    assert bf16.encode(1.0) == 0x3F80
    assert bf16.encode(0.0) == 0x0000
    assert bf16.encode(-0.0) == 0x8000
    assert bf16.encode(0.1) == rne_via_binary32(0.1) == 0x3DCD


def test_encode_specials():
    assert bf16.encode(math.inf) == 0x7F80
    assert bf16.encode(-math.inf) == 0xFF80
    assert bf16.encode(math.nan) == 0x7FC0
    assert bf16.encode(1e39) == 0x7F80  # beyond bf16 range saturates to inf


def test_encode_ties_to_even():
    # 1 + 2**-8 sits exactly between 0x3F80 and 0x3F81
    assert bf16.encode(1.0 + 2.0 ** -8) == 0x3F80
    assert bf16.encode(1.0 + 3 * 2.0 ** -8) == 0x3F82


def test_encode_subnormals():
    smallest = 2.0 ** -133
    assert bf16.encode(smallest) == 0x0001
    assert bf16.encode(smallest / 2) == 0x0000  # tie rounds to even zero
    assert bf16.encode(smallest * 0.75) == 0x0001
    assert bf16.decode(bf16.encode(127 * smallest)) == 127 * smallest


def test_decode_known_values():
    assert bf16.decode(0x3F80) == 1.0
    assert bf16.decode(0x7F80) == math.inf
    assert bf16.decode(0xFF80) == -math.inf
    assert math.isnan(bf16.decode(0x7FC0))
    assert math.isnan(bf16.decode(0x7F81))
    assert bf16.decode(0x3F81) == 1.0 + 2.0 ** -7
    assert math.copysign(1.0, bf16.decode(0x8000)) == -1.0


def test_flip_bit_examples():
    assert bf16.flip_bit(0x3F80, 15) == 0xBF80
    assert bf16.decode(0xBF80) == -1.0
    assert bf16.flip_bit(0x3F80, 14) == 0x7F80
    assert bf16.decode(bf16.flip_bit(0x3F80, 14)) == math.inf
    assert bf16.flip_bit(0x3F80, 0) == 0x3F81


@pytest.mark.parametrize("p", [-1, 16])
def test_flip_bit_rejects_bad_position(p):
    with pytest.raises(ValueError):
        bf16.flip_bit(0x3F80, p)


@given(patterns, positions)
def test_flip_bit_involution_and_single_bit(b, p):
    flipped = bf16.flip_bit(b, p)
    assert bin(flipped ^ b).count("1") == 1
    assert bf16.flip_bit(flipped, p) == b


def test_classify_bit_table():
    assert bf16.classify_bit(14) == bf16.BitField(FieldKind.EXPONENT, 7, 7)
    assert bf16.classify_bit(14).symbol == "E7"
    assert bf16.classify_bit(7) == bf16.BitField(FieldKind.EXPONENT, 0, 0)
    assert bf16.classify_bit(0) == bf16.BitField(FieldKind.MANTISSA, 0, -7)
    assert bf16.classify_bit(6).symbol == "M6"
    assert bf16.classify_bit(6).weight_exponent == -1
    assert bf16.classify_bit(15).kind is FieldKind.SIGN


@pytest.mark.parametrize("p", range(16))
def test_classify_bit_field_ranges(p):
    kind = bf16.classify_bit(p).kind
    if p <= 6:
        assert kind is FieldKind.MANTISSA
    elif p <= 14:
        assert kind is FieldKind.EXPONENT
    else:
        assert kind is FieldKind.SIGN


def test_perturbation_examples():
    one = bf16.encode(1.0)
    assert bf16.perturbation(one, 15) == -2.0
    assert bf16.perturbation(one, 14) == math.inf
    assert bf16.perturbation(one, 0) == 2.0 ** -7
    assert math.isnan(bf16.perturbation(0x3FC0, 14))  # mantissa != 0 -> NaN


def test_perturbation_rejects_non_finite():
    with pytest.raises(ValueError):
        bf16.perturbation(0x7F80, 3)


@given(finite_patterns, positions)
def test_perturbation_matches_decode_difference(b, p):
    got = bf16.perturbation(b, p)
    after = bf16.decode(bf16.flip_bit(b, p))
    if math.isnan(after):
        assert math.isnan(got)
    elif math.isinf(after):
        assert got == after
    else:
        assert got == after - bf16.decode(b)


@given(finite_patterns, st.integers(0, 6))
def test_mantissa_flip_magnitude(b, k):
    e = (b >> 7) & 0xFF
    unbiased = max(e, 1) - 127
    assert abs(bf16.perturbation(b, k)) == 2.0 ** (k - 7 + unbiased)


@given(finite_patterns)
def test_sign_flip_magnitude(b):
    assert abs(bf16.perturbation(b, 15)) == 2 * abs(bf16.decode(b))


@given(finite_patterns.filter(lambda b: 0 < (b >> 7) & 0xFF))
def test_hierarchy_mantissa_below_sign_below_exponent_msb(b):
    sign_delta = abs(bf16.perturbation(b, 15))
    for k in range(7):
        assert abs(bf16.perturbation(b, k)) < sign_delta
    v = bf16.decode(b)
    after = bf16.decode(bf16.flip_bit(b, 14))
    if math.isfinite(after):
        ratio = abs(after / v)
        assert ratio in (2.0 ** 128, 2.0 ** -128)


def test_round_trip_all_patterns():
    for b in range(0x10000):
        v = bf16.decode(b)
        if math.isnan(v):
            assert math.isnan(bf16.decode(bf16.encode(v)))
        else:
            assert bf16.encode(v) == b


@given(st.floats(allow_nan=False, allow_infinity=False, min_value=-3e38, max_value=3e38))
def test_round_trip_within_one_ulp(x):
    b = bf16.encode(x)
    if not bf16.is_finite_pattern(b):
        return
    e = max((b >> 7) & 0xFF, 1) - 127
    assert abs(bf16.decode(b) - x) <= 2.0 ** (e - 7)


@given(st.floats(width=32, allow_nan=False))
def test_encode_matches_binary32_rounding_oracle(x):
    assert bf16.encode(x) == rne_via_binary32(x)


def test_array_codec_matches_scalar():
    rng = np.random.default_rng(3)
    raw = rng.integers(0, 2 ** 32, 20000, dtype=np.uint64).astype(np.uint32)
    values = raw.view(np.float32)
    got = bf16.from_float32(values)
    for v, g in zip(values[:4000], got[:4000]):
        expected = bf16.encode(float(v))
        assert int(g) == expected
    all_bits = np.arange(0x10000, dtype=np.uint16)
    decoded = bf16.to_float32(all_bits)
    finite = np.isfinite(decoded)
    assert np.array_equal(bf16.from_float32(decoded[finite]), all_bits[finite])


@pytest.mark.parametrize("p", range(16))
def test_perturbation_array_matches_scalar(p):
    sample = np.arange(0, 0x10000, 97, dtype=np.uint16)
    arr = bf16.perturbation_array(sample, p)
    for b, d in zip(sample, arr):
        if not bf16.is_finite_pattern(int(b)):
            assert math.isnan(d)
            continue
        s = bf16.perturbation(int(b), p)
        assert (math.isnan(s) and math.isnan(d)) or s == d


def test_field_decoder_oracle_agrees_with_decode():
    all_bits = np.arange(0x10000, dtype=np.uint16)
    ref = decode_fields(all_bits)
    for b in range(0, 0x10000, 31):
        v = bf16.decode(b)
        assert (math.isnan(v) and math.isnan(ref[b])) or v == ref[b]
