"""
What one flipped bit does to a bf16 value
=========================================
"""

# %%
import numpy as np

from kvguard import bf16

v = bf16.encode(0.8125)
print(f"0.8125 is stored as {v:#06x}")

# %%
# Flip each position in turn and look at the damage.
for p in range(15, -1, -1):
    field = bf16.classify_bit(p)
    after = bf16.flip_bit(v, p)
    print(f"bit {p:2d} ({field.symbol:>3}): {bf16.decode(after):>14.6g}  delta {bf16.perturbation(v, p):+.6g}")

# %%
# The exponent MSB is the dangerous one.  A value in [1, 2) has exponent
# field 0x7F, so setting its top bit produces an all-ones exponent: inf when
# the mantissa is zero, NaN otherwise.
for x in (1.0, 1.5, 0.75):
    print(x, "->", bf16.decode(bf16.flip_bit(bf16.encode(x), 14)))

# %%
# How often is each bit position catastrophic across all finite patterns?
bits = np.arange(0x10000, dtype=np.uint16)
finite = np.array([bf16.is_finite_pattern(int(b)) for b in bits])
for p in (0, 6, 7, 13, 14, 15):
    d = bf16.perturbation_array(bits[finite], p)
    print(f"bit {p:2d}: non-finite outcome in {np.mean(~np.isfinite(d)):.2%} of patterns")
