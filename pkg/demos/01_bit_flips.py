"""
Single bit flips in fp32 and integer parameters
===============================================

A flip of bit 30, the top exponent bit, is what makes small float
weights dangerous. Values below 2 in magnitude have that bit clear, so
setting it multiplies them by 2**128: +-1 becomes +-inf and anything
strictly between 1 and 2 turns into NaN.
"""

import numpy as np

from seubench import flip_bit_f32, flip_bit_int, required_sample_size
from seubench.faults import f32_bits

for x in (0.5, 1.0, -1.0, 1.5, 3.0):
    y = flip_bit_f32(x, 30)
    print(f"{x:>5} {f32_bits(x):08x} -> {f32_bits(y):08x} {y}")

# integers have no special values: the sign bit of an int8 just wraps
print(flip_bit_int(1, 7, 8), flip_bit_int(-1, 31, 32))

###############################################################################
# How often does a weight sit in the NaN-producing range? For He-initialised
# 3x3 kernels with 64 input channels almost never; batch-norm gammas start
# at exactly 1.0 and drift into (1, 2) during training.

rng = np.random.default_rng(0)
w = rng.normal(0, np.sqrt(2 / (9 * 64)), 100_000)
print("kernel fraction in (1,2):", np.mean((np.abs(w) > 1) & (np.abs(w) < 2)))
gamma = rng.normal(1.0, 0.1, 1000)
print("gamma fraction in (1,2):", np.mean((np.abs(gamma) > 1) & (np.abs(gamma) < 2)))

###############################################################################
# Campaign size. The closed form for a 2.5 % margin at 95 % confidence
# gives 1537 injections per group; finite groups need fewer.

for population in (None, 100, 1000, 10**6):
    print(population, required_sample_size(population))
