"""Pure-numpy device-level sampling kernel.

Materializes the full per-device noise matrices; consumes the bit generator
stream in the same order as the compiled kernel (plus plane row-major, then
minus plane), so both backends draw identical noise values per device.
"""

from __future__ import annotations

import numpy as np

BACKEND = "fallback"


def noisy_mvm_pair(
    g_plus: np.ndarray,
    g_minus: np.ndarray,
    x: np.ndarray,
    sigma_plus,
    sigma_minus,
    bit_generator,
    clip: bool = False,
    g_max: float = 0.0,
    want_power: bool = False,
):
    """One noisy realization of both crossbar halves applied to x.

    Returns (sum_plus, sum_minus, p_mem) where sum_s[j] = sum_i (g_s[j,i] +
    sigma_s*eps) * x[i] and p_mem = sum |device| * x**2 over both halves
    (0.0 unless want_power).
    """
    gen = np.random.Generator(bit_generator)
    return _pair_with_generator(gen, g_plus, g_minus, x, sigma_plus, sigma_minus, clip, g_max, want_power)


def noisy_mvm_pair_fast(
    g_plus: np.ndarray,
    g_minus: np.ndarray,
    x: np.ndarray,
    sigma_plus: float,
    sigma_minus: float,
    key0: int,
    key1: int,
    clip: bool = False,
    g_max: float = 0.0,
    want_power: bool = False,
):
    """Keyed variant: fresh generator seeded from the two 64-bit keys.

    Statistically equivalent to the compiled keyed kernel but not
    stream-compatible with it.
    """
    gen = np.random.Generator(np.random.SFC64(np.random.SeedSequence([int(key0), int(key1)])))
    return _pair_with_generator(gen, g_plus, g_minus, x, sigma_plus, sigma_minus, clip, g_max, want_power)


def _pair_with_generator(gen, g_plus, g_minus, x, sigma_plus, sigma_minus, clip, g_max, want_power):
    x2 = x * x if want_power else None
    sums = []
    p_mem = 0.0
    for g, sig in ((g_plus, sigma_plus), (g_minus, sigma_minus)):
        sample = g + gen.standard_normal(g.shape) * sig
        if clip:
            np.clip(sample, 0.0, g_max, out=sample)
        sums.append(sample @ x)
        if want_power:
            p_mem += float(np.sum(np.abs(sample) @ x2))
    return sums[0], sums[1], p_mem
