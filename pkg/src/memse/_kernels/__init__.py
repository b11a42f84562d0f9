"""Hot-loop kernels: compiled extension when available, numpy fallback otherwise.

Set MEMSE_KERNEL=fallback (or =native) to force a backend.  Both backends
consume identical random streams; outputs agree up to floating-point
summation order.  Per-level sigma tables (matrix-valued sigma) are always
routed to the fallback, which supports them natively.
"""

from __future__ import annotations

import os

import numpy as np

from . import _fallback

_requested = os.environ.get("MEMSE_KERNEL", "").strip().lower()
if _requested not in ("", "native", "fallback"):
    raise ImportError(f"MEMSE_KERNEL must be 'native' or 'fallback', got {_requested!r}")

_impl = None
if _requested != "fallback":
    try:
        from . import _native as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = None
        if _requested == "native":
            raise
if _impl is None:
    _impl = _fallback

BACKEND: str = _impl.BACKEND


def noisy_mvm_pair(
    g_plus,
    g_minus,
    x,
    sigma_plus,
    sigma_minus,
    bit_generator,
    clip: bool = False,
    g_max: float = 0.0,
    want_power: bool = False,
):
    if isinstance(sigma_plus, np.ndarray) or isinstance(sigma_minus, np.ndarray):
        return _fallback.noisy_mvm_pair(
            g_plus, g_minus, x, sigma_plus, sigma_minus, bit_generator, clip, g_max, want_power
        )
    return _impl.noisy_mvm_pair(
        g_plus, g_minus, x, float(sigma_plus), float(sigma_minus), bit_generator, clip, g_max, want_power
    )


def noisy_mvm_pair_fast(
    g_plus,
    g_minus,
    x,
    sigma_plus,
    sigma_minus,
    key0: int,
    key1: int,
    clip: bool = False,
    g_max: float = 0.0,
    want_power: bool = False,
):
    return _impl.noisy_mvm_pair_fast(
        g_plus, g_minus, x, float(sigma_plus), float(sigma_minus), int(key0), int(key1), clip, g_max, want_power
    )
