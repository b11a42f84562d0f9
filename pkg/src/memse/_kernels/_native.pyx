# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused device-level sampling + matrix-vector kernels (compiled core).

Two entry points:

* noisy_mvm_pair: pulls normals from a numpy BitGenerator through numpy's own
  C distribution code; bit-compatible with the numpy fallback (same stream,
  same values, summation order aside).

* noisy_mvm_pair_fast: inlines a xoshiro256++ generator and a 256-layer
  ziggurat, seeded from two 64-bit keys.  The ziggurat implementation is the
  same algorithm and tables numpy uses; _zig_selftest() replays it against a
  numpy BitGenerator so the tests can assert bit-exact agreement with
  numpy's standard_normal before trusting the fast path.
"""


import numpy as np

cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer, PyCapsule_IsValid
from libc.math cimport exp, fabs, log1p
from libc.stdint cimport uint64_t
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport random_standard_normal_fill

cnp.import_array()

BACKEND = "native"

cdef const char *CAPSULE_NAME = "BitGenerator"


# ---------------------------------------------------------------------------
# ziggurat tables (256 layers, 52-bit mantissa variant)
# ---------------------------------------------------------------------------

from . import _ziggurat_tables

cdef double ZIG_R = _ziggurat_tables.ZIG_R
cdef double ZIG_INV_R = 1.0 / ZIG_R
cdef double ZIG_WI[256]
cdef double ZIG_FI[256]
cdef uint64_t ZIG_KI[256]


def _install_tables():
    cdef int i
    for i in range(256):
        ZIG_KI[i] = <uint64_t> _ziggurat_tables.ZIG_KI[i]
        ZIG_WI[i] = <double> _ziggurat_tables.ZIG_WI[i]
        ZIG_FI[i] = <double> _ziggurat_tables.ZIG_FI[i]


_install_tables()


# ---------------------------------------------------------------------------
# xoshiro256++ (seeded with splitmix64, the reference seeding scheme)
# ---------------------------------------------------------------------------

cdef struct XoshiroState:
    uint64_t s0
    uint64_t s1
    uint64_t s2
    uint64_t s3


cdef inline uint64_t _rotl(uint64_t v, int k) noexcept nogil:
    return (v << k) | (v >> (64 - k))


cdef inline uint64_t _splitmix_next(uint64_t *state) noexcept nogil:
    cdef uint64_t z
    state[0] += <uint64_t> 0x9E3779B97F4A7C15
    z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t> 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * <uint64_t> 0x94D049BB133111EB
    return z ^ (z >> 31)


cdef inline void _xoshiro_seed(XoshiroState *st, uint64_t key0, uint64_t key1) noexcept nogil:
    cdef uint64_t sm = key0
    st.s0 = _splitmix_next(&sm)
    st.s1 = _splitmix_next(&sm)
    sm ^= key1 * <uint64_t> 0x9E3779B97F4A7C15
    st.s2 = _splitmix_next(&sm)
    st.s3 = _splitmix_next(&sm)
    if (st.s0 | st.s1 | st.s2 | st.s3) == 0:
        st.s0 = 1


cdef inline uint64_t _xoshiro_next(XoshiroState *st) noexcept nogil:
    cdef uint64_t result = _rotl(st.s0 + st.s3, 23) + st.s0
    cdef uint64_t t = st.s1 << 17
    st.s2 ^= st.s0
    st.s3 ^= st.s1
    st.s1 ^= st.s2
    st.s0 ^= st.s3
    st.s2 ^= t
    st.s3 = _rotl(st.s3, 45)
    return result


# ---------------------------------------------------------------------------
# ziggurat normal draw; one variant per uint64 source (keep bodies in sync)
# ---------------------------------------------------------------------------

cdef inline double _zig_normal_x(XoshiroState *st) noexcept nogil:
    cdef uint64_t r, rabs
    cdef int idx, sign
    cdef double x, xx, yy
    while True:
        r = _xoshiro_next(st)
        idx = <int> (r & <uint64_t> 0xFF)
        r >>= 8
        sign = <int> (r & <uint64_t> 0x1)
        rabs = (r >> 1) & <uint64_t> 0x000FFFFFFFFFFFFF
        x = rabs * ZIG_WI[idx]
        x = (1.0 - 2.0 * sign) * x  # branchless sign
        if rabs < ZIG_KI[idx]:
            return x
        if idx == 0:
            while True:
                xx = -ZIG_INV_R * log1p(-((_xoshiro_next(st) >> 11) * (1.0 / 9007199254740992.0)))
                yy = -log1p(-((_xoshiro_next(st) >> 11) * (1.0 / 9007199254740992.0)))
                if yy + yy > xx * xx:
                    if (rabs >> 8) & <uint64_t> 0x1:
                        return -(ZIG_R + xx)
                    return ZIG_R + xx
        else:
            if (ZIG_FI[idx - 1] - ZIG_FI[idx]) * ((_xoshiro_next(st) >> 11) * (1.0 / 9007199254740992.0)) + ZIG_FI[idx] < exp(-0.5 * x * x):
                return x


cdef inline double _zig_normal_bitgen(bitgen_t *rng) noexcept nogil:
    cdef uint64_t r, rabs
    cdef int idx, sign
    cdef double x, xx, yy
    while True:
        r = rng.next_uint64(rng.state)
        idx = <int> (r & <uint64_t> 0xFF)
        r >>= 8
        sign = <int> (r & <uint64_t> 0x1)
        rabs = (r >> 1) & <uint64_t> 0x000FFFFFFFFFFFFF
        x = rabs * ZIG_WI[idx]
        x = (1.0 - 2.0 * sign) * x  # branchless sign
        if rabs < ZIG_KI[idx]:
            return x
        if idx == 0:
            while True:
                xx = -ZIG_INV_R * log1p(-rng.next_double(rng.state))
                yy = -log1p(-rng.next_double(rng.state))
                if yy + yy > xx * xx:
                    if (rabs >> 8) & <uint64_t> 0x1:
                        return -(ZIG_R + xx)
                    return ZIG_R + xx
        else:
            if (ZIG_FI[idx - 1] - ZIG_FI[idx]) * rng.next_double(rng.state) + ZIG_FI[idx] < exp(-0.5 * x * x):
                return x


cdef bitgen_t *_get_bitgen(object bit_generator) except NULL:
    capsule = bit_generator.capsule
    if not PyCapsule_IsValid(capsule, CAPSULE_NAME):
        raise ValueError("invalid BitGenerator capsule")
    return <bitgen_t *> PyCapsule_GetPointer(capsule, CAPSULE_NAME)


def _zig_selftest(Py_ssize_t n, object bit_generator):
    """Draw n normals with this module's ziggurat fed by a numpy BitGenerator.

    Must agree bit for bit with Generator(bit_generator).standard_normal(n)
    started from the same state; the tests assert exactly that.
    """
    cdef bitgen_t *rng = _get_bitgen(bit_generator)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] out = np.empty(n, dtype=np.float64)
    cdef double[::1] mv = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            mv[i] = _zig_normal_bitgen(rng)
    return out


def _standard_normals(Py_ssize_t n, uint64_t key0, uint64_t key1):
    """n normals from the keyed fast generator (for distribution tests)."""
    cdef XoshiroState st
    _xoshiro_seed(&st, key0, key1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] out = np.empty(n, dtype=np.float64)
    cdef double[::1] mv = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            mv[i] = _zig_normal_x(&st)
    return out


# ---------------------------------------------------------------------------
# fused noisy matrix-vector kernels
# ---------------------------------------------------------------------------


cdef double _plane(
    bitgen_t *rng,
    const double[:, ::1] g,
    const double[::1] x,
    const double[::1] x2,
    double sigma,
    bint clip,
    double g_max,
    bint want_power,
    double[::1] out,
    double[::1] buf,
) noexcept nogil:
    cdef Py_ssize_t m = g.shape[0]
    cdef Py_ssize_t l = g.shape[1]
    cdef Py_ssize_t j, i
    cdef double acc, s, p_mem = 0.0
    for j in range(m):
        random_standard_normal_fill(rng, l, &buf[0])
        acc = 0.0
        if want_power:
            for i in range(l):
                s = g[j, i] + sigma * buf[i]
                if clip:
                    if s < 0.0:
                        s = 0.0
                    elif s > g_max:
                        s = g_max
                acc += s * x[i]
                p_mem += fabs(s) * x2[i]
        else:
            for i in range(l):
                s = g[j, i] + sigma * buf[i]
                if clip:
                    if s < 0.0:
                        s = 0.0
                    elif s > g_max:
                        s = g_max
                acc += s * x[i]
        out[j] = acc
    return p_mem


cdef double _plane_fast(
    XoshiroState *st,
    const double[:, ::1] g,
    const double[::1] x,
    const double[::1] x2,
    double sigma,
    bint clip,
    double g_max,
    bint want_power,
    double[::1] out,
) noexcept nogil:
    cdef Py_ssize_t m = g.shape[0]
    cdef Py_ssize_t l = g.shape[1]
    cdef Py_ssize_t j, i
    cdef double acc, s, p_mem = 0.0
    for j in range(m):
        acc = 0.0
        if want_power:
            for i in range(l):
                s = g[j, i] + sigma * _zig_normal_x(st)
                if clip:
                    if s < 0.0:
                        s = 0.0
                    elif s > g_max:
                        s = g_max
                acc += s * x[i]
                p_mem += fabs(s) * x2[i]
        else:
            for i in range(l):
                s = g[j, i] + sigma * _zig_normal_x(st)
                if clip:
                    if s < 0.0:
                        s = 0.0
                    elif s > g_max:
                        s = g_max
                acc += s * x[i]
        out[j] = acc
    return p_mem


def noisy_mvm_pair(
    object g_plus,
    object g_minus,
    object x,
    double sigma_plus,
    double sigma_minus,
    object bit_generator,
    bint clip=False,
    double g_max=0.0,
    bint want_power=False,
):
    """One noisy realization of both crossbar halves applied to x.

    Returns (sum_plus, sum_minus, p_mem); see the fallback kernel for the
    definition.  sigma_* must be scalars here.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] gp = np.ascontiguousarray(g_plus, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] gm = np.ascontiguousarray(g_minus, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] xv = np.ascontiguousarray(x, dtype=np.float64)
    if gp.shape[0] != gm.shape[0] or gp.shape[1] != gm.shape[1]:
        raise ValueError("halves must have identical shapes")
    if xv.shape[0] != gp.shape[1]:
        raise ValueError("input length does not match column count")
    cdef bitgen_t *rng = _get_bitgen(bit_generator)

    cdef Py_ssize_t m = gp.shape[0]
    cdef Py_ssize_t l = gp.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] out_p = np.empty(m, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] out_m = np.empty(m, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] buf = np.empty(l, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] x2 = xv * xv

    cdef const double[:, ::1] gp_mv = gp
    cdef const double[:, ::1] gm_mv = gm
    cdef const double[::1] x_mv = xv
    cdef const double[::1] x2_mv = x2
    cdef double[::1] out_p_mv = out_p
    cdef double[::1] out_m_mv = out_m
    cdef double[::1] buf_mv = buf

    cdef double p_mem = 0.0
    with nogil:
        p_mem = _plane(rng, gp_mv, x_mv, x2_mv, sigma_plus, clip, g_max, want_power, out_p_mv, buf_mv)
        p_mem += _plane(rng, gm_mv, x_mv, x2_mv, sigma_minus, clip, g_max, want_power, out_m_mv, buf_mv)
    return out_p, out_m, p_mem


def noisy_mvm_pair_fast(
    object g_plus,
    object g_minus,
    object x,
    double sigma_plus,
    double sigma_minus,
    uint64_t key0,
    uint64_t key1,
    bint clip=False,
    double g_max=0.0,
    bint want_power=False,
):
    """Keyed variant: own inlined generator, no Python-side RNG objects.

    Statistically equivalent to noisy_mvm_pair but not stream-compatible
    with it (or with the numpy fallback's keyed variant).
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] gp = np.ascontiguousarray(g_plus, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] gm = np.ascontiguousarray(g_minus, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] xv = np.ascontiguousarray(x, dtype=np.float64)
    if gp.shape[0] != gm.shape[0] or gp.shape[1] != gm.shape[1]:
        raise ValueError("halves must have identical shapes")
    if xv.shape[0] != gp.shape[1]:
        raise ValueError("input length does not match column count")

    cdef Py_ssize_t m = gp.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] out_p = np.empty(m, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] out_m = np.empty(m, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] x2 = xv * xv

    cdef const double[:, ::1] gp_mv = gp
    cdef const double[:, ::1] gm_mv = gm
    cdef const double[::1] x_mv = xv
    cdef const double[::1] x2_mv = x2
    cdef double[::1] out_p_mv = out_p
    cdef double[::1] out_m_mv = out_m

    cdef XoshiroState st
    _xoshiro_seed(&st, key0, key1)
    cdef double p_mem = 0.0
    with nogil:
        p_mem = _plane_fast(&st, gp_mv, x_mv, x2_mv, sigma_plus, clip, g_max, want_power, out_p_mv)
        p_mem += _plane_fast(&st, gm_mv, x_mv, x2_mv, sigma_minus, clip, g_max, want_power, out_m_mv)
    return out_p, out_m, p_mem
