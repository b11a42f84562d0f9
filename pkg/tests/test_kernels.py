import numpy as np
import pytest

from memse import _kernels
from memse._kernels import _fallback

native = pytest.importorskip("memse._kernels._native") if _kernels.BACKEND == "native" else None


def _case(seed=0, m=7, l=9, positive=True):
    rng = np.random.default_rng(seed)
    gp = np.abs(rng.normal(size=(m, l)))
    gm = np.where(rng.random((m, l)) < 0.4, np.abs(rng.normal(size=(m, l))), 0.0)
    x = rng.normal(size=l)
    return gp, gm, x


@pytest.mark.skipif(_kernels.BACKEND != "native", reason="compiled kernel not built")
def test_ziggurat_bit_exact_against_numpy():
    for seed in (0, 42, 2024):
        mine = native._zig_selftest(400_000, np.random.PCG64(seed))
        ref = np.random.Generator(np.random.PCG64(seed)).standard_normal(400_000)
        assert np.array_equal(mine, ref)


@pytest.mark.skipif(_kernels.BACKEND != "native", reason="compiled kernel not built")
def test_native_matches_fallback_same_stream():
    gp, gm, x = _case()
    for clip, power in ((False, False), (False, True), (True, True)):
        a = native.noisy_mvm_pair(gp, gm, x, 0.2, 0.2, np.random.PCG64(7), clip, 1.0, power)
        b = _fallback.noisy_mvm_pair(gp, gm, x, 0.2, 0.2, np.random.PCG64(7), clip, 1.0, power)
        np.testing.assert_allclose(a[0], b[0], rtol=1e-10)
        np.testing.assert_allclose(a[1], b[1], rtol=1e-10)
        assert a[2] == pytest.approx(b[2], rel=1e-10)


def test_reference_kernel_manual_check():
    gp, gm, x = _case(seed=5)
    bg = np.random.PCG64(11)
    sp, sm, pm = _kernels.noisy_mvm_pair(gp, gm, x, 0.1, 0.1, bg, False, 0.0, True)
    gen = np.random.Generator(np.random.PCG64(11))
    ep = gen.standard_normal(gp.shape)
    em = gen.standard_normal(gm.shape)
    rp = gp + 0.1 * ep
    rm = gm + 0.1 * em
    np.testing.assert_allclose(sp, rp @ x, rtol=1e-10)
    np.testing.assert_allclose(sm, rm @ x, rtol=1e-10)
    assert pm == pytest.approx(float(np.sum(np.abs(rp) @ (x * x)) + np.sum(np.abs(rm) @ (x * x))), rel=1e-10)


def test_clip_bounds_respected():
    gp = np.zeros((4, 50))
    gm = np.full((4, 50), 1.0)
    x = np.ones(50)
    sp, sm, _ = _kernels.noisy_mvm_pair(gp, gm, x, 2.0, 2.0, np.random.PCG64(3), True, 1.0, False)
    # every clipped sample lies in [0, 1], so column sums lie in [0, 50]
    assert np.all(sp >= 0) and np.all(sp <= 50)
    assert np.all(sm >= 0) and np.all(sm <= 50)


def test_fast_kernel_deterministic_and_mean_consistent():
    gp, gm, x = _case(seed=9, m=16, l=32)
    a = _kernels.noisy_mvm_pair_fast(gp, gm, x, 0.05, 0.05, 123, 456, False, 0.0, True)
    b = _kernels.noisy_mvm_pair_fast(gp, gm, x, 0.05, 0.05, 123, 456, False, 0.0, True)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[2] == b[2]
    c = _kernels.noisy_mvm_pair_fast(gp, gm, x, 0.05, 0.05, 123, 457, False, 0.0, True)
    assert not np.array_equal(a[0], c[0])
    # average of many keyed draws converges to the noiseless product
    acc = np.zeros(16)
    n = 4000
    for k in range(n):
        s = _kernels.noisy_mvm_pair_fast(gp, gm, x, 0.05, 0.05, 77, k, False, 0.0, False)
        acc += s[0] - s[1]
    acc /= n
    want = (gp - gm) @ x
    se = 0.05 * np.sqrt(2 * np.sum(x * x) / n)
    assert np.max(np.abs(acc - want)) < 5 * se


@pytest.mark.skipif(_kernels.BACKEND != "native", reason="compiled kernel not built")
def test_fast_normal_distribution():
    draws = native._standard_normals(4_000_000, 11, 22)
    n = draws.size
    assert abs(draws.mean()) < 4 / np.sqrt(n)
    assert abs(draws.std() - 1.0) < 4 / np.sqrt(2 * n)
    skew = np.mean(draws**3)
    kurt = np.mean(draws**4)
    assert abs(skew) < 4 * np.sqrt(15.0 / n)
    assert abs(kurt - 3.0) < 4 * np.sqrt(96.0 / n)
    # tail mass beyond the ziggurat's base edge
    p_tail = np.mean(np.abs(draws) > 3.6541528853610088)
    from scipy.stats import norm

    want = 2 * norm.cdf(-3.6541528853610088)
    assert p_tail == pytest.approx(want, rel=0.15)
    # uniformity of the CDF transform (coarse chi-square, deterministic seed)
    u = norm.cdf(draws[:1_000_000])
    counts, _ = np.histogram(u, bins=50, range=(0, 1))
    chi2 = float(np.sum((counts - 20_000.0) ** 2 / 20_000.0))
    # 49 dof: mean 49, sd ~9.9; generous deterministic bound
    assert chi2 < 120.0


def test_sigma_matrix_routed_to_fallback():
    gp, gm, x = _case(seed=13, m=3, l=4)
    sig = np.full((3, 4), 0.1)
    a = _kernels.noisy_mvm_pair(gp, gm, x, sig, sig, np.random.PCG64(5), False, 0.0, True)
    b = _fallback.noisy_mvm_pair(gp, gm, x, 0.1, 0.1, np.random.PCG64(5), False, 0.0, True)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
    assert a[2] == pytest.approx(b[2], rel=1e-12)
