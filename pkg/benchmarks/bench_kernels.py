#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-numpy fallback, and the
analytic prediction against the device-level simulator on the small CNN.

    python3 benchmarks/bench_kernels.py [--full]

--full times an actual 200-trial x 64-input device simulation instead of
extrapolating from a subset (slow: tens of minutes on one core).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from helpers import build_reference_cnn, configs_for  # noqa: E402

from memse import _kernels  # noqa: E402
from memse._kernels import _fallback  # noqa: E402
from memse.moments import predict_prepared, prepare_network  # noqa: E402
from memse.montecarlo import TrialPlan, _device_trial, estimate  # noqa: E402
from memse.netmodel import lower  # noqa: E402


def bench(fn, repeat=5):
    fn()  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--full", action="store_true")
    args = parser.parse_args()

    print(f"active kernel backend: {_kernels.BACKEND}")
    rng = np.random.default_rng(0)

    print("\n-- fused noisy matrix-vector kernel (reference, shared numpy stream) --")
    for m, l in ((128, 128), (512, 512), (2048, 3072)):
        gp = np.abs(rng.normal(size=(m, l)))
        gm = np.zeros((m, l))
        x = rng.normal(size=l)
        t_active = bench(lambda: _kernels.noisy_mvm_pair(gp, gm, x, 0.01, 0.01, np.random.PCG64(1)), repeat=3)
        t_fb = bench(lambda: _fallback.noisy_mvm_pair(gp, gm, x, 0.01, 0.01, np.random.PCG64(1)), repeat=3)
        print(f"  {m}x{l}: active {t_active * 1e3:8.2f} ms | fallback {t_fb * 1e3:8.2f} ms | x{t_fb / t_active:.2f}")

    print("\n-- fused noisy matrix-vector kernel (keyed fast path) --")
    for m, l in ((128, 128), (512, 512), (2048, 3072)):
        gp = np.abs(rng.normal(size=(m, l)))
        gm = np.zeros((m, l))
        x = rng.normal(size=l)
        t_active = bench(lambda: _kernels.noisy_mvm_pair_fast(gp, gm, x, 0.01, 0.01, 1, 2), repeat=3)
        t_fb = bench(lambda: _fallback.noisy_mvm_pair_fast(gp, gm, x, 0.01, 0.01, 1, 2), repeat=3)
        print(f"  {m}x{l}: active {t_active * 1e3:8.2f} ms | fallback {t_fb * 1e3:8.2f} ms | x{t_fb / t_active:.2f}")

    print("\n-- small CNN: analytic prediction vs device-level simulation --")
    net = lower(build_reference_cnn("small", seed=61))
    cfgs = configs_for(net, sigma_v=0.01)
    prep = prepare_network(net, cfgs)
    batch = np.random.default_rng(62).random((64, 3, 32, 32))
    xs = batch.reshape(64, -1)

    t0 = time.perf_counter()
    for x in xs:
        predict_prepared(prep, x)
    t_analytic = time.perf_counter() - t0
    print(f"  analytic prediction, batch 64: {t_analytic:.2f} s")

    for k in range(len(prep.pairs)):
        prep.dense_halves(k)
    if args.full:
        t0 = time.perf_counter()
        estimate(net, cfgs, batch, TrialPlan(trials=200, master_seed=63, record_power=False), prepared=prep)
        t_mc = time.perf_counter() - t0
        print(f"  device simulation, 200 trials x 64 inputs (measured): {t_mc:.1f} s")
    else:
        _device_trial(prep, xs[0], np.random.SeedSequence([0]), False, False)
        t0 = time.perf_counter()
        n_sub = 2
        for ti in range(n_sub):
            for bi in range(64):
                _device_trial(prep, xs[bi], np.random.SeedSequence([63, 0, bi, ti]), False, False)
        t_mc = (time.perf_counter() - t0) * (200 / n_sub)
        print(f"  device simulation, 200 trials x 64 inputs (extrapolated from {n_sub}x64): {t_mc:.1f} s")
    print(f"  speedup: {t_mc / t_analytic:.0f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
