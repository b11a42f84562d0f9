"""Ground-truth simulator: noisy quantized crossbar inference, trial by trial.

Two sampling strategies are provided:

* "device" draws an independent programming error for every memristor of
  every +/- pair (including the zero-valued device of each pair), exactly as
  the hardware model prescribes.  It supports conductance clipping and
  records per-device memristor power.  This is the faithful but slow path
  and the default.

* "column" exploits that, conditional on a stage input, each raw column sum
  is Gaussian with variance sigma**2 times the input energy, independently
  across columns and planes.  Sampling at the column level therefore yields
  output realizations with exactly the same joint distribution as "device"
  whenever clipping is off, at a fraction of the cost.  Memristor power is
  not observable at this level, so simulated power is only reported by the
  device path.

Each (trial, input) pair derives its own random stream from the master seed,
so estimates are bit-identical for a fixed seed at any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .crossbar import device_sigmas
from .moments import PreparedNetwork, prepare_network
from .netmodel import ActivationStage, LinearStage, LoweredNetwork, apply_activation
from .util import resolve_threads

COLUMN_BLOCK = 512  # trials per column-mode block; fixed so streams never depend on worker count
DEVICE_CHUNK = 32  # (trial, input) pairs per device-mode task

_DOMAIN_DEVICE = 0
_DOMAIN_COLUMN = 1
_DOMAIN_FROZEN = 2


@dataclass(frozen=True)
class TrialPlan:
    """How to run a simulation campaign."""

    trials: int
    master_seed: int
    clip_conductances: bool = False
    record_moments: bool = False
    record_power: bool = True
    mode: str = "device"
    freeze_per_trial: bool = False

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.mode not in ("device", "column"):
            raise ValueError(f"mode must be 'device' or 'column', got {self.mode!r}")
        if self.mode == "column" and self.clip_conductances:
            raise ValueError("conductance clipping requires device mode")
        if self.mode == "column" and self.freeze_per_trial:
            raise ValueError("freeze_per_trial requires device mode")


@dataclass(eq=False)
class McEstimate:
    """Empirical results of a simulation campaign."""

    mse: np.ndarray  # (B, M) per-input per-output
    se: np.ndarray | None  # (B, M) standard errors of mse
    per_input_mean: np.ndarray  # (B,)
    per_input_max: np.ndarray  # (B,)
    mean_mse: float  # mean over inputs of per-output mean
    max_mse: float  # mean over inputs of per-output max
    power_mean: np.ndarray | None  # (B,)
    power_se: np.ndarray | None
    emp_mean: np.ndarray | None  # (B, M) when record_moments
    emp_cov: np.ndarray | None  # (B, M, M)
    se_mean: np.ndarray | None
    se_cov: np.ndarray | None
    trials: int
    master_seed: int
    mode: str
    clip_conductances: bool
    freeze_per_trial: bool


def scaled_reference(prep: PreparedNetwork, x: np.ndarray) -> np.ndarray:
    """Noise-free, quantization-free output of the analog implementation
    (pure weights, readout gain applied)."""
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    k = 0
    for stage in prep.net.stages:
        if isinstance(stage, LinearStage):
            v = prep.configs[k].r * np.asarray(stage.matrix @ v).reshape(-1)
            if stage.bias is not None:
                v = v + stage.bias
            k += 1
        elif isinstance(stage, ActivationStage):
            v = apply_activation(stage.kind, v)
        else:
            v = np.asarray(stage.matrix @ v).reshape(-1)
    return v


# ---------------------------------------------------------------------------
# device-level path
# ---------------------------------------------------------------------------


def _uses_sigma_table(prep: PreparedNetwork) -> bool:
    return any(cfg.sigma_table is not None for cfg in prep.configs)


def _device_trial(
    prep: PreparedNetwork, x: np.ndarray, seed_seq: np.random.SeedSequence, clip: bool, want_power: bool
) -> tuple[np.ndarray, float]:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    p_total = 0.0
    k = 0
    table = _uses_sigma_table(prep)
    if table:
        bit_generator = np.random.PCG64(seed_seq)
        keys = None
    else:
        keys = seed_seq.generate_state(2 * len(prep.pairs), np.uint64)
    for stage in prep.net.stages:
        if isinstance(stage, LinearStage):
            pair = prep.pairs[k]
            cfg = prep.configs[k]
            gp, gm = prep.dense_halves(k)
            sp, sm = device_sigmas(pair, cfg.sigma_v)
            if table:
                sum_p, sum_m, p_mem = _kernels.noisy_mvm_pair(
                    gp, gm, v, sp, sm, bit_generator, clip, cfg.g_max, want_power
                )
            else:
                sum_p, sum_m, p_mem = _kernels.noisy_mvm_pair_fast(
                    gp, gm, v, sp, sm, keys[2 * k], keys[2 * k + 1], clip, cfg.g_max, want_power
                )
            if want_power:
                p_total += p_mem + float(sum_p @ sum_p) + float(sum_m @ sum_m)
            v = (cfg.r / pair.c) * (sum_p - sum_m)
            if stage.bias is not None:
                v = v + stage.bias
            k += 1
        elif isinstance(stage, ActivationStage):
            v = apply_activation(stage.kind, v)
        else:
            v = np.asarray(stage.matrix @ v).reshape(-1)
    return v, p_total


def _frozen_trial(
    prep: PreparedNetwork, xs: np.ndarray, gen: np.random.Generator, clip: bool, want_power: bool
) -> tuple[np.ndarray, np.ndarray]:
    """One conductance draw shared by the whole batch ("program once, run batch").

    xs is (B, L_in); returns (outputs (B, M_out), power (B,)).
    """
    v = np.ascontiguousarray(xs.T, dtype=np.float64)  # (L, B)
    power = np.zeros(xs.shape[0])
    k = 0
    for stage in prep.net.stages:
        if isinstance(stage, LinearStage):
            pair = prep.pairs[k]
            cfg = prep.configs[k]
            gp, gm = prep.dense_halves(k)
            sp, sm = device_sigmas(pair, cfg.sigma_v)
            rp = gp + gen.standard_normal(gp.shape) * sp
            rm = gm + gen.standard_normal(gm.shape) * sm
            if clip:
                np.clip(rp, 0.0, cfg.g_max, out=rp)
                np.clip(rm, 0.0, cfg.g_max, out=rm)
            sum_p = rp @ v
            sum_m = rm @ v
            if want_power:
                col_abs = np.abs(rp).sum(axis=0) + np.abs(rm).sum(axis=0)
                power += col_abs @ (v * v)
                power += np.sum(sum_p * sum_p, axis=0) + np.sum(sum_m * sum_m, axis=0)
            v = (cfg.r / pair.c) * (sum_p - sum_m)
            if stage.bias is not None:
                v = v + stage.bias[:, None]
            k += 1
        elif isinstance(stage, ActivationStage):
            v = apply_activation(stage.kind, v)
        else:
            v = stage.matrix @ v
    return v.T.copy(), power


# ---------------------------------------------------------------------------
# column-level path
# ---------------------------------------------------------------------------


def _column_s2(prep: PreparedNetwork, k: int) -> np.ndarray | None:
    """Dense per-device combined noise variance matrix, only for sigma tables."""
    key = ("s2", k)
    if key not in prep._dense_cache:
        pair = prep.pairs[k]
        cfg = prep.configs[k]
        if cfg.sigma_table is None:
            prep._dense_cache[key] = None
        else:
            sp, sm = device_sigmas(pair, cfg.sigma_v)
            prep._dense_cache[key] = sp * sp + sm * sm
    return prep._dense_cache[key]


def _column_block(
    prep: PreparedNetwork, x: np.ndarray, gen: np.random.Generator, n_trials: int
) -> np.ndarray:
    """n_trials independent output realizations, sampled at column level.

    Exactly distribution-equivalent to the device path with clipping off:
    conditional on the stage input, raw column sums are Gaussian with
    variance sigma_plus**2 + sigma_minus**2 times the input energy,
    independent across columns.
    """
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    mat: np.ndarray | None = None  # (M, T) once stochastic
    k = 0
    for stage in prep.net.stages:
        if isinstance(stage, LinearStage):
            pair = prep.pairs[k]
            cfg = prep.configs[k]
            diff = pair.g_plus - pair.g_minus
            s2 = _column_s2(prep, k)
            if mat is None:
                base = np.asarray(diff @ v).reshape(-1)[:, None]  # (M, 1)
                if s2 is None:
                    var = 2.0 * cfg.sigma_v**2 * float(v @ v)
                    std = np.full((base.shape[0], 1), np.sqrt(var))
                else:
                    std = np.sqrt(s2 @ (v * v))[:, None]
                noise = gen.standard_normal((base.shape[0], n_trials))
                raw = base + noise * std
            else:
                base = diff @ mat  # (M, T)
                if s2 is None:
                    var = 2.0 * cfg.sigma_v**2 * np.sum(mat * mat, axis=0)  # (T,)
                    std = np.sqrt(var)[None, :]
                else:
                    std = np.sqrt(s2 @ (mat * mat))
                raw = base + gen.standard_normal(base.shape) * std
            mat = (cfg.r / pair.c) * raw
            if stage.bias is not None:
                mat = mat + stage.bias[:, None]
            k += 1
        elif isinstance(stage, ActivationStage):
            if mat is None:
                v = apply_activation(stage.kind, v)
            else:
                mat = apply_activation(stage.kind, mat)
        else:
            if mat is None:
                v = np.asarray(stage.matrix @ v).reshape(-1)
            else:
                mat = stage.matrix @ mat
    assert mat is not None, "network has no linear stage"
    return mat  # (M_out, n_trials)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def noisy_forward(
    net: LoweredNetwork,
    configs,
    x: np.ndarray,
    seed: int,
    quantize: bool = True,
    clip: bool = False,
    mode: str = "device",
    prepared: PreparedNetwork | None = None,
) -> np.ndarray:
    """One noisy inference: fresh conductances per linear stage, then the
    exact activation and pooling chain.  Deterministic given the seed."""
    prep = prepared if prepared is not None else prepare_network(net, configs, quantize=quantize)
    if mode == "device":
        ss = np.random.SeedSequence([_DOMAIN_DEVICE, int(seed)])
        out, _ = _device_trial(prep, x, ss, clip, want_power=False)
        return out
    if mode == "column":
        if clip:
            raise ValueError("conductance clipping requires device mode")
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([_DOMAIN_COLUMN, int(seed)])))
        return _column_block(prep, x, gen, 1)[:, 0]
    raise ValueError(f"mode must be 'device' or 'column', got {mode!r}")


def _run_campaign(
    prep: PreparedNetwork, inputs: np.ndarray, plan: TrialPlan, threads: int | None
) -> tuple[np.ndarray, np.ndarray | None]:
    """All trial outputs: (B, T, M_out) plus (B, T) power (device mode only)."""
    b = inputs.shape[0]
    t = plan.trials
    xs = inputs.reshape(b, -1)
    m_out = scaled_reference(prep, xs[0]).size
    outs = np.empty((b, t, m_out))
    want_power = plan.record_power and plan.mode == "device"
    power = np.empty((b, t)) if want_power else None
    n_workers = resolve_threads(threads)
    seed = int(plan.master_seed)

    # warm the dense-halves cache serially; tasks then share it read-only
    if plan.mode == "device":
        for k in range(len(prep.pairs)):
            prep.dense_halves(k)

    if plan.mode == "device" and plan.freeze_per_trial:
        def run_trial(ti: int):
            gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _DOMAIN_FROZEN, ti])))
            out, pw = _frozen_trial(prep, xs, gen, plan.clip_conductances, want_power)
            outs[:, ti, :] = out
            if want_power:
                power[:, ti] = pw

        _parallel_for(run_trial, range(t), n_workers)
    elif plan.mode == "device":
        pairs_flat = [(bi, ti) for bi in range(b) for ti in range(t)]
        chunks = [pairs_flat[i : i + DEVICE_CHUNK] for i in range(0, len(pairs_flat), DEVICE_CHUNK)]

        def run_chunk(chunk):
            for bi, ti in chunk:
                ss = np.random.SeedSequence([seed, _DOMAIN_DEVICE, bi, ti])
                out, pw = _device_trial(prep, xs[bi], ss, plan.clip_conductances, want_power)
                outs[bi, ti, :] = out
                if want_power:
                    power[bi, ti] = pw

        _parallel_for(run_chunk, chunks, n_workers)
    else:
        blocks = [
            (bi, blk, min(COLUMN_BLOCK, t - blk * COLUMN_BLOCK))
            for bi in range(b)
            for blk in range((t + COLUMN_BLOCK - 1) // COLUMN_BLOCK)
        ]

        def run_block(task):
            bi, blk, n = task
            gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _DOMAIN_COLUMN, bi, blk])))
            res = _column_block(prep, xs[bi], gen, n)
            outs[bi, blk * COLUMN_BLOCK : blk * COLUMN_BLOCK + n, :] = res.T

        _parallel_for(run_block, blocks, n_workers)
    return outs, power


def _parallel_for(fn, tasks, n_workers: int) -> None:
    tasks = list(tasks)
    if n_workers <= 1 or len(tasks) <= 1:
        for task in tasks:
            fn(task)
        return
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        list(pool.map(fn, tasks))


def estimate(
    net: LoweredNetwork,
    configs,
    inputs: np.ndarray,
    plan: TrialPlan,
    threads: int | None = None,
    quantize: bool = True,
    prepared: PreparedNetwork | None = None,
) -> McEstimate:
    """Empirical MSE (and power, moments) over independent conductance draws.

    Per-trial streams derive from (master_seed, input index, trial index), so
    the estimate is reproducible bit for bit at any worker count.
    """
    if plan.trials < 2:
        raise ValueError("estimate requires at least 2 trials for standard errors")
    prep = prepared if prepared is not None else prepare_network(net, configs, quantize=quantize)
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    b = inputs.shape[0]
    xs = inputs.reshape(b, -1)

    outs, power = _run_campaign(prep, inputs, plan, threads)
    t = plan.trials

    refs = np.stack([scaled_reference(prep, xs[bi]) for bi in range(b)])  # (B, M)
    sq = (outs - refs[:, None, :]) ** 2  # (B, T, M)
    mse = sq.mean(axis=1)
    se = sq.std(axis=1, ddof=1) / np.sqrt(t)
    per_input_mean = mse.mean(axis=1)
    per_input_max = mse.max(axis=1)

    power_mean = power_se = None
    if power is not None:
        power_mean = power.mean(axis=1)
        power_se = power.std(axis=1, ddof=1) / np.sqrt(t)

    emp_mean = emp_cov = se_mean = se_cov = None
    if plan.record_moments:
        emp_mean = outs.mean(axis=1)
        se_mean = outs.std(axis=1, ddof=1) / np.sqrt(t)
        centered = outs - emp_mean[:, None, :]
        prods = centered[:, :, :, None] * centered[:, :, None, :]  # (B, T, M, M)
        emp_cov = prods.sum(axis=1) / (t - 1)
        se_cov = prods.std(axis=1, ddof=1) / np.sqrt(t)

    return McEstimate(
        mse=mse,
        se=se,
        per_input_mean=per_input_mean,
        per_input_max=per_input_max,
        mean_mse=float(per_input_mean.mean()),
        max_mse=float(per_input_max.mean()),
        power_mean=power_mean,
        power_se=power_se,
        emp_mean=emp_mean,
        emp_cov=emp_cov,
        se_mean=se_mean,
        se_cov=se_cov,
        trials=t,
        master_seed=int(plan.master_seed),
        mode=plan.mode,
        clip_conductances=plan.clip_conductances,
        freeze_per_trial=plan.freeze_per_trial,
    )


@dataclass(eq=False)
class AccuracyResult:
    noisy: float
    clean: float


def accuracy(
    net: LoweredNetwork,
    configs,
    inputs: np.ndarray,
    labels: np.ndarray,
    plan: TrialPlan,
    threads: int | None = None,
    quantize: bool = True,
) -> AccuracyResult:
    """Argmax classification rate under noise, against the noise-free rate."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != inputs.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for batch of {inputs.shape[0]}")
    prep = prepare_network(net, configs)
    xs = inputs.reshape(inputs.shape[0], -1)
    outs, _ = _run_campaign(prep, inputs, plan, threads)
    noisy = float((outs.argmax(axis=2) == labels[:, None]).mean())
    refs = np.stack([scaled_reference(prep, x) for x in xs])
    clean = float((refs.argmax(axis=1) == labels).mean())
    return AccuracyResult(noisy=noisy, clean=clean)
