"""Weight-to-conductance mapping, quantization, and programmed-value sampling.

Signed weights are split into nonnegative halves, scaled by c = G_max / W_max,
and rounded onto the conductance grid {0, delta, ..., N*delta} with
delta = G_max / N (N intervals, N+1 levels, so w = +/-W_max lands exactly on
G_max).  Rounding is nearest, ties to the even multiple.

Quantization is performed in the weight domain (grid step W_max / N), which
makes the weight-domain quantization error exactly independent of G_max at a
fixed level count; the conductance matrices are the integer grid indices
times delta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

Matrix = np.ndarray | sparse.csr_array


@dataclass(frozen=True)
class CrossbarConfig:
    """Per-layer crossbar parameters.

    g_max      upper end of the programmable conductance range (siemens), > 0
    n_levels   number of quantization intervals N; grid step is g_max / N
    sigma_v    std-dev of the programming noise per device (siemens), >= 0
    r          TIA feedback resistance (ohms), > 0
    noise_model  'pair': both devices of the +/- pair carry programming noise,
                 so the effective variance on the signed weight is 2*sigma_v**2;
                 'single': one device's worth of noise (sigma_v**2).
    sigma_table  optional per-level noise std, indexed by grid level 0..N;
                 overrides sigma_v in the analytic model and the simulator.
    """

    g_max: float
    n_levels: int
    sigma_v: float
    r: float = 1.0
    noise_model: str = "pair"
    sigma_table: np.ndarray | None = None

    def __post_init__(self):
        if not self.g_max > 0:
            raise ValueError(f"g_max must be > 0, got {self.g_max}")
        if int(self.n_levels) < 1:
            raise ValueError(f"n_levels must be >= 1, got {self.n_levels}")
        if self.sigma_v < 0:
            raise ValueError(f"sigma_v must be >= 0, got {self.sigma_v}")
        if not self.r > 0:
            raise ValueError(f"r must be > 0, got {self.r}")
        if self.noise_model not in ("pair", "single"):
            raise ValueError(f"noise_model must be 'pair' or 'single', got {self.noise_model!r}")
        if self.sigma_table is not None:
            table = np.asarray(self.sigma_table, dtype=np.float64)
            if table.shape != (self.n_levels + 1,):
                raise ValueError(
                    f"sigma_table must have n_levels+1 = {self.n_levels + 1} entries, got {table.shape}"
                )
            if np.any(table < 0):
                raise ValueError("sigma_table entries must be >= 0")
            object.__setattr__(self, "sigma_table", table)

    @property
    def delta(self) -> float:
        return self.g_max / self.n_levels

    def scale(self, w_max: float) -> float:
        if not w_max > 0:
            raise ValueError(f"w_max must be > 0, got {w_max}")
        return self.g_max / w_max

    @property
    def pair_devices(self) -> int:
        return 2 if self.noise_model == "pair" else 1

    def with_g_max(self, g_max: float) -> "CrossbarConfig":
        return CrossbarConfig(g_max, self.n_levels, self.sigma_v, self.r, self.noise_model, self.sigma_table)


def split_weights(w):
    """Split a signed matrix into nonnegative halves with w = plus - minus."""
    if sparse.issparse(w):
        plus = w.copy()
        plus.data = np.maximum(plus.data, 0.0)
        plus.eliminate_zeros()
        minus = w.copy()
        minus.data = np.maximum(-minus.data, 0.0)
        minus.eliminate_zeros()
        return plus, minus
    w = np.asarray(w, dtype=np.float64)
    return np.maximum(w, 0.0), np.maximum(-w, 0.0)


def _quantize_levels(w_abs, n_levels: int, w_max: float):
    """Nearest grid index in 0..N for nonnegative weight-domain values."""
    if sparse.issparse(w_abs):
        q = w_abs.copy()
        q.data = np.clip(np.round(q.data * (n_levels / w_max)), 0, n_levels)
        return q
    return np.clip(np.round(np.asarray(w_abs) * (n_levels / w_max)), 0, n_levels)


@dataclass(frozen=True, eq=False)
class ConductancePair:
    """Quantized conductance pair for one linear stage.

    g_plus/g_minus are exact multiples of cfg.delta with at most one of the
    two nonzero per cell (before noise).  dq is the weight-domain
    quantization error: (g_plus - g_minus) / c = weights + dq.  The
    weight-domain fields (w_hat = weights + dq, and the quantized halves
    w_half_*) are exact and independent of g_max at fixed n_levels.
    """

    g_plus: Matrix
    g_minus: Matrix
    dq: Matrix
    c: float
    w_max: float
    cfg: CrossbarConfig
    weights: Matrix
    w_hat: Matrix
    w_half_plus: Matrix
    w_half_minus: Matrix
    q_plus: Matrix
    q_minus: Matrix
    quantized: bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.g_plus.shape

    def dense_halves(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense float64 (g_plus, g_minus), for the device-level simulator."""
        gp, gm = self.g_plus, self.g_minus
        if sparse.issparse(gp):
            gp = gp.toarray()
            gm = gm.toarray()
        return np.ascontiguousarray(gp, dtype=np.float64), np.ascontiguousarray(gm, dtype=np.float64)

    def rescaled(self, cfg: CrossbarConfig) -> "ConductancePair":
        """Same quantization, different conductance range (same n_levels).

        The weight-domain content (w_hat, dq, halves) is reused unchanged;
        only the conductance-domain matrices and c are rescaled.
        """
        if cfg.n_levels != self.cfg.n_levels:
            raise ValueError("rescaled() requires an identical level count")
        c = cfg.scale(self.w_max)
        if self.quantized:
            g_plus = _scale_matrix(self.q_plus, cfg.delta)
            g_minus = _scale_matrix(self.q_minus, cfg.delta)
        else:
            g_plus = _scale_matrix(self.w_half_plus, c)
            g_minus = _scale_matrix(self.w_half_minus, c)
        return ConductancePair(
            g_plus, g_minus, self.dq, c, self.w_max, cfg, self.weights,
            self.w_hat, self.w_half_plus, self.w_half_minus, self.q_plus, self.q_minus, self.quantized,
        )


def _scale_matrix(m, factor: float):
    if sparse.issparse(m):
        out = m.copy()
        out.data = out.data * factor
        return out
    return m * factor


def map_and_quantize(w, cfg: CrossbarConfig, w_max: float, quantize: bool = True) -> ConductancePair:
    """Map weights to the quantized +/- conductance pair for one stage.

    Requires max |w| <= w_max.  With quantize=False the grid is bypassed:
    conductances are exactly c*w and dq is zero.
    """
    c = cfg.scale(w_max)
    max_abs = np.max(np.abs(w.data if sparse.issparse(w) else w)) if _nnz(w) else 0.0
    if max_abs > w_max * (1 + 1e-12):
        raise ValueError(f"max |w| = {max_abs} exceeds w_max = {w_max}")
    w_plus, w_minus = split_weights(w)
    if quantize:
        q_plus = _quantize_levels(w_plus, cfg.n_levels, w_max)
        q_minus = _quantize_levels(w_minus, cfg.n_levels, w_max)
        step = w_max / cfg.n_levels
        w_half_plus = _scale_matrix(q_plus, step)
        w_half_minus = _scale_matrix(q_minus, step)
        g_plus = _scale_matrix(q_plus, cfg.delta)
        g_minus = _scale_matrix(q_minus, cfg.delta)
    else:
        q_plus, q_minus = w_plus, w_minus  # placeholder indices, unused
        w_half_plus, w_half_minus = w_plus, w_minus
        g_plus = _scale_matrix(w_plus, c)
        g_minus = _scale_matrix(w_minus, c)
    w_hat = w_half_plus - w_half_minus
    dq = w_hat - w
    if sparse.issparse(w_hat):
        w_hat = sparse.csr_array(w_hat)
        dq = sparse.csr_array(dq)
    return ConductancePair(
        g_plus, g_minus, dq, c, float(w_max), cfg, w,
        w_hat, w_half_plus, w_half_minus, q_plus, q_minus, bool(quantize),
    )


def _nnz(m) -> int:
    return m.nnz if sparse.issparse(m) else int(np.asarray(m).size)


def sample_conductances(pair: ConductancePair, sigma_v: float, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    """One realization of the programmed conductances (dense).

    Every device of both halves receives an independent zero-mean normal
    perturbation; values are not clipped to [0, g_max] (the analytic model
    assumes unclipped noise).  Deterministic for a given rng_seed.
    """
    if sigma_v < 0:
        raise ValueError(f"sigma_v must be >= 0, got {sigma_v}")
    gp, gm = pair.dense_halves()
    if sigma_v == 0 and pair.cfg.sigma_table is None:
        return gp, gm
    rng = np.random.default_rng(rng_seed)
    sp = device_sigmas(pair, sigma_v)
    return gp + rng.standard_normal(gp.shape) * sp[0], gm + rng.standard_normal(gm.shape) * sp[1]


def device_sigmas(pair: ConductancePair, sigma_v: float):
    """Per-device noise std for both halves: scalars, or dense matrices
    when a per-level sigma table is configured."""
    table = pair.cfg.sigma_table
    if table is None:
        return float(sigma_v), float(sigma_v)
    if not pair.quantized:
        raise ValueError("sigma_table requires quantized conductances")
    qp, qm = pair.q_plus, pair.q_minus
    if sparse.issparse(qp):
        qp = qp.toarray()
        qm = qm.toarray()
    return table[qp.astype(np.int64)], table[qm.astype(np.int64)]
