"""Analytic propagation of first and second moments through lowered stages.

For a linear stage computed on a noisy quantized crossbar, the mean and full
covariance of the rescaled outputs are exact: programming noise enters as an
additive diagonal term proportional to (sigma/c)**2 times the input energy,
quantization as a deterministic weight offset.  Activations use a
second-order Taylor approximation around the pre-activation mean, and
average pooling is linear, so its moments are exact.

Alongside each network state we track the noiseless reference output of the
ideal (unquantized, noise-free) implementation; per-output MSE is
variance + squared mean offset against that reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import expit

from .crossbar import ConductancePair, CrossbarConfig, device_sigmas, map_and_quantize
from .errors import NumericError
from .netmodel import ActivationStage, LinearStage, LoweredNetwork, PoolStage, softplus


@dataclass(eq=False)
class MomentState:
    """Mean vector, full covariance, and noiseless reference of one stage output.

    cov is None while the state is exactly deterministic (zero covariance);
    shape is (channels, H, W) metadata, or (M,) once flattened.
    """

    mean: np.ndarray
    cov: np.ndarray | None
    ref: np.ndarray
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return self.mean.size

    def cov_dense(self) -> np.ndarray:
        if self.cov is None:
            return np.zeros((self.size, self.size))
        return self.cov

    def var(self) -> np.ndarray:
        if self.cov is None:
            return np.zeros(self.size)
        return np.diag(self.cov).copy()

    def check(self, psd_tol: float = 1e-8) -> None:
        """Validate dimensional consistency, symmetry, and PSD within tolerance."""
        if self.mean.shape != self.ref.shape:
            raise ValueError("mean/ref dimension mismatch")
        if self.cov is not None:
            m = self.mean.size
            if self.cov.shape != (m, m):
                raise ValueError("cov dimension mismatch")
            if not np.allclose(self.cov, self.cov.T, atol=psd_tol * max(1.0, np.trace(self.cov))):
                raise ValueError("cov not symmetric")
            w = np.linalg.eigvalsh(0.5 * (self.cov + self.cov.T))
            floor = -psd_tol * max(np.trace(self.cov), 1e-300)
            if w.min() < floor:
                raise ValueError(f"cov not PSD within tolerance: min eigenvalue {w.min()}")

    @staticmethod
    def from_input(x: np.ndarray, shape: tuple[int, ...]) -> "MomentState":
        v = np.asarray(x, dtype=np.float64).reshape(-1)
        return MomentState(v.copy(), None, v.copy(), tuple(shape))


@dataclass(eq=False)
class HalfMoments:
    """Moments of the unscaled crossbar half outputs (before subtraction and rescale)."""

    mu_plus: np.ndarray
    rho2_plus: np.ndarray
    mu_minus: np.ndarray
    rho2_minus: np.ndarray


@dataclass(eq=False)
class LayerMoments:
    """Per-output moments of one linear stage: mean, variance, covariance, halves."""

    mu: np.ndarray
    rho2: np.ndarray
    rho_cov: np.ndarray | None
    half: HalfMoments


def _qform_full(a, cov: np.ndarray) -> np.ndarray:
    """a @ cov @ a.T for dense or sparse a, returned dense symmetric."""
    b = a @ cov  # (M, L)
    out = a @ b.T  # sparse @ dense works for both container kinds
    out = np.asarray(out)
    return 0.5 * (out + out.T)


def _qform_diag(a, cov: np.ndarray) -> np.ndarray:
    """diag(a @ cov @ a.T) without forming the full product."""
    b = a @ cov
    if sparse.issparse(a):
        return np.asarray(a.multiply(b).sum(axis=1)).reshape(-1)
    return np.einsum("ml,ml->m", a, b)


def _matvec(a, x: np.ndarray) -> np.ndarray:
    return np.asarray(a @ x).reshape(-1)


def linear_moments(
    state: MomentState, pair: ConductancePair, cfg: CrossbarConfig, bias: np.ndarray | None = None
) -> tuple[MomentState, LayerMoments]:
    """Propagate moments through one noisy quantized linear stage.

    The output mean uses the quantized weights (pure weights + quantization
    offset); the output covariance is the weight-transformed input covariance
    plus a diagonal noise term driven by the input energy.  Both are exact
    for the crossbar computation model.  The reference chain uses the pure
    weights scaled by the readout gain r.  Half moments of the raw +/-
    column sums are also produced for the power model.
    """
    x = state.mean
    m, l = pair.shape
    if x.size != l:
        raise ValueError(f"state has {x.size} entries, stage expects {l}")
    r = cfg.r
    c = pair.c
    cov = state.cov
    gamma2 = np.zeros(l) if cov is None else np.diag(cov)
    energy_vec = x * x + gamma2
    energy = float(np.sum(energy_vec))

    mu = r * _matvec(pair.w_hat, x)
    ref = r * _matvec(pair.weights, state.ref)

    table = cfg.sigma_table
    if table is None:
        sig2_combined = cfg.pair_devices * cfg.sigma_v**2
        diag_noise = np.full(m, (r * r) * sig2_combined / (c * c) * energy)
        sig2_plus = np.full(m, (r * r) * cfg.sigma_v**2 * energy)
        sig2_minus = sig2_plus.copy()
    else:
        sp, sm = device_sigmas(pair, cfg.sigma_v)
        s2p = sp * sp
        s2m = sm * sm
        diag_noise = (r * r) / (c * c) * ((s2p + s2m) @ energy_vec)
        sig2_plus = (r * r) * (s2p @ energy_vec)
        sig2_minus = (r * r) * (s2m @ energy_vec)

    if cov is not None:
        cov_out = (r * r) * _qform_full(pair.w_hat, cov)
        idx = np.arange(m)
        cov_out[idx, idx] += diag_noise
    elif np.any(diag_noise > 0):
        cov_out = np.diag(diag_noise)
    else:
        cov_out = None

    mu_p = (r * c) * _matvec(pair.w_half_plus, x)
    mu_m = (r * c) * _matvec(pair.w_half_minus, x)
    if cov is not None:
        rho2_p = sig2_plus + (r * c) ** 2 * _qform_diag(pair.w_half_plus, cov)
        rho2_m = sig2_minus + (r * c) ** 2 * _qform_diag(pair.w_half_minus, cov)
    else:
        rho2_p, rho2_m = sig2_plus, sig2_minus

    if bias is not None:
        mu = mu + bias
        ref = ref + bias

    rho2 = diag_noise.copy() if cov_out is None else np.diag(cov_out).copy()
    out_state = MomentState(mu, cov_out, ref, (m,))
    lm = LayerMoments(mu, rho2, cov_out, HalfMoments(mu_p, rho2_p, mu_m, rho2_m))
    return out_state, lm


def activation_moments(state: MomentState, kind: str, diagnostics: dict | None = None) -> MomentState:
    """Taylor moments after an elementwise activation.

    identity passes the state through unchanged.  For softplus the mean picks
    up a curvature correction, the variance uses the second-order expansion
    (algebraically the squared slope times the input variance, clamped at
    zero against roundoff), and cross-covariances scale with the product of
    slopes.  The reference is mapped exactly.
    """
    if kind == "identity":
        return state
    if kind != "softplus":
        raise ValueError(f"unsupported activation {kind!r}")
    mu = state.mean
    rho2 = state.var()
    f = softplus(mu)
    fp = expit(mu)
    fpp = fp * (1.0 - fp)
    gpp = 2.0 * (fp * fp + f * fpp)

    mean_out = f + 0.5 * fpp * rho2
    var_out = 0.5 * gpp * rho2 - f * fpp * rho2
    neg = var_out < 0.0
    if np.any(neg):
        if diagnostics is not None:
            diagnostics["negative_var_clamped"] = diagnostics.get("negative_var_clamped", 0) + int(neg.sum())
        var_out = np.where(neg, 0.0, var_out)

    if state.cov is None:
        cov_out = np.diag(var_out) if np.any(var_out > 0) else None
    else:
        cov_out = state.cov * np.outer(fp, fp)
        idx = np.arange(mu.size)
        cov_out[idx, idx] = var_out
    return MomentState(mean_out, cov_out, softplus(state.ref), state.shape)


def pool_moments(state: MomentState, stage: PoolStage) -> MomentState:
    """Exact moments after the averaging map (pooling is linear)."""
    p = stage.matrix
    if p.shape[1] != state.size:
        raise ValueError(f"pool expects {p.shape[1]} entries, state has {state.size}")
    mean = _matvec(p, state.mean)
    ref = _matvec(p, state.ref)
    if state.cov is None:
        cov = None
    else:
        cov = _qform_full(p, state.cov)
    return MomentState(mean, cov, ref, stage.out_shape)


@dataclass(eq=False)
class MseSummary:
    per_output: np.ndarray
    mean: float
    max: float


def mse(state: MomentState) -> MseSummary:
    """Per-output mean squared error against the noiseless reference."""
    per_output = state.var() + (state.mean - state.ref) ** 2
    return MseSummary(per_output, float(per_output.mean()), float(per_output.max()))


# ---------------------------------------------------------------------------
# whole-network driver
# ---------------------------------------------------------------------------


def _normalize_configs(net: LoweredNetwork, configs) -> list[CrossbarConfig]:
    n = len(net.linear_stages())
    if isinstance(configs, CrossbarConfig):
        return [configs] * n
    configs = list(configs)
    if len(configs) != n:
        raise ValueError(f"{len(configs)} configs for {n} linear stages")
    return configs


@dataclass(eq=False)
class PreparedNetwork:
    """A lowered network bound to per-layer crossbar configs, quantized once.

    Rescaling to new conductance ranges (same level count) reuses the
    weight-domain quantization, so conductance-range sweeps share identical
    quantization offsets.
    """

    net: LoweredNetwork
    configs: list[CrossbarConfig]
    pairs: list[ConductancePair]
    quantize: bool
    _dense_cache: dict = field(default_factory=dict)

    def with_g_max(self, g_max_per_layer) -> "PreparedNetwork":
        g = np.broadcast_to(np.asarray(g_max_per_layer, dtype=np.float64), (len(self.pairs),))
        cfgs = [cfg.with_g_max(float(gv)) for cfg, gv in zip(self.configs, g)]
        pairs = [pair.rescaled(cfg) for pair, cfg in zip(self.pairs, cfgs)]
        return PreparedNetwork(self.net, cfgs, pairs, self.quantize)

    def dense_halves(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        if k not in self._dense_cache:
            self._dense_cache[k] = self.pairs[k].dense_halves()
        return self._dense_cache[k]


def prepare_network(net: LoweredNetwork, configs, quantize: bool = True) -> PreparedNetwork:
    cfgs = _normalize_configs(net, configs)
    pairs = [
        map_and_quantize(stage.matrix, cfg, stage.w_max, quantize=quantize)
        for stage, cfg in zip(net.linear_stages(), cfgs)
    ]
    return PreparedNetwork(net, cfgs, pairs, quantize)


@dataclass(eq=False)
class PredictResult:
    initial: MomentState
    states: list[MomentState]
    layer_moments: list[LayerMoments]
    final_mse: MseSummary
    diagnostics: dict
    prepared: PreparedNetwork

    def stage_input(self, stage_index: int) -> MomentState:
        return self.initial if stage_index == 0 else self.states[stage_index - 1]


def predict_prepared(prep: PreparedNetwork, x: np.ndarray) -> PredictResult:
    state = MomentState.from_input(x, prep.net.input_shape)
    if state.size != prep.net.input_size:
        raise ValueError(f"input size {state.size}, network expects {prep.net.input_size}")
    initial = state
    states: list[MomentState] = []
    layer_moments: list[LayerMoments] = []
    diagnostics: dict = {"negative_var_clamped": 0}
    k = 0
    for stage in prep.net.stages:
        if isinstance(stage, LinearStage):
            state, lm = linear_moments(state, prep.pairs[k], prep.configs[k], bias=stage.bias)
            layer_moments.append(lm)
            k += 1
        elif isinstance(stage, ActivationStage):
            state = activation_moments(state, stage.kind, diagnostics)
        else:
            state = pool_moments(state, stage)
        states.append(state)
    return PredictResult(initial, states, layer_moments, mse(state), diagnostics, prep)


def predict_network(net: LoweredNetwork, configs, x: np.ndarray, quantize: bool = True) -> PredictResult:
    """Chain linear / activation / pooling moments over the whole network."""
    return predict_prepared(prepare_network(net, configs, quantize=quantize), x)


# ---------------------------------------------------------------------------
# MSE as a polynomial in the weight-to-conductance scale
# ---------------------------------------------------------------------------


def _single_layer_mse(
    pair: ConductancePair, kind: str, state: MomentState, bias: np.ndarray | None = None
) -> np.ndarray:
    out, _ = linear_moments(state, pair, pair.cfg, bias=bias)
    out = activation_moments(out, kind)
    return mse(out).per_output


def mse_poly_coeffs(
    pair: ConductancePair,
    activation: str,
    state: MomentState,
    probes: tuple[float, float, float] = (1.0, 2.0, 4.0),
    bias: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fit per-output MSE(c) = F1/c**4 + F2/c**2 + F3 for one layer.

    The input moments are held fixed and the layer is re-scaled to the three
    probe values of c (the weight-domain quantization offsets are invariant
    to that rescale), then the 3x3 system in (1/c**4, 1/c**2, 1) is solved.
    F3 is the large-c limit: the MSE floor set purely by quantization.
    """
    probes = tuple(float(p) for p in probes)
    if len(probes) != 3 or len(set(probes)) != 3 or min(probes) <= 0:
        raise NumericError(f"need three distinct positive probes, got {probes}")
    rows = []
    for c in probes:
        cfg = pair.cfg.with_g_max(c * pair.w_max)
        rows.append(_single_layer_mse(pair.rescaled(cfg), activation, state, bias=bias))
    y = np.stack(rows)  # (3, M)
    v = np.array([[1.0 / c**4, 1.0 / c**2, 1.0] for c in probes])
    try:
        coeffs = np.linalg.solve(v, y)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"singular probe system for probes {probes}") from e
    return coeffs[0], coeffs[1], coeffs[2]
