"""Expected power of the memristor arrays and the column amplifiers.

Per device the expected power is |conductance| times the input second moment;
programming noise is zero-mean and dropped from this term by convention, so
the memristor component scales linearly with the weight-to-conductance scale
c.  Each column amplifier dissipates the second moment of its raw column sum,
which is quadratic in c plus a noise floor, giving every column the exact
quadratic form c**2*H1 + c*H2 + H3 at fixed input moments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .crossbar import ConductancePair
from .errors import NumericError
from .moments import (
    HalfMoments,
    LayerMoments,
    MomentState,
    PreparedNetwork,
    linear_moments,
    predict_prepared,
    prepare_network,
)
from .netmodel import LoweredNetwork


@dataclass(eq=False)
class LayerPower:
    mem: float
    tia_plus: float
    tia_minus: float

    @property
    def total(self) -> float:
        return self.mem + self.tia_plus + self.tia_minus


@dataclass(eq=False)
class PowerBreakdown:
    per_layer: list[LayerPower]

    @property
    def mem(self) -> float:
        return sum(p.mem for p in self.per_layer)

    @property
    def tia_plus(self) -> float:
        return sum(p.tia_plus for p in self.per_layer)

    @property
    def tia_minus(self) -> float:
        return sum(p.tia_minus for p in self.per_layer)

    @property
    def total(self) -> float:
        return sum(p.total for p in self.per_layer)


def _half_sum_cols(pair: ConductancePair) -> np.ndarray:
    """Per-input-column sum of both quantized weight halves: sum_j (w+ + w-)[j, i]."""
    s = pair.w_half_plus + pair.w_half_minus
    if sparse.issparse(s):
        return np.asarray(s.sum(axis=0)).reshape(-1)
    return s.sum(axis=0)


def layer_power(
    pair: ConductancePair,
    state: MomentState,
    half: HalfMoments,
    cfg=None,
) -> LayerPower:
    """Expected power of one linear stage given its input moments.

    state is the stage *input* state; half holds the unscaled moments of the
    raw +/- column sums of the same stage.
    """
    cfg = pair.cfg if cfg is None else cfg
    x = state.mean
    if x.size != pair.shape[1]:
        raise ValueError(f"input state has {x.size} entries, stage expects {pair.shape[1]}")
    energy_vec = x * x + state.var()
    mem = pair.c * float(_half_sum_cols(pair) @ energy_vec)
    r2 = cfg.r**2
    tia_p = float(np.sum(half.rho2_plus + half.mu_plus**2)) / r2
    tia_m = float(np.sum(half.rho2_minus + half.mu_minus**2)) / r2
    return LayerPower(mem, tia_p, tia_m)


def network_power(net: LoweredNetwork, configs, x: np.ndarray, quantize: bool = True) -> PowerBreakdown:
    """Run moment propagation and accumulate per-layer expected power."""
    prep = prepare_network(net, configs, quantize=quantize)
    return prepared_power(prep, x)


def prepared_power(prep: PreparedNetwork, x: np.ndarray) -> PowerBreakdown:
    result = predict_prepared(prep, x)
    return power_from_prediction(prep, result)


def power_from_prediction(prep: PreparedNetwork, result) -> PowerBreakdown:
    """Per-layer power from an existing moment-propagation result."""
    from .netmodel import LinearStage  # local to avoid import noise at module top

    entries: list[LayerPower] = []
    k = 0
    for idx, stage in enumerate(prep.net.stages):
        if isinstance(stage, LinearStage):
            state_in = result.stage_input(idx)
            entries.append(layer_power(prep.pairs[k], state_in, result.layer_moments[k].half, prep.configs[k]))
            k += 1
    return PowerBreakdown(entries)


def _per_column_power(pair: ConductancePair, state: MomentState, lm: LayerMoments) -> np.ndarray:
    """Per-output-column expected power: memristor + both amplifiers."""
    x = state.mean
    energy_vec = x * x + state.var()
    s = pair.w_half_plus + pair.w_half_minus
    mem_cols = pair.c * np.asarray(s @ energy_vec).reshape(-1)
    r2 = pair.cfg.r**2
    h = lm.half
    return mem_cols + (h.rho2_plus + h.mu_plus**2 + h.rho2_minus + h.mu_minus**2) / r2


def power_poly(
    pair: ConductancePair,
    state: MomentState,
    probes: tuple[float, float, float] = (1.0, 2.0, 4.0),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fit per-column power(c) = c**2*H1 + c*H2 + H3 at fixed input moments.

    Evaluates the layer at three probe scales (quantization offsets are
    invariant to the rescale) and solves the quadratic system.  H3 is the
    c -> 0 limit: the amplifier noise floor.
    """
    probes = tuple(float(p) for p in probes)
    if len(probes) != 3 or len(set(probes)) != 3 or min(probes) <= 0:
        raise NumericError(f"need three distinct positive probes, got {probes}")
    rows = []
    for c in probes:
        cfg = pair.cfg.with_g_max(c * pair.w_max)
        pair_c = pair.rescaled(cfg)
        _, lm = linear_moments(state, pair_c, cfg)
        rows.append(_per_column_power(pair_c, state, lm))
    y = np.stack(rows)
    v = np.array([[c**2, c, 1.0] for c in probes])
    try:
        coeffs = np.linalg.solve(v, y)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"singular probe system for probes {probes}") from e
    return coeffs[0], coeffs[1], coeffs[2]
