"""Search over conductance ranges: minimize worst-case predicted MSE under a
power budget.

The search variables are log-scaled G_max values, one per network (global) or
one per linear stage (per_layer).  A small genetic algorithm with tournament
selection, uniform crossover, multiplicative log-normal mutation, and
single-elite survival handles the non-convex landscape; infeasible
individuals rank strictly below all feasible ones, ordered by constraint
violation.

Per layer at fixed input moments, expected power grows with the conductance
range; network-wide it does not: far below the useful range the 1/c readout
amplification inflates the moments entering deeper layers and predicted power
blows up again.  Feasibility is therefore prechecked on a coarse logarithmic
scan of equal-G points rather than at the lower bound alone.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .crossbar import CrossbarConfig
from .errors import InfeasibleError
from .moments import PreparedNetwork, predict_prepared, prepare_network
from .netmodel import LoweredNetwork
from .power import power_from_prediction
from .util import resolve_threads


@dataclass(frozen=True)
class GaParams:
    population: int = 50
    generations: int = 100
    seed: int = 0
    crossover_rate: float = 0.9
    mutation_scale: float = 0.25
    tournament_size: int = 3

    def __post_init__(self):
        if self.population < 2:
            raise ValueError(f"population must be >= 2, got {self.population}")
        if self.generations < 1:
            raise ValueError(f"generations must be >= 1, got {self.generations}")


@dataclass(eq=False)
class OptProblem:
    """Constrained search problem over conductance ranges."""

    net: LoweredNetwork
    granularity: str  # 'global' or 'per_layer'
    power_budget: float
    input_sample: np.ndarray  # (B, ...) batch
    sigma_v: float
    n_levels: int
    r: float = 1.0
    noise_model: str = "pair"
    bounds: tuple[float, float] = (1e-3, 1e3)
    ga: GaParams = field(default_factory=GaParams)
    agg_inputs: str = "mean"  # batch aggregation of the per-input max MSE
    quantize: bool = True
    # optional warm start: candidate G vectors injected into the initial
    # population (e.g. broadcast a global solution into a per-layer search,
    # which makes the finer granularity provably no worse)
    seed_individuals: np.ndarray | None = None

    def __post_init__(self):
        if self.granularity not in ("global", "per_layer"):
            raise ValueError(f"granularity must be 'global' or 'per_layer', got {self.granularity!r}")
        if not self.power_budget > 0:
            raise ValueError(f"power budget must be > 0, got {self.power_budget}")
        lo, hi = self.bounds
        if not (0 < lo < hi):
            raise ValueError(f"bounds must satisfy 0 < lo < hi, got {self.bounds}")
        if self.agg_inputs not in ("mean", "max"):
            raise ValueError(f"agg_inputs must be 'mean' or 'max', got {self.agg_inputs!r}")
        sample = np.asarray(self.input_sample, dtype=np.float64)
        if sample.ndim == 1:
            sample = sample[None, :]
        if sample.shape[0] < 1:
            raise ValueError("input sample is empty")
        self.input_sample = sample

    @property
    def n_vars(self) -> int:
        return 1 if self.granularity == "global" else len(self.net.linear_stages())


@dataclass(eq=False)
class OptResult:
    g_max: np.ndarray  # per linear stage
    max_mse: float
    power: float
    history: list[dict]
    evaluations: int


class _Evaluator:
    """Caches the lowered, quantized network; re-scales per candidate."""

    def __init__(self, problem: OptProblem):
        self.problem = problem
        base_cfg = CrossbarConfig(
            g_max=1.0,
            n_levels=problem.n_levels,
            sigma_v=problem.sigma_v,
            r=problem.r,
            noise_model=problem.noise_model,
        )
        self.base: PreparedNetwork = prepare_network(problem.net, base_cfg, quantize=problem.quantize)
        self.n_layers = len(self.base.pairs)
        self.xs = problem.input_sample.reshape(problem.input_sample.shape[0], -1)

    def expand(self, gvec: np.ndarray) -> np.ndarray:
        gvec = np.asarray(gvec, dtype=np.float64).reshape(-1)
        if self.problem.granularity == "global":
            if gvec.size != 1:
                raise ValueError(f"global granularity expects 1 variable, got {gvec.size}")
            return np.full(self.n_layers, gvec[0])
        if gvec.size != self.n_layers:
            raise ValueError(f"per_layer granularity expects {self.n_layers} variables, got {gvec.size}")
        return gvec

    def __call__(self, gvec: np.ndarray) -> tuple[float, float]:
        prep = self.base.with_g_max(self.expand(gvec))
        mses = np.empty(self.xs.shape[0])
        powers = np.empty(self.xs.shape[0])
        for i, x in enumerate(self.xs):
            result = predict_prepared(prep, x)
            mses[i] = result.final_mse.max
            powers[i] = power_from_prediction(prep, result).total
        if self.problem.agg_inputs == "mean":
            return float(mses.mean()), float(powers.mean())
        return float(mses.max()), float(powers.max())


def objective(gvec, problem: OptProblem) -> tuple[float, float]:
    """(worst-case MSE aggregated over the sample, expected total power)."""
    lo, hi = problem.bounds
    g = np.asarray(gvec, dtype=np.float64).reshape(-1)
    if np.any(g < lo * (1 - 1e-12)) or np.any(g > hi * (1 + 1e-12)):
        raise ValueError(f"candidate {g} outside bounds {problem.bounds}")
    return _Evaluator(problem)(g)


def _rank_key(mse: float, power: float, budget: float) -> tuple[int, float]:
    if power <= budget:
        return (0, mse)
    return (1, power - budget)


N_FEASIBILITY_PROBES = 16


def optimize(problem: OptProblem, threads: int | None = None) -> OptResult:
    """Genetic search over log-scaled conductance ranges.

    Deterministic for a fixed problem and GA seed.  Raises InfeasibleError
    when no point of a coarse logarithmic scan of the search interval
    satisfies the power budget.
    """
    ev = _Evaluator(problem)
    ga = problem.ga
    lo, hi = problem.bounds
    n = problem.n_vars

    probes = [(float(g), ev(np.full(n, g))) for g in np.geomspace(lo, hi, N_FEASIBILITY_PROBES)]
    feasible_probes = [(g, m) for g, (m, p) in probes if p <= problem.power_budget]
    if not feasible_probes:
        nearest = min(p for _, (_, p) in probes)
        raise InfeasibleError(
            f"no probed point within bounds [{lo:.6g}, {hi:.6g}] satisfies the budget "
            f"({problem.power_budget:.6g} W); smallest probed power {nearest:.6g} W"
        )
    anchor = min(feasible_probes, key=lambda t: t[1])[0]

    rng = np.random.default_rng(ga.seed)
    log_lo, log_hi = np.log(lo), np.log(hi)
    pop = rng.uniform(log_lo, log_hi, size=(ga.population, n))
    pop[0] = np.log(anchor)  # guaranteed-feasible anchor
    if problem.seed_individuals is not None:
        warm = np.atleast_2d(np.asarray(problem.seed_individuals, dtype=np.float64))
        if warm.shape[1] != n:
            raise ValueError(f"seed individuals have {warm.shape[1]} genes, expected {n}")
        k = min(warm.shape[0], ga.population - 1)
        pop[1 : 1 + k] = np.clip(np.log(warm[:k]), log_lo, log_hi)

    n_workers = resolve_threads(threads)

    def evaluate(individuals: np.ndarray) -> list[tuple[float, float]]:
        if n_workers <= 1:
            return [ev(np.exp(ind)) for ind in individuals]
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            return list(pool.map(lambda ind: ev(np.exp(ind)), individuals))

    scores = evaluate(pop)
    keys = [_rank_key(m, p, problem.power_budget) for m, p in scores]

    def best_index() -> int:
        return min(range(len(keys)), key=lambda i: keys[i])

    bi = best_index()
    best_vec, best_score, best_key = pop[bi].copy(), scores[bi], keys[bi]
    history: list[dict] = []

    for gen in range(ga.generations):
        children = np.empty_like(pop)
        children[0] = best_vec  # elitism
        for ci in range(1, ga.population):
            pa = _tournament(rng, keys, ga.tournament_size)
            pb = _tournament(rng, keys, ga.tournament_size)
            child = pop[pa].copy()
            if rng.random() < ga.crossover_rate:
                mask = rng.random(n) < 0.5
                child[mask] = pop[pb][mask]
            child += rng.normal(0.0, ga.mutation_scale, size=n)
            np.clip(child, log_lo, log_hi, out=child)
            children[ci] = child
        pop = children
        scores = evaluate(pop)
        keys = [_rank_key(m, p, problem.power_budget) for m, p in scores]
        bi = best_index()
        if keys[bi] < best_key:
            best_vec, best_score, best_key = pop[bi].copy(), scores[bi], keys[bi]
        feasible = sum(1 for m, p in scores if p <= problem.power_budget) / ga.population
        history.append(
            {
                "generation": gen,
                "best_mse": best_score[0],
                "best_power": best_score[1],
                "feasible_fraction": feasible,
            }
        )

    g_best = np.exp(best_vec)
    final_mse, final_power = ev(g_best)  # re-evaluated from scratch
    if final_power > problem.power_budget:
        raise InfeasibleError("returned solution violates the power budget on re-evaluation")
    return OptResult(
        g_max=ev.expand(g_best),
        max_mse=final_mse,
        power=final_power,
        history=history,
        evaluations=2 + ga.population * (ga.generations + 1),
    )


def _tournament(rng: np.random.Generator, keys: list[tuple[int, float]], k: int) -> int:
    contenders = rng.integers(0, len(keys), size=k)
    return int(min(contenders, key=lambda i: keys[i]))
