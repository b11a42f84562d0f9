import numpy as np
import pytest
from helpers import linear_net

from memse.crossbar import CrossbarConfig, map_and_quantize
from memse.errors import InfeasibleError
from memse.moments import MomentState, mse_poly_coeffs
from memse.netmodel import LinearSpec, NetworkSpec, lower
from memse.optimizer import GaParams, OptProblem, objective, optimize


def toy_problem(budget, granularity="global", seed=0, sigma=0.02, generations=30, population=24,
                bounds=(1e-2, 1e2), agg="mean"):
    spec = linear_net([5, 7, 4], activation="softplus", seed=4)
    net = lower(spec)
    rng = np.random.default_rng(1)
    inputs = rng.normal(size=(6, 5, 1, 1))
    return OptProblem(
        net=net,
        granularity=granularity,
        power_budget=budget,
        input_sample=inputs,
        sigma_v=sigma,
        n_levels=128,
        bounds=bounds,
        ga=GaParams(population=population, generations=generations, seed=seed),
        agg_inputs=agg,
    )


def test_objective_zero_for_noiseless_unquantized():
    p = toy_problem(budget=1e9)
    p.quantize = False
    p.sigma_v = 0.0
    m, pw = objective(np.array([1.0]), p)
    assert m == pytest.approx(0.0, abs=1e-18)
    assert pw > 0


def test_objective_permutation_symmetry():
    # two identical parallel layers: swapping their conductance ranges cannot change anything
    w = np.array([[0.5, -0.25], [0.25, 0.5]])
    spec = NetworkSpec((2, 1, 1), (LinearSpec(w), LinearSpec(w.copy())))
    net = lower(spec)
    inputs = np.random.default_rng(0).normal(size=(4, 2, 1, 1))
    p = OptProblem(net=net, granularity="per_layer", power_budget=1e6, input_sample=inputs,
                   sigma_v=0.01, n_levels=128, bounds=(1e-2, 1e2))
    a = objective(np.array([0.5, 0.5]), p)
    b = objective(np.array([0.5, 0.5])[::-1].copy(), p)
    assert a == b


def test_objective_matches_poly_on_single_layer():
    from memse.netmodel import ActivationSpec

    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 4)) * 0.5
    spec = NetworkSpec((4, 1, 1), (LinearSpec(w), ActivationSpec("softplus")))
    net = lower(spec)
    x = rng.normal(size=4)
    p = OptProblem(net=net, granularity="global", power_budget=1e9, input_sample=x.reshape(1, 4, 1, 1),
                   sigma_v=0.03, n_levels=128, bounds=(1e-3, 1e3), agg_inputs="mean")
    w_max = net.linear_stages()[0].w_max
    cfg = CrossbarConfig(w_max, 128, 0.03)
    pair = map_and_quantize(net.linear_stages()[0].matrix, cfg, w_max)
    state = MomentState.from_input(x, (4,))
    f1, f2, f3 = mse_poly_coeffs(pair, "softplus", state)
    for g in (0.5 * w_max, 2.0 * w_max, 11.0 * w_max):
        c = g / w_max
        m, _ = objective(np.array([g]), p)
        want = np.max(f1 / c**4 + f2 / c**2 + f3)
        assert m == pytest.approx(want, rel=1e-9)


def grid_search_floor(problem, n=64):
    lo, hi = problem.bounds
    best = np.inf
    best_g = None
    for g in np.geomspace(lo, hi, n):
        m, pw = objective(np.full(problem.n_vars, g), problem)
        if pw <= problem.power_budget and m < best:
            best, best_g = m, g
    return best, best_g


def test_generous_budget_reaches_grid_floor():
    probe = toy_problem(budget=1.0, generations=40)
    # budget: 10x the power at the upper bound
    _, pw_hi = objective(np.full(probe.n_vars, probe.bounds[1]), probe)
    p = toy_problem(budget=10.0 * pw_hi, generations=40)
    res = optimize(p)
    floor, _ = grid_search_floor(p)
    assert res.max_mse <= floor * 1.05 + 1e-18
    assert res.power <= p.power_budget


def test_infeasible_budget_raises():
    p = toy_problem(budget=1e-12)
    with pytest.raises(InfeasibleError):
        optimize(p)


def test_history_monotone_and_deterministic():
    p = toy_problem(budget=_mid_budget(), seed=7)
    res1 = optimize(p)
    best = [h["best_mse"] for h in res1.history]
    assert all(b <= a + 1e-15 for a, b in zip(best, best[1:]))
    res2 = optimize(toy_problem(budget=_mid_budget(), seed=7))
    np.testing.assert_array_equal(res1.g_max, res2.g_max)
    assert res1.max_mse == res2.max_mse
    assert res1.history == res2.history


def _mid_budget():
    p = toy_problem(budget=1.0)
    _, pw_lo = objective(np.full(p.n_vars, p.bounds[0]), p)
    _, pw_hi = objective(np.full(p.n_vars, p.bounds[1]), p)
    return float(np.sqrt(pw_lo * pw_hi))


def test_per_layer_not_worse_than_global():
    budget = _mid_budget()
    for seed in (0, 1):
        g = optimize(toy_problem(budget=budget, granularity="global", seed=seed))
        pl = optimize(toy_problem(budget=budget, granularity="per_layer", seed=seed))
        assert pl.max_mse <= g.max_mse + 1e-9
        assert pl.power <= budget and g.power <= budget


def test_constraint_honored_on_reevaluation():
    budget = _mid_budget()
    res = optimize(toy_problem(budget=budget, seed=3))
    p = toy_problem(budget=budget)
    m, pw = objective(res.g_max if res.g_max.size == p.n_vars else res.g_max[:1], p)
    assert pw <= budget
    assert m == pytest.approx(res.max_mse, rel=1e-12)


def test_bounds_validation():
    with pytest.raises(ValueError):
        toy_problem(budget=1.0, bounds=(1.0, 0.5))
    with pytest.raises(ValueError):
        objective(np.array([1e9]), toy_problem(budget=1.0))


def test_threaded_optimize_deterministic():
    budget = _mid_budget()
    a = optimize(toy_problem(budget=budget, seed=5, generations=10), threads=1)
    b = optimize(toy_problem(budget=budget, seed=5, generations=10), threads=4)
    np.testing.assert_array_equal(a.g_max, b.g_max)
    assert a.history == b.history
