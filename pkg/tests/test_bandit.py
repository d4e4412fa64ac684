import dataclasses
import math

import numpy as np
import pytest

from dmliv.bandit import (
    ORACLE_GRID,
    OraclePolicy,
    Policy,
    RandomPolicy,
    default_action_bounds,
    evaluate_policy,
    optimal_action,
    optimal_action_demand,
)
from dmliv.datagen import DemandConfig, SemiSynthConfig, generate_demand, generate_semisynth, psi_t
from dmliv.learners import FEEDFORWARD, RegressorConfig, new_counterfactual_model


class Fn:
    """Counterfactual model from a plain function of ``(c, a)``."""

    def __init__(self, f):
        self.f = f

    def value(self, c, a):
        c = np.atleast_2d(c)
        return np.asarray(self.f(c, np.reshape(a, -1)), dtype=float) * np.ones(c.shape[0])


@pytest.fixture(scope="module")
def demand():
    return generate_demand(DemandConfig(2000, rho=0.9, seed=3))


# act -----------------------------------------------------------------------------


def test_quadratic_peak():
    pol = Policy(Fn(lambda c, a: -((a - 2.0) ** 2)), action_grid=4097, action_bounds=(0.0, 4.0))
    assert abs(pol.act([0.0]) - 2.0) <= 4.0 / 4096


def test_constant_model_takes_lowest_action():
    pol = Policy(Fn(lambda c, a: 0.0 * a + 3.0), action_grid=17, action_bounds=(-1.0, 1.0))
    assert pol.act([0.5, 2.0]) == -1.0
    uni = Policy(Fn(lambda c, a: 0.0 * a), action_grid=50, action_bounds=(-1.0, 1.0), sampling="uniform", seed=4)
    assert uni.act([0.0]) == uni.candidates.min()


def test_monotone_model_takes_top():
    pol = Policy(Fn(lambda c, a: a), action_grid=100, action_bounds=(-2.0, 3.0))
    assert 3.0 - pol.act([1.0]) <= 5.0 / 99


def test_uniform_candidates():
    pol = Policy(Fn(lambda c, a: a), action_grid=64, action_bounds=(-1.0, 2.0), sampling="uniform", seed=9)
    cand = pol.candidates
    assert cand.size == 64 and np.all(np.diff(cand) >= 0)
    assert cand.min() >= -1.0 and cand.max() <= 2.0
    twin = Policy(Fn(lambda c, a: a), action_grid=64, action_bounds=(-1.0, 2.0), sampling="uniform", seed=9)
    assert np.array_equal(cand, twin.candidates)


@pytest.mark.parametrize("kwargs", [dict(action_grid=1), dict(action_bounds=(1.0, 1.0)), dict(sampling="sobol")])
def test_policy_validation(kwargs):
    with pytest.raises(ValueError):
        Policy(Fn(lambda c, a: a), **kwargs)


def test_act_batch_matches_act():
    pol = Policy(Fn(lambda c, a: -((a - np.sin(c[:, 0])) ** 2)), action_grid=257, action_bounds=(-2.0, 2.0))
    ctx = np.random.default_rng(0).normal(size=(40, 2))
    batch = pol.act_batch(ctx)
    assert np.array_equal(batch, [pol.act(c) for c in ctx])
    np.testing.assert_allclose(batch, np.sin(ctx[:, 0]), atol=4.0 / 256)


def test_argmax_invariant_to_context_only_shift():
    net = new_counterfactual_model(RegressorConfig(FEEDFORWARD, layer_widths=(16, 8)), 2, seed=5)
    ctx = np.random.default_rng(1).normal(size=(200, 2))
    base = Policy(net, action_grid=512, action_bounds=(-3.0, 3.0))
    for k in (lambda c: 100.0 * c[:, 1] ** 2, lambda c: np.exp(c[:, 0]), lambda c: -7.0 + 0 * c[:, 0]):
        shifted = Policy(Fn(lambda c, a, k=k: net.value(c, a) + k(c)), action_grid=512, action_bounds=(-3.0, 3.0))
        assert np.array_equal(base.act_batch(ctx), shifted.act_batch(ctx))
    smooth = Fn(lambda c, a: -((a - np.tanh(c[:, 0])) ** 2))
    shifted = Fn(lambda c, a: smooth.value(c, a) + 50.0 * np.sin(3 * c[:, 1]))
    assert np.array_equal(Policy(smooth).act_batch(ctx), Policy(shifted).act_batch(ctx))


def test_grid_refinement_is_stable():
    # |d/da -(a - sin c)^2| <= 2 (3 + 1) on the bounds
    lip, bounds = 8.0, (-3.0, 3.0)
    h = Fn(lambda c, a: -((a - np.sin(3 * c[:, 0])) ** 2))
    ctx = np.random.default_rng(2).normal(size=(300, 1))
    for grid in (64, 256, 1024):
        coarse = Policy(h, action_grid=grid, action_bounds=bounds)
        fine = Policy(h, action_grid=2 * grid, action_bounds=bounds)
        step = (bounds[1] - bounds[0]) / (grid - 1)
        gap = np.abs(h.value(ctx, coarse.act_batch(ctx)) - h.value(ctx, fine.act_batch(ctx)))
        assert np.all(gap < lip * step)


# oracle --------------------------------------------------------------------------


def test_demand_oracle_lower_bound_when_slope_negative():
    assert 1 * psi_t(5.0) - 2 == pytest.approx(-3.0)
    assert optimal_action_demand(5.0, 1, (10.0, 40.0)) == 10.0


def test_demand_oracle_upper_bound_when_slope_positive():
    # s psi(t) > 2 needs t past the training range, e.g. the shifted t = 11
    assert 7 * psi_t(11.0) > 2
    assert optimal_action_demand(11.0, 7, (10.0, 40.0)) == 40.0


def test_demand_oracle_matches_sign_analysis_everywhere():
    r = np.random.default_rng(3)
    t = r.uniform(0, 11, 5000)
    s = r.integers(1, 8, 5000).astype(float)
    bounds = (17.3, 31.9)
    slope = s * psi_t(t) - 2
    expected = np.where(slope > 0, bounds[1], bounds[0])
    assert np.array_equal(optimal_action_demand(t, s, bounds), expected)


def test_in_range_demand_slope_is_negative():
    t = np.linspace(0, 10, 10_001)
    assert np.all(7 * psi_t(t) - 2 < 0)


def test_brute_force_oracle_agrees_with_demand_oracle(demand):
    ctx = demand.truth.sample_contexts(500, np.random.default_rng(4), shift=1.0)
    bounds = (15.0, 35.0)
    np.testing.assert_array_equal(
        optimal_action(demand.truth, ctx, bounds), optimal_action_demand(ctx[:, 0], ctx[:, 1], bounds)
    )


def test_oracle_needs_truth():
    with pytest.raises(ValueError):
        optimal_action(None, [[0.0, 1.0]], (0.0, 1.0))
    with pytest.raises(ValueError):
        optimal_action_demand(1.0, 1, (2.0, 2.0))


def test_semisynth_oracle_finds_interior_peak():
    data = generate_semisynth(SemiSynthConfig(200, d_C=3, seed=1))
    ctx = data.truth.sample_contexts(50, np.random.default_rng(0))
    bounds = (-5.0, 5.0)
    best = optimal_action(data.truth, ctx, bounds)
    cand = np.linspace(*bounds, ORACLE_GRID)
    for c, a in zip(ctx[:5], best[:5]):
        vals = data.truth.h0(np.repeat(c[None], cand.size, 0), cand)
        assert data.truth.h0(c[None], [a])[0] == pytest.approx(vals.max(), abs=1e-12)


# evaluation ------------------------------------------------------------------------


def test_oracle_policy_has_zero_gap(demand):
    bounds = default_action_bounds(demand)
    ev = evaluate_policy(OraclePolicy(demand, bounds), demand, n_eval=10_000, seed=1)
    assert abs(ev.suboptimality) <= 3 * ev.se or ev.suboptimality == 0.0
    ev_ood = evaluate_policy(OraclePolicy(demand, bounds), demand, n_eval=5000, context_shift=1.0, seed=2)
    assert abs(ev_ood.suboptimality) <= 3 * ev_ood.se or ev_ood.suboptimality == 0.0


def test_random_policy_is_clearly_suboptimal(demand):
    bounds = default_action_bounds(demand)
    ev = evaluate_policy(RandomPolicy(bounds, seed=3), demand, n_eval=10_000, seed=4)
    assert ev.suboptimality > 5 * ev.se


def test_truth_model_policy_is_near_optimal(demand):
    truth_model = Fn(lambda c, a: demand.h0_model_units(c, a))
    bounds = default_action_bounds(demand)
    ev = evaluate_policy(Policy(truth_model, action_bounds=bounds), demand, n_eval=5000, seed=5)
    assert ev.suboptimality >= -3 * ev.se
    assert ev.suboptimality == pytest.approx(0.0, abs=1e-9)


def test_evaluation_units_and_shift(demand):
    bounds = default_action_bounds(demand)
    ev = evaluate_policy(RandomPolicy(bounds, seed=0), demand, n_eval=1000, context_shift=1.0, seed=0)
    assert ev.context_shift == 1.0 and ev.n_eval == 1000 and ev.units == "raw"
    mean, sd = demand.scaling["outcome"]
    assert ev.value_model == pytest.approx((ev.value - mean) / sd)
    assert ev.suboptimality_model == pytest.approx(ev.suboptimality / sd)
    assert set(ev.to_dict()) >= {"value", "optimal_value", "suboptimality", "se", "n_eval", "context_shift"}


def test_evaluation_is_seeded(demand):
    bounds = default_action_bounds(demand)
    a = evaluate_policy(RandomPolicy(bounds, seed=0), demand, n_eval=300, seed=8)
    b = evaluate_policy(RandomPolicy(bounds, seed=0), demand, n_eval=300, seed=8)
    assert a == b


def test_evaluation_errors(demand):
    bounds = default_action_bounds(demand)
    with pytest.raises(ValueError):
        evaluate_policy(RandomPolicy(bounds), demand, n_eval=0)
    blind = dataclasses.replace(demand, truth=None)
    with pytest.raises(ValueError, match="unknown"):
        evaluate_policy(RandomPolicy(bounds), blind, n_eval=10)


def test_default_bounds_pad_range(demand):
    lo, hi = default_action_bounds(demand)
    a = demand.action[:, 0]
    width = a.max() - a.min()
    assert lo == pytest.approx(a.min() - 0.1 * width)
    assert hi == pytest.approx(a.max() + 0.1 * width)
    assert math.isfinite(lo) and lo < hi
