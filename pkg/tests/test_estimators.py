import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeope import oracle
from safeope.cmdp import Cmdp, Sampler, TabularPolicy, Trajectory, make_rng
from safeope.dp import expected_cost, expected_return
from safeope.envs import make_deterministic_cmdp, make_random_cmdp, random_policy
from safeope.estimators import (RunningMoments, ZeroBehaviorProbabilityError, cost_indexed,
                                error_curve, evaluate, pdis_return, pdis_returns)
from safeope.synth import SafetyConfig, synthesize_scope


def _two_step():
    P = np.full((1, 2, 1), 1.0)
    model = Cmdp(P, np.ones((1, 2)), np.zeros((1, 2)), np.ones(1), 2)
    target = TabularPolicy(np.array([[[1.0, 0.0]], [[0.25, 0.75]]]))
    behavior = TabularPolicy(np.array([[[0.5, 0.5]], [[0.5, 0.5]]]))
    return model, target, behavior


def test_hand_computed_recursion():
    # Ratios (2, 0.5), rewards (1, 1): 2 * (1 + 0.5 * 1) = 3.
    _, target, behavior = _two_step()
    tr = Trajectory(np.array([0, 0]), np.array([0, 0]), np.ones(2), np.zeros(2))
    assert pdis_return(tr, target, behavior) == 3.0


def test_on_policy_is_plain_return(tiny):
    model, pi = tiny
    b = Sampler(model).sample(pi, 20, make_rng(0))
    assert np.allclose(pdis_returns(b, pi, pi), b.rewards.sum(axis=1), atol=1e-12)
    assert pdis_return(b[3], pi, pi) == pytest.approx(b[3].total_reward)


def test_zero_rewards_give_zero(tiny):
    model, pi = tiny
    z = Cmdp(model.transition, np.zeros_like(model.reward), model.cost, model.initial_dist, 3)
    b = Sampler(z).sample(pi, 10, make_rng(0))
    assert not pdis_returns(b, pi, random_policy(z, 3)).any()


def test_zero_behavior_probability_names_step():
    _, target, behavior = _two_step()
    bad = TabularPolicy(np.array([[[0.5, 0.5]], [[0.0, 1.0]]]))
    tr = Trajectory(np.array([0, 0]), np.array([1, 0]), np.ones(2), np.zeros(2))
    with pytest.raises(ZeroBehaviorProbabilityError) as exc:
        pdis_return(tr, target, bad)
    assert exc.value.t == 1


def test_batched_and_log_space_agree(tiny):
    model, pi = tiny
    mu = random_policy(model, 5)
    b = Sampler(model).sample(mu, 200, make_rng(1))
    single = np.array([pdis_return(b[i], pi, mu) for i in range(200)])
    assert np.allclose(pdis_returns(b, pi, mu), single, rtol=1e-13, atol=1e-13)
    assert np.allclose(pdis_returns(b, pi, mu, log_space=True), single, rtol=1e-10, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=300), st.integers(1, 50))
def test_running_moments_match_two_pass(xs, split):
    rm = RunningMoments()
    rm.update_batch(xs[:split])
    for x in xs[split:]:
        rm.update(x)
    x = np.array(xs)
    assert rm.mean == pytest.approx(x.mean(), rel=1e-10, abs=1e-9)
    assert rm.variance == pytest.approx(x.var(ddof=1), rel=1e-8, abs=1e-7)


def test_welford_on_ten_thousand_samples():
    x = make_rng(3).normal(1e4, 1.0, size=10_000)
    rm = RunningMoments()
    for v in x:
        rm.update(float(v))
    assert rm.variance == pytest.approx(np.var(x, ddof=1), rel=1e-10)


def test_deterministic_model_zero_variance():
    model = make_deterministic_cmdp(3, 2, 4, seed=2)
    probs = np.zeros(model.shape)
    probs[..., 0] = 1.0
    pi = TabularPolicy(probs)
    res = evaluate(model, pi, pi, 25, make_rng(0))
    assert res.sample_variance == 0.0 and res.std_error == 0.0
    curves = error_curve(model, pi, pi, 5, 2, make_rng(0), expected_return(model, pi))
    assert np.max(curves.abs_error) <= 1e-12


def test_scope_estimate_is_unbiased_empirically():
    model = make_random_cmdp(3, 2, 3, seed=12)
    pi = random_policy(model, 13)
    mu = synthesize_scope(model, pi, SafetyConfig(0.0))
    res = evaluate(model, pi, mu, 10_000, make_rng(4), chunk=999)
    assert abs(res.mean_return - expected_return(model, pi)) <= 3 * res.std_error
    # Costs are those of executing the behavior policy, not the target.
    cost_se = np.sqrt(model.horizon / 12 / 10_000) * 2
    assert abs(res.mean_trajectory_cost - expected_cost(model, mu)) <= 4 * cost_se
    assert res.num_episodes == 10_000


def test_mean_within_four_standard_errors_in_most_seeds():
    model = make_random_cmdp(3, 2, 3, seed=21)
    pi = random_policy(model, 22)
    mu = synthesize_scope(model, pi, SafetyConfig(0.1))
    truth = expected_return(model, pi)
    hits = sum(abs((r := evaluate(model, pi, mu, 10_000, make_rng(s))).mean_return - truth)
               <= 4 * r.std_error for s in range(100))
    assert hits >= 99


def test_sample_variance_matches_oracle(tiny):
    model, pi = tiny
    mu = random_policy(model, 9)
    _, var, _ = oracle.exact_moments(model, pi, mu)
    res = evaluate(model, pi, mu, 200_000, make_rng(2))
    assert res.sample_variance == pytest.approx(var, rel=0.03)


def test_first_normalized_on_policy_point_is_one(tiny):
    model, pi = tiny
    c = error_curve(model, pi, pi, 10, 4, make_rng(1), expected_return(model, pi))
    scale = c.abs_error[:, 0].mean()
    assert c.normalized(scale)[:, 0].mean() == pytest.approx(1.0)
    assert c.cum_cost.shape == (4, 10) and np.all(np.diff(c.cum_cost, axis=1) >= 0)


def test_cost_indexing_holds_error_between_episodes():
    err = np.array([[5.0, 4.0, 3.0]])
    cum = np.array([[1.0, 2.5, 4.0]])
    out = cost_indexed(err, cum, np.array([0.5, 1.0, 2.0, 2.5, 3.9, 10.0]))
    assert np.isnan(out[0, 0])
    assert out[0, 1:].tolist() == [5.0, 5.0, 4.0, 4.0, 3.0]
