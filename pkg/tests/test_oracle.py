import numpy as np
import pytest

from safeope import oracle
from safeope.cmdp import Cmdp, Sampler, TabularPolicy, make_rng
from safeope.dp import expected_return
from safeope.envs import (make_deterministic_cmdp, make_enlarged_space_case, make_random_cmdp,
                          random_policy)


def test_deterministic_model_has_one_trajectory():
    model = make_deterministic_cmdp(3, 2, 4, seed=3)
    probs = np.zeros(model.shape)
    probs[..., 0] = 1.0
    trajs = oracle.enumerate_trajectories(model, TabularPolicy(probs))
    assert len(trajs) == 1 and trajs[0].probability == 1.0


def test_two_by_two_count_and_mass():
    model = make_random_cmdp(2, 2, 2, seed=0)
    model = Cmdp(model.transition, model.reward, model.cost, np.array([1.0, 0.0]), 2)
    pi = random_policy(model, 1)
    trajs = oracle.enumerate_trajectories(model, pi)
    # One start state, then (action, next state, action): 2 * 2 * 2 = 8 paths.
    assert len(trajs) == 8
    assert sum(w.probability for w in trajs) == pytest.approx(1.0, abs=1e-12)
    uniform = Cmdp(model.transition, model.reward, model.cost, np.array([0.5, 0.5]), 2)
    assert len(oracle.enumerate_trajectories(uniform, pi)) == 16


def test_zero_probability_branches_absent():
    model = make_random_cmdp(2, 3, 2, seed=4)
    probs = np.tile([0.5, 0.0, 0.5], (2, 2, 1))
    trajs = oracle.enumerate_trajectories(model, TabularPolicy(probs))
    assert all(1 not in w.trajectory.actions for w in trajs)


@pytest.mark.parametrize("seed", range(10))
def test_mass_sums_to_one(seed):
    model = make_random_cmdp(3, 3, 3, seed)
    assert oracle.total_probability(model, random_policy(model, seed)) == pytest.approx(1.0, abs=1e-10)


def test_cap_enforced():
    model = make_random_cmdp(4, 3, 4, seed=0)
    with pytest.raises(oracle.EnumerationCapError):
        oracle.enumerate_trajectories(model, random_policy(model, 0), cap=1000)


def test_on_policy_mean_is_true_value(tiny):
    model, pi = tiny
    mean, _, _ = oracle.exact_moments(model, pi, pi)
    assert mean == pytest.approx(expected_return(model, pi), abs=1e-12)


def test_deterministic_variance_is_zero():
    model = make_deterministic_cmdp(4, 2, 3, seed=8)
    probs = np.zeros(model.shape)
    probs[..., 1] = 1.0
    pi = TabularPolicy(probs)
    assert oracle.exact_moments(model, pi, pi)[1] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_enlarged_space_unbiased(seed):
    model, pi, mu, _ = make_enlarged_space_case(seed)
    mean, _, _ = oracle.exact_moments(model, pi, mu)
    assert mean == pytest.approx(expected_return(model, pi), abs=1e-10)


def test_state_marginals_match_sampling():
    model = make_random_cmdp(2, 2, 3, seed=2)
    pi = random_policy(model, 3)
    tab = oracle.enumerate_table(model, pi.probs, model.initial_dist)
    n = 100_000
    b = Sampler(model).sample(pi, n, make_rng(1))
    for t in range(3):
        exact = np.bincount(tab.states[:, t], weights=tab.prob, minlength=2)
        emp = np.bincount(b.states[:, t], minlength=2) / n
        se = np.sqrt(exact * (1 - exact) / n)
        assert np.all(np.abs(emp - exact) <= 3 * se + 1e-12)


def test_dump_csv(tmp_path, tiny):
    model, pi = tiny
    oracle.dump_csv(model, pi, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0].startswith("probability,s0,a0")
    assert len(lines) - 1 == len(oracle.enumerate_trajectories(model, pi))
