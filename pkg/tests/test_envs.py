import numpy as np
import pytest

from safeope.cmdp import validate_cmdp
from safeope.dp import expected_return
from safeope.envs import (DOWN, RIGHT, UP, GridworldSpec, make_gridworld, make_random_cmdp,
                          make_target_policies, quantize_transitions, softmax_policy,
                          target_temperatures)


def test_gridworld_size_and_validity():
    model = make_gridworld(GridworldSpec(10))
    assert model.num_states * model.horizon == 1000
    assert model.num_actions == 4
    assert validate_cmdp(model) == []
    assert np.max(np.abs(model.transition.sum(axis=2) - 1)) <= 1e-15


def test_gridworld_dynamics():
    n = 5
    model = make_gridworld(GridworldSpec(n))
    centre = 2 * n + 2
    # Intended neighbour: 0.9 plus its share of the uniform slip.
    assert model.transition[centre, UP, centre - n] == pytest.approx(0.925, abs=1e-15)
    assert model.transition[centre, UP, centre + n] == pytest.approx(0.025, abs=1e-15)
    # Top-left corner: walls up and left keep the agent in place.
    assert model.transition[0, UP, 0] == pytest.approx(0.925 + 0.025, abs=1e-15)
    det = make_gridworld(GridworldSpec(n, intended_move_prob=1.0))
    assert det.transition[centre, RIGHT, centre + 1] == 1.0
    assert det.transition[centre, DOWN].max() == 1.0


def test_gridworld_reproducible_and_in_range():
    a = make_gridworld(GridworldSpec(6, seed=3))
    b = make_gridworld(GridworldSpec(6, seed=3))
    assert np.array_equal(a.reward, b.reward) and np.array_equal(a.cost, b.cost)
    assert a.reward.min() >= 0 and a.reward.max() <= 1 and a.cost.min() >= 0
    assert not np.array_equal(a.reward, make_gridworld(GridworldSpec(6, seed=4)).reward)


@pytest.mark.parametrize("kwargs", [{"n": 1}, {"n": 3, "intended_move_prob": 1.5}])
def test_gridworld_spec_validation(kwargs):
    with pytest.raises(ValueError):
        GridworldSpec(**kwargs)


def test_random_model_cases():
    m = make_random_cmdp(1, 1, 1, seed=0)
    assert m.transition.shape == (1, 1, 1) and m.transition[0, 0, 0] == 1.0
    assert np.array_equal(make_random_cmdp(3, 2, 3, 9).transition, make_random_cmdp(3, 2, 3, 9).transition)
    assert all(validate_cmdp(make_random_cmdp(3, 2, 3, s)) == [] for s in range(100))


def test_quantized_transitions_are_valid():
    m = quantize_transitions(make_random_cmdp(4, 3, 2, seed=1), 20)
    assert validate_cmdp(m) == []
    assert np.allclose(m.transition * 20, np.rint(m.transition * 20), atol=1e-12)


def test_target_policy_family():
    model = make_gridworld(GridworldSpec(5, seed=1))
    pols = make_target_policies(model, 30, seed=2)
    assert len(pols) == 30
    assert all(np.all(p.probs > 0) for p in pols)
    hot = softmax_policy(np.random.default_rng(0).normal(size=(2, 3, 4)), 1e12)
    assert np.allclose(hot.probs, 0.25, atol=1e-9)
    assert len(target_temperatures(1)) == 1


def test_target_values_are_distinct():
    distinct = 0
    for seed in range(20):
        model = make_gridworld(GridworldSpec(5, seed=seed))
        vals = np.array([expected_return(model, p) for p in make_target_policies(model, 30, seed)])
        distinct += len(np.unique(vals)) == 30
    assert distinct >= 19
