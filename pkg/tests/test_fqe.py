import numpy as np
import pytest

from safeope import oracle
from safeope.cmdp import Cmdp, TabularPolicy, make_rng
from safeope.dp import extended_reward, reward_values, cost_values
from safeope.envs import (GridworldSpec, make_deterministic_cmdp, make_gridworld,
                          make_random_cmdp, quantize_transitions, random_policy)
from safeope.fqe import (DatasetBackup, OfflineDataset, OfflineTuple, exact_frequency_dataset,
                         fqe_extended_reward, fqe_synthesize, fqe_values,
                         generate_offline_dataset)
from safeope.synth import SafetyConfig, synthesize_scope


def test_tuple_counting():
    model = make_random_cmdp(3, 2, 3, seed=0)
    d = generate_offline_dataset(model, [random_policy(model, 1)], 1, make_rng(0))
    assert len(d) == 3 and sorted(d.t.tolist()) == [0, 1, 2]
    assert len(generate_offline_dataset(model, [], 10, make_rng(0))) == 0


def test_coverage_matches_reachable_set():
    model = make_gridworld(GridworldSpec(3, seed=1))
    pols = [random_policy(model, k) for k in range(30)]
    d = generate_offline_dataset(model, pols, 100, make_rng(5))
    mix = TabularPolicy(np.mean([p.probs for p in pols], axis=0))
    tab = oracle.enumerate_table(model, mix.probs, model.initial_dist)
    reachable = np.zeros(model.shape, dtype=bool)
    for t in range(model.horizon):
        reachable[t, tab.states[:, t], tab.actions[:, t]] = True
    covered = d.counts > 0
    assert not np.any(covered & ~reachable)
    # Every reachable state shows up at least once.
    assert np.array_equal(covered.any(axis=2), reachable.any(axis=2))


def test_counts_and_merge_are_monotone():
    model = make_random_cmdp(3, 2, 3, seed=2)
    a = generate_offline_dataset(model, [random_policy(model, 1)], 20, make_rng(1))
    b = generate_offline_dataset(model, [random_policy(model, 2)], 20, make_rng(2))
    ab = a.merge(b)
    assert np.array_equal(ab.counts, a.counts + b.counts)
    assert np.all((ab.counts > 0) >= (a.counts > 0))
    assert ab.counts.sum() == len(ab)


def test_subsampling_keeps_a_fraction():
    model = make_random_cmdp(3, 2, 3, seed=2)
    d = generate_offline_dataset(model, [random_policy(model, 1)], 1000, make_rng(1), keep_fraction=0.5)
    assert 1300 < len(d) < 1700


def test_io_roundtrip_and_validation(tmp_path):
    model = make_random_cmdp(3, 2, 3, seed=3)
    d = generate_offline_dataset(model, [random_policy(model, 1)], 15, make_rng(1))
    d.save_csv(tmp_path / "d.csv")
    d.save_json(tmp_path / "d.json")
    for back in (OfflineDataset.load_csv(tmp_path / "d.csv", 3, 3, 2),
                 OfflineDataset.load_json(tmp_path / "d.json")):
        assert np.array_equal(back.r, d.r) and np.array_equal(back.s_next, d.s_next)
    with pytest.raises(ValueError, match="s_next"):
        OfflineDataset.from_tuples([OfflineTuple(0, 0, 0, 1.0, 0.0, 5)], 1, 3, 2)
    with pytest.raises(ValueError, match="c\\[0\\]"):
        OfflineDataset.from_tuples([OfflineTuple(0, 0, 0, 1.0, -1.0, 0)], 1, 3, 2)
    with pytest.raises(ValueError, match="header"):
        (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
        OfflineDataset.load_csv(tmp_path / "bad.csv", 1, 3, 2)


@pytest.mark.parametrize("seed", range(4))
def test_plug_in_consistency(seed):
    model = quantize_transitions(make_random_cmdp(3, 2, 3, seed), 20)
    pi = random_policy(model, seed + 1)
    mu = random_policy(model, seed + 2)
    d = exact_frequency_dataset(model, 20)
    q, v = reward_values(model, pi)
    qh, vh = fqe_values(d, pi)
    assert np.max(np.abs(qh - q)) <= 1e-10 and np.max(np.abs(vh - v)) <= 1e-10
    qc, _ = cost_values(model, pi)
    assert np.max(np.abs(fqe_values(d, pi, "cost")[0] - qc)) <= 1e-10
    assert np.max(np.abs(fqe_extended_reward(d, pi, mu, qh) - extended_reward(model, pi, mu, q))) <= 1e-10


def test_exact_frequency_needs_rational_model():
    with pytest.raises(ValueError, match="multiples"):
        exact_frequency_dataset(make_random_cmdp(3, 2, 2, seed=1), 20)
    assert len(exact_frequency_dataset(make_gridworld(GridworldSpec(3)), 40)) == 3 * 9 * 4 * 40


def test_deterministic_trajectory_gives_exact_q_on_path():
    model = make_deterministic_cmdp(4, 2, 3, seed=5)
    probs = np.zeros(model.shape)
    probs[..., 1] = 1.0
    pi = TabularPolicy(probs)
    d = generate_offline_dataset(model, [pi], 1, make_rng(0))
    qh, _ = fqe_values(d, pi)
    q, _ = reward_values(model, pi)
    for t, s, a in zip(d.t, d.s, d.a):
        assert qh[t, s, a] == pytest.approx(q[t, s, a], abs=1e-12)


def test_zero_reward_data_gives_zero_extended_reward():
    model = make_random_cmdp(3, 2, 3, seed=6)
    z = Cmdp(model.transition, np.zeros_like(model.reward), model.cost, model.initial_dist, 3)
    pi = random_policy(z, 1)
    d = generate_offline_dataset(z, [pi], 50, make_rng(0))
    assert not fqe_extended_reward(d, pi, pi, fqe_values(d, pi)[0]).any()


def test_uncovered_cells_read_zero_and_fall_back_to_target():
    model = make_random_cmdp(3, 2, 2, seed=7)
    pi = random_policy(model, 1)
    only0 = TabularPolicy(np.tile([1.0, 0.0], (2, 3, 1)))
    d = generate_offline_dataset(model, [only0], 200, make_rng(0))
    backup = DatasetBackup(d)
    assert not backup.covered(0)[:, 1].any() and not backup.mean_reward(0)[:, 1].any()
    syn = fqe_synthesize(d, pi)
    assert len(syn.fallback_states) == 2 * 3
    assert np.array_equal(syn.policy.probs, pi.probs)


def test_estimates_converge_with_data():
    model = make_random_cmdp(2, 2, 3, seed=8)
    pi = random_policy(model, 9)
    logs = [random_policy(model, 100 + k) for k in range(10)]
    q, _ = reward_values(model, pi)
    d = generate_offline_dataset(model, logs, 1000, make_rng(3))
    qh, _ = fqe_values(d, pi)
    # Bootstrap standard error of q-hat over resampled tuples.
    rng = make_rng(4)
    boots = []
    for _ in range(50):
        idx = rng.integers(len(d), size=len(d))
        sub = OfflineDataset(d.horizon, 2, 2, d.t[idx], d.s[idx], d.a[idx], d.r[idx], d.c[idx], d.s_next[idx])
        boots.append(fqe_values(sub, pi)[0])
    se = np.std(boots, axis=0)
    assert np.all(np.abs(qh - q) <= 5 * se + 1e-12)


def test_offline_gap_shrinks_with_data():
    model = make_random_cmdp(2, 2, 3, seed=0)
    pi = random_policy(model, 1000)
    logs = [random_policy(model, 2000 + k) for k in range(10)]
    mu = synthesize_scope(model, pi, SafetyConfig(0.0))
    v_star = oracle.exact_moments(model, pi, mu)[1]
    gaps = []
    for n in (10, 100, 1000):
        gap = []
        for rep in range(5):
            d = generate_offline_dataset(model, logs, n, make_rng(rep, n))
            mu_hat = fqe_synthesize(d, pi, SafetyConfig(0.0)).policy
            gap.append(abs(oracle.exact_moments(model, pi, mu_hat)[1] - v_star))
        gaps.append(np.mean(gap))
    assert gaps[2] < gaps[0]
