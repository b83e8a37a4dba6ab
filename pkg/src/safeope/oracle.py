"""Brute-force trajectory enumeration.

Every positive-probability trajectory is listed with its exact probability,
and estimator moments are weighted sums over that list. Nothing here reuses
the dynamic-programming code: PDIS returns are formed from forward ratio
products rather than the backward recursion, so agreement with :mod:`dp` is
a genuine cross-check.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cmdp import Cmdp, TabularPolicy, Trajectory, check_policy_shape

DEFAULT_CAP = 10 ** 7


class EnumerationCapError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class WeightedTrajectory:
    trajectory: Trajectory
    probability: float


@dataclass(frozen=True, eq=False)
class TrajectoryTable:
    """All trajectories of one enumeration, one row each; arrays are (N, T)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    prob: np.ndarray

    def __len__(self) -> int:
        return len(self.prob)


def enumerate_table(model: Cmdp, policy: np.ndarray, start: np.ndarray,
                    first_action: int | None = None, cap: int = DEFAULT_CAP) -> TrajectoryTable:
    """Enumerate trajectories of ``len(policy)`` steps from ``start`` (dist over S).

    Branches are pruned only where a probability is exactly zero. With
    ``first_action`` the first action is fixed (probability one).
    """
    H = len(policy)
    S, A = model.num_states, model.num_actions
    if float(S * A) ** H > cap:
        raise EnumerationCapError(f"(S*A)^T = {(S * A) ** H} exceeds cap {cap}")
    s = np.flatnonzero(start > 0)
    prob = start[s].astype(float)
    hist_s = s[:, None]
    hist_a = np.empty((len(s), 0), dtype=np.int64)
    for k in range(H):
        cur = hist_s[:, -1]
        pa = policy[k][cur]
        if k == 0 and first_action is not None:
            pa = np.zeros_like(pa)
            pa[:, first_action] = 1.0
        rows, acts = np.nonzero(pa > 0)
        prob = prob[rows] * pa[rows, acts]
        hist_s, hist_a = hist_s[rows], np.column_stack([hist_a[rows], acts])
        if k == H - 1:
            break
        ps = model.transition[hist_s[:, -1], acts]
        rows, nxt = np.nonzero(ps > 0)
        prob = prob[rows] * ps[rows, nxt]
        hist_s, hist_a = np.column_stack([hist_s[rows], nxt]), hist_a[rows]
    return TrajectoryTable(
        states=hist_s, actions=hist_a,
        rewards=model.reward[hist_s, hist_a], costs=model.cost[hist_s, hist_a],
        prob=prob)


def enumerate_trajectories(model: Cmdp, policy: TabularPolicy,
                           cap: int = DEFAULT_CAP) -> list[WeightedTrajectory]:
    """Every positive-probability episode under ``policy`` with its probability."""
    check_policy_shape(model, policy)
    tab = enumerate_table(model, policy.probs, model.initial_dist, cap=cap)
    return [WeightedTrajectory(Trajectory(tab.states[i], tab.actions[i], tab.rewards[i], tab.costs[i]),
                               float(tab.prob[i]))
            for i in range(len(tab))]


def pdis_returns(tab: TrajectoryTable, target: np.ndarray, behavior: np.ndarray,
                 skip_first_ratio: bool = False) -> np.ndarray:
    """``sum_k rho_{0:k} R_{k+1}`` per row, with cumulative ratio products."""
    k = np.arange(tab.states.shape[1])
    ratios = target[k, tab.states, tab.actions] / behavior[k, tab.states, tab.actions]
    if skip_first_ratio:
        ratios[:, 0] = 1.0
    return np.sum(np.cumprod(ratios, axis=1) * tab.rewards, axis=1)


def _moments(x: np.ndarray, p: np.ndarray) -> tuple[float, float]:
    mean = float(p @ x)
    return mean, float(p @ (x - mean) ** 2)


def exact_moments(model: Cmdp, target: TabularPolicy, behavior: TabularPolicy,
                  cap: int = DEFAULT_CAP) -> tuple[float, float, float]:
    """Exact (mean, variance) of the episode PDIS return and expected total cost.

    Trajectories are drawn by ``behavior``, so the cost is ``J^c(behavior)``.
    """
    check_policy_shape(model, target, "target")
    check_policy_shape(model, behavior, "behavior")
    tab = enumerate_table(model, behavior.probs, model.initial_dist, cap=cap)
    g = pdis_returns(tab, target.probs, behavior.probs)
    mean, var = _moments(g, tab.prob)
    return mean, var, float(tab.prob @ tab.costs.sum(axis=1))


def total_probability(model: Cmdp, policy: TabularPolicy, cap: int = DEFAULT_CAP) -> float:
    return float(enumerate_table(model, policy.probs, model.initial_dist, cap=cap).prob.sum())


def _onehot(n: int, i: int) -> np.ndarray:
    e = np.zeros(n)
    e[i] = 1.0
    return e


def conditional_moments(model: Cmdp, target: TabularPolicy, behavior: TabularPolicy,
                        t: int, s: int, cap: int = DEFAULT_CAP) -> tuple[float, float]:
    """Mean and variance of the PDIS return from time ``t`` given ``S_t = s``."""
    tab = enumerate_table(model, behavior.probs[t:], _onehot(model.num_states, s), cap=cap)
    return _moments(pdis_returns(tab, target.probs[t:], behavior.probs[t:]), tab.prob)


def state_variances(model: Cmdp, target: TabularPolicy, behavior: TabularPolicy,
                    cap: int = DEFAULT_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Per-(t, s) conditional means and variances of the PDIS return."""
    T, S = model.horizon, model.num_states
    mean, var = np.zeros((T, S)), np.zeros((T, S))
    for t in range(T):
        for s in range(S):
            mean[t, s], var[t, s] = conditional_moments(model, target, behavior, t, s, cap)
    return mean, var


def action_values(model: Cmdp, policy: TabularPolicy, cap: int = DEFAULT_CAP) -> np.ndarray:
    """``E[G_t | S_t = s, A_t = a]`` under ``policy`` by enumeration, shape (T, S, A)."""
    T, S, A = model.shape
    q = np.zeros((T, S, A))
    for t in range(T):
        for s in range(S):
            for a in range(A):
                tab = enumerate_table(model, policy.probs[t:], _onehot(S, s), first_action=a, cap=cap)
                q[t, s, a] = tab.prob @ tab.rewards.sum(axis=1)
    return q


def expected_cost(model: Cmdp, policy: TabularPolicy, cap: int = DEFAULT_CAP) -> float:
    tab = enumerate_table(model, policy.probs, model.initial_dist, cap=cap)
    return float(tab.prob @ tab.costs.sum(axis=1))


def extended_reward_by_definition(model: Cmdp, target: TabularPolicy,
                                  future_behavior: TabularPolicy,
                                  cap: int = DEFAULT_CAP) -> np.ndarray:
    """Extended reward from its variance definition.

    ``r_tilde_t(s, a) = nu_t(s, a) + q_t(s, a)**2 + E_{s'}[Var(G^PDIS_{t+1} | s')]``
    (``r**2`` at the last step) where ``nu`` is the variance of the next
    state's value, and every ingredient comes from enumeration.
    """
    T, S, A = model.shape
    q = action_values(model, target, cap)
    v_next = np.zeros((T, S))
    var_next = np.zeros((T, S))
    for t in range(1, T):
        for s in range(S):
            v_next[t, s] = conditional_moments(model, target, target, t, s, cap)[0]
            var_next[t, s] = conditional_moments(model, target, future_behavior, t, s, cap)[1]
    out = np.zeros((T, S, A))
    P = model.transition
    for t in range(T):
        if t == T - 1:
            out[t] = model.reward ** 2
            continue
        for s in range(S):
            for a in range(A):
                p = P[s, a]
                m = p @ v_next[t + 1]
                nu = p @ (v_next[t + 1] - m) ** 2
                out[t, s, a] = nu + q[t, s, a] ** 2 + p @ var_next[t + 1]
    return out


def total_variance_from_states(initial_dist: np.ndarray, mean0: np.ndarray, var0: np.ndarray) -> float:
    """Law of total variance over the initial state."""
    m = initial_dist @ mean0
    return float(initial_dist @ var0 + initial_dist @ (mean0 - m) ** 2)


def dump_csv(model: Cmdp, policy: TabularPolicy, path, cap: int = DEFAULT_CAP) -> None:
    """Write the enumeration as CSV (probability, then s,a per step)."""
    tab = enumerate_table(model, policy.probs, model.initial_dist, cap=cap)
    T = tab.states.shape[1]
    header = ["probability"] + [f"{x}{k}" for k in range(T) for x in ("s", "a")]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(tab)):
            cells = [repr(float(tab.prob[i]))]
            for k in range(T):
                cells += [str(tab.states[i, k]), str(tab.actions[i, k])]
            fh.write(",".join(cells) + "\n")
