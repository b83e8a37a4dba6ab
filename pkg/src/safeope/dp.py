"""Exact backward dynamic programming for values, cost values and the
extended reward that drives behavior-policy synthesis.

All recursions are written against a *backup*: an object giving, for a time
step ``t``, the conditional means of ``r``, ``r**2``, ``c`` and of any function
of the next state, per ``(s, a)``. :class:`ModelBackup` takes those
expectations under a known model; the offline module supplies a tuple-averaging
backup with the same surface, which is what makes tabular FQE a drop-in
replacement for exact DP.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cmdp import ZERO_TOL, Cmdp, TabularPolicy, check_policy_shape


class OutsideEnlargedSpaceError(ValueError):
    """A behavior policy drops an action whose ``pi * q`` is nonzero."""

    def __init__(self, t: int, s: int, a: int):
        super().__init__(
            f"behavior puts zero mass on (t={t}, s={s}, a={a}) where pi*q != 0; "
            "the importance ratio is undefined")
        self.t, self.s, self.a = t, s, a


class ModelBackup:
    """Conditional expectations under a known :class:`Cmdp`."""

    def __init__(self, model: Cmdp):
        self.model = model
        self.horizon = model.horizon
        self.num_states = model.num_states
        self.num_actions = model.num_actions
        self._r2 = model.reward ** 2

    def covered(self, t: int) -> np.ndarray:
        return np.ones((self.num_states, self.num_actions), dtype=bool)

    def mean_reward(self, t: int) -> np.ndarray:
        return self.model.reward

    def mean_sq_reward(self, t: int) -> np.ndarray:
        return self._r2

    def mean_cost(self, t: int) -> np.ndarray:
        return self.model.cost

    def expect_next(self, t: int, values: np.ndarray) -> np.ndarray:
        return self.model.transition @ values


def backup_values(backup, policy: np.ndarray, signal: str = "reward"):
    """Finite-horizon ``(q, v)`` of ``policy`` (array (T, S, A)) for a signal."""
    T, S, A = backup.horizon, backup.num_states, backup.num_actions
    mean = backup.mean_reward if signal == "reward" else backup.mean_cost
    q = np.zeros((T, S, A))
    v = np.zeros((T, S))
    nxt = np.zeros(S)
    for t in reversed(range(T)):
        q[t] = mean(t) if t == T - 1 else mean(t) + backup.expect_next(t, nxt)
        v[t] = np.sum(policy[t] * q[t], axis=1)
        nxt = v[t]
    return q, v


def weighted_ratio_sum(t: int, target: np.ndarray, behavior: np.ndarray,
                       r_tilde: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-state ``sum_a pi_t(a|s)**2 / mu_t(a|s) * r_tilde_t(s, a)``.

    Actions the behavior never takes contribute nothing, which is exact as
    long as ``pi * q`` vanishes there; otherwise the sum has no meaning and an
    :class:`OutsideEnlargedSpaceError` names the offending cell.
    ``target``, ``behavior``, ``r_tilde`` and ``q`` are (S, A) slices at ``t``.
    """
    num = target ** 2 * r_tilde
    dropped = behavior <= 0
    bad = dropped & (num > 0) & (np.abs(target * q) > ZERO_TOL)
    if np.any(bad):
        s, a = np.argwhere(bad)[0]
        raise OutsideEnlargedSpaceError(t, int(s), int(a))
    safe = np.where(dropped, 1.0, behavior)
    return np.sum(np.where(dropped, 0.0, num / safe), axis=1)


def extended_reward_step(backup, t: int, q_t: np.ndarray, future_term=None) -> np.ndarray:
    """``r_tilde_t`` from the current ``q_t`` and the next step's ratio sum.

    ``future_term`` is the (S,) output of :func:`weighted_ratio_sum` at
    ``t + 1`` (``None`` at the last step).
    """
    if future_term is None:
        return backup.mean_sq_reward(t).copy()
    return (2.0 * q_t * backup.mean_reward(t) - backup.mean_sq_reward(t)
            + backup.expect_next(t, future_term))


def backup_extended_reward(backup, target: np.ndarray, future_behavior: np.ndarray,
                           q: np.ndarray, clamp: bool = False) -> np.ndarray:
    T = backup.horizon
    r_tilde = np.zeros_like(q)
    future = None
    for t in reversed(range(T)):
        r_tilde[t] = extended_reward_step(backup, t, q[t], future)
        if clamp:
            np.maximum(r_tilde[t], 0.0, out=r_tilde[t])
        future = weighted_ratio_sum(t, target[t], future_behavior[t], r_tilde[t], q[t])
    return r_tilde


# -- operations on a known model ------------------------------------------------

def reward_values(model: Cmdp, policy: TabularPolicy):
    """``(q, v)`` of the expected remaining reward under ``policy``."""
    check_policy_shape(model, policy)
    return backup_values(ModelBackup(model), policy.probs, "reward")


def cost_values(model: Cmdp, policy: TabularPolicy):
    """``(q_cost, v_cost)`` of the expected remaining cost under ``policy``."""
    check_policy_shape(model, policy)
    return backup_values(ModelBackup(model), policy.probs, "cost")


def next_state_value_variance(model: Cmdp, v: np.ndarray) -> np.ndarray:
    """Variance of ``v_{t+1}(S_{t+1})`` given ``(S_t, A_t)``; zero at the last step."""
    T = model.horizon
    nu = np.zeros((T, model.num_states, model.num_actions))
    P = model.transition
    for t in range(T - 1):
        m1 = P @ v[t + 1]
        nu[t] = np.maximum(P @ v[t + 1] ** 2 - m1 ** 2, 0.0)
    return nu


def extended_reward(model: Cmdp, target: TabularPolicy, future_behavior: TabularPolicy,
                    q: np.ndarray) -> np.ndarray:
    """Extended reward by backward recursion.

    ``r_tilde[T-1] = r**2`` and, for earlier steps,
    ``r_tilde[t] = 2 q r - r**2 + E_{s'}[sum_a' pi**2 / mu * r_tilde[t+1]]``
    with ``mu = future_behavior``. ``q`` must be the target's action values.
    """
    check_policy_shape(model, target, "target")
    check_policy_shape(model, future_behavior, "future_behavior")
    return backup_extended_reward(ModelBackup(model), target.probs, future_behavior.probs,
                                  np.asarray(q, dtype=float))


def check_enlarged_space(target: TabularPolicy, behavior: TabularPolicy, q: np.ndarray) -> None:
    bad = (behavior.probs <= 0) & (np.abs(target.probs * q) > ZERO_TOL)
    if np.any(bad):
        t, s, a = np.argwhere(bad)[0]
        raise OutsideEnlargedSpaceError(int(t), int(s), int(a))


def pdis_variance_closed_form(model: Cmdp, target: TabularPolicy,
                              behavior: TabularPolicy) -> np.ndarray:
    """Per-(t, s) variance of the PDIS return started at ``(t, s)``.

    Uses ``V_t(s) = sum_a pi**2 / mu * r_tilde_t(s, a) - v_t(s)**2`` where the
    extended reward is built with ``behavior`` as the future policy.
    """
    q, v = reward_values(model, target)
    check_enlarged_space(target, behavior, q)
    r_tilde = extended_reward(model, target, behavior, q)
    var = np.empty_like(v)
    for t in range(model.horizon):
        var[t] = weighted_ratio_sum(t, target.probs[t], behavior.probs[t], r_tilde[t], q[t]) - v[t] ** 2
    return var


def total_variance(model: Cmdp, target: TabularPolicy, behavior: TabularPolicy) -> float:
    """Variance of the PDIS return of a whole episode (initial state drawn from p0)."""
    var0 = pdis_variance_closed_form(model, target, behavior)[0]
    _, v = reward_values(model, target)
    p0 = model.initial_dist
    mean = p0 @ v[0]
    return float(p0 @ var0 + p0 @ v[0] ** 2 - mean ** 2)


def expected_return(model: Cmdp, policy: TabularPolicy) -> float:
    """``J(policy) = sum_s p0(s) v_0(s)``."""
    return float(model.initial_dist @ reward_values(model, policy)[1][0])


def expected_cost(model: Cmdp, policy: TabularPolicy) -> float:
    """``J^c(policy)``, the expected total cost of executing ``policy``."""
    return float(model.initial_dist @ cost_values(model, policy)[1][0])


def optimal_q(model: Cmdp) -> np.ndarray:
    """Action values of the reward-maximizing (greedy) policy, shape (T, S, A)."""
    T = model.horizon
    q = np.zeros(model.shape)
    nxt = np.zeros(model.num_states)
    for t in reversed(range(T)):
        q[t] = model.reward + (model.transition @ nxt if t < T - 1 else 0.0)
        nxt = q[t].max(axis=1)
    return q


@dataclass(frozen=True, eq=False)
class ValueTables:
    """All value-like tables for a target policy and a behavior future."""

    q: np.ndarray
    v: np.ndarray
    q_cost: np.ndarray
    v_cost: np.ndarray
    nu: np.ndarray
    r_tilde: np.ndarray

    def to_dict(self) -> dict:
        return {"format": "safeope.values/1",
                **{k: getattr(self, k).tolist()
                   for k in ("q", "v", "q_cost", "v_cost", "nu", "r_tilde")}}

    @classmethod
    def from_dict(cls, d: dict) -> "ValueTables":
        if d.get("format") != "safeope.values/1":
            raise ValueError(f"not a value-table document (format={d.get('format')!r})")
        return cls(**{k: np.asarray(d[k], dtype=float)
                      for k in ("q", "v", "q_cost", "v_cost", "nu", "r_tilde")})


def value_tables(model: Cmdp, target: TabularPolicy,
                 behavior: TabularPolicy | None = None) -> ValueTables:
    """Exact tables for ``target``; ``r_tilde`` uses ``behavior`` (default: target)."""
    behavior = target if behavior is None else behavior
    q, v = reward_values(model, target)
    qc, vc = cost_values(model, target)
    return ValueTables(q=q, v=v, q_cost=qc, v_cost=vc,
                       nu=next_state_value_variance(model, v),
                       r_tilde=extended_reward(model, target, behavior, q))
