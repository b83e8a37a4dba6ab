"""Finite-horizon constrained MDPs, tabular policies, trajectories and sampling.

States and actions are dense 0-based indices. Tensors are stored as read-only
numpy arrays so models and policies can be shared freely.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

ZERO_TOL = 1e-12
ROW_SUM_TOL = 1e-12

CMDP_FORMAT = "safeope.cmdp/1"
POLICY_FORMAT = "safeope.policy/1"


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator (Philox) for ``seed`` and an optional spawn key.

    Distinct keys give statistically independent streams, so parallel runs can
    be seeded as ``make_rng(seed, policy, run)`` without coordination.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class Cmdp:
    """Finite-horizon constrained MDP.

    Parameters
    ----------
    transition : array, shape (S, A, S)
        ``transition[s, a, s2]`` is the probability of moving to ``s2``.
    reward : array, shape (S, A)
    cost : array, shape (S, A)
        Nonnegative per-step cost.
    initial_dist : array, shape (S,)
    horizon : int
        Number of decisions per episode (``T``).

    The constructor only checks shapes; use :func:`validate_cmdp` for the
    probabilistic invariants.
    """

    transition: np.ndarray
    reward: np.ndarray
    cost: np.ndarray
    initial_dist: np.ndarray
    horizon: int

    def __post_init__(self):
        for name in ("transition", "reward", "cost", "initial_dist"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "horizon", int(self.horizon))
        P = self.transition
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if self.reward.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {self.reward.shape}")
        if self.cost.shape != (S, A):
            raise ValueError(f"cost must have shape {(S, A)}, got {self.cost.shape}")
        if self.initial_dist.shape != (S,):
            raise ValueError(f"initial_dist must have shape {(S,)}, got {self.initial_dist.shape}")

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        """``(T, S, A)``, the shape every policy for this model must have."""
        return (self.horizon, self.num_states, self.num_actions)

    def to_dict(self) -> dict:
        return {
            "format": CMDP_FORMAT,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "cost": self.cost.tolist(),
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Cmdp":
        if d.get("format") != CMDP_FORMAT:
            raise ValueError(f"not a CMDP document (format={d.get('format')!r})")
        model = cls(
            transition=d["transition"],
            reward=d["reward"],
            cost=d["cost"],
            initial_dist=d["initial_dist"],
            horizon=d["horizon"],
        )
        if (model.num_states, model.num_actions) != (d["num_states"], d["num_actions"]):
            raise ValueError("declared sizes do not match tensor shapes")
        problems = validate_cmdp(model)
        if problems:
            raise ValueError("invalid CMDP: " + "; ".join(problems))
        return model


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Time-indexed action distributions, ``probs[t, s, a]``."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 3:
            raise ValueError(f"policy probs must have shape (T, S, A), got {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("policy probabilities must be finite and nonnegative")
        err = np.abs(p.sum(axis=2) - 1.0)
        if np.any(err > ROW_SUM_TOL):
            t, s = np.unravel_index(np.argmax(err), err.shape)
            raise ValueError(f"policy row (t={t}, s={s}) sums to {p[t, s].sum()!r}")
        object.__setattr__(self, "probs", p)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.probs.shape

    @classmethod
    def uniform(cls, horizon: int, num_states: int, num_actions: int) -> "TabularPolicy":
        return cls(np.full((horizon, num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def from_rows(cls, rows) -> "TabularPolicy":
        """Build a policy from unnormalized nonnegative rows."""
        rows = np.asarray(rows, dtype=float)
        return cls(rows / rows.sum(axis=2, keepdims=True))

    def to_dict(self) -> dict:
        T, S, A = self.shape
        return {"format": POLICY_FORMAT, "horizon": T, "num_states": S,
                "num_actions": A, "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularPolicy":
        if d.get("format") != POLICY_FORMAT:
            raise ValueError(f"not a policy document (format={d.get('format')!r})")
        pol = cls(d["probs"])
        if pol.shape != (d["horizon"], d["num_states"], d["num_actions"]):
            raise ValueError("declared sizes do not match tensor shape")
        return pol


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj.to_dict()))


def load_cmdp(path) -> Cmdp:
    return Cmdp.from_dict(json.loads(Path(path).read_text()))


def load_policy(path) -> TabularPolicy:
    return TabularPolicy.from_dict(json.loads(Path(path).read_text()))


def validate_cmdp(model: Cmdp) -> list[str]:
    """Return a description of every violated model invariant (empty if valid)."""
    problems = []
    if model.horizon < 1:
        problems.append(f"horizon must be >= 1, got {model.horizon}")
    P = model.transition
    for s, a in zip(*np.nonzero(np.any(P < 0, axis=2) | ~np.all(np.isfinite(P), axis=2))):
        problems.append(f"transition row (s={s}, a={a}) has negative or non-finite entries")
    sums = P.sum(axis=2)
    for s, a in zip(*np.nonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)):
        problems.append(f"transition row (s={s}, a={a}) sums to {sums[s, a]!r}, not 1")
    p0 = model.initial_dist
    if np.any(p0 < 0):
        problems.append("initial_dist has negative entries")
    if abs(p0.sum() - 1.0) > ROW_SUM_TOL:
        problems.append(f"initial_dist sums to {p0.sum()!r}, not 1")
    for s, a in zip(*np.nonzero(model.cost < 0)):
        problems.append(f"cost (s={s}, a={a}) = {model.cost[s, a]!r} is negative")
    if not np.all(np.isfinite(model.reward)):
        problems.append("reward has non-finite entries")
    return problems


def check_policy_shape(model: Cmdp, policy: TabularPolicy, name: str = "policy") -> None:
    if policy.shape != model.shape:
        raise ValueError(f"{name} has shape {policy.shape}, model expects {model.shape}")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One episode: per-step states, actions, rewards and costs (length ``T``)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    @property
    def steps(self) -> Iterator[tuple[int, int, float, float]]:
        for s, a, r, c in zip(self.states, self.actions, self.rewards, self.costs):
            yield int(s), int(a), float(r), float(c)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def total_cost(self) -> float:
        return float(self.costs.sum())


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """``n`` episodes stored column-wise; every array has shape (n, T)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.actions[i], self.rewards[i], self.costs[i])


def _cdf(probs: np.ndarray) -> np.ndarray:
    # Normalizing by the last cumulative entry makes the final positive-mass
    # bucket end at exactly 1.0, so trailing zero-mass entries are never drawn.
    cum = np.cumsum(probs, axis=-1)
    return cum / cum[..., -1:]


def _draw(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.sum(cdf_rows <= u[:, None], axis=1)


class Sampler:
    """Vectorized episode sampler with cached cumulative tables."""

    def __init__(self, model: Cmdp):
        self.model = model
        self._p0 = _cdf(model.initial_dist)[None, :]
        self._trans = _cdf(model.transition)

    def sample(self, policy: TabularPolicy, n: int, rng: np.random.Generator) -> TrajectoryBatch:
        model = self.model
        check_policy_shape(model, policy)
        T = model.horizon
        pol_cdf = _cdf(policy.probs)
        states = np.empty((n, T), dtype=np.int64)
        actions = np.empty((n, T), dtype=np.int64)
        nxt = np.empty((n, T), dtype=np.int64)
        s = _draw(np.broadcast_to(self._p0, (n, model.num_states)), rng.random(n))
        for t in range(T):
            states[:, t] = s
            a = _draw(pol_cdf[t, s], rng.random(n))
            actions[:, t] = a
            s = _draw(self._trans[s, a], rng.random(n))
            nxt[:, t] = s
        return TrajectoryBatch(
            states=states,
            actions=actions,
            rewards=model.reward[states, actions],
            costs=model.cost[states, actions],
            next_states=nxt,
        )


def sample_trajectories(model: Cmdp, policy: TabularPolicy, n: int,
                        rng: np.random.Generator) -> TrajectoryBatch:
    return Sampler(model).sample(policy, n, rng)


def sample_trajectory(model: Cmdp, policy: TabularPolicy, rng: np.random.Generator) -> Trajectory:
    """Draw one episode: ``S_0 ~ p0``, ``A_t ~ policy_t(.|S_t)``, ``S_{t+1} ~ p``."""
    return sample_trajectories(model, policy, 1, rng)[0]


def in_enlarged_space(model: Cmdp, target: TabularPolicy, behavior: TabularPolicy,
                      q_target: np.ndarray) -> bool:
    """Whether ``behavior`` only drops actions whose ``pi * q_pi`` is zero.

    Dropping such actions keeps per-decision importance sampling unbiased.
    """
    check_policy_shape(model, target, "target")
    check_policy_shape(model, behavior, "behavior")
    dropped = behavior.probs == 0
    weighted = np.abs(target.probs * np.asarray(q_target))
    return not bool(np.any(dropped & (weighted > ZERO_TOL)))
