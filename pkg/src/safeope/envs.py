"""Seeded model constructors and target-policy generation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cmdp import Cmdp, TabularPolicy, make_rng
from .dp import optimal_q, reward_values

UP, DOWN, LEFT, RIGHT = range(4)
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}


@dataclass(frozen=True)
class GridworldSpec:
    """``n x n`` grid with horizon ``n``; the agent starts in the top-left cell."""

    n: int
    seed: int = 0
    intended_move_prob: float = 0.9

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"gridworld needs n >= 2, got {self.n}")
        if not 0.0 <= self.intended_move_prob <= 1.0:
            raise ValueError("intended_move_prob must lie in [0, 1]")


def _neighbor(n: int, cell: int, move: int) -> int:
    row, col = divmod(cell, n)
    dr, dc = _MOVES[move]
    r2, c2 = row + dr, col + dc
    if 0 <= r2 < n and 0 <= c2 < n:
        return r2 * n + c2
    return cell


def make_gridworld(spec: GridworldSpec) -> Cmdp:
    """Gridworld with noisy moves and i.i.d. uniform [0, 1] rewards and costs.

    An action moves in its direction with probability ``intended_move_prob``
    and otherwise in a direction drawn uniformly from all four (the intended
    one included). Moves into a wall leave the agent in place.
    """
    n = spec.n
    S = n * n
    p_move = spec.intended_move_prob
    slip = (1.0 - p_move) / 4.0
    P = np.zeros((S, 4, S))
    for s in range(S):
        for a in range(4):
            P[s, a, _neighbor(n, s, a)] += p_move
            for b in range(4):
                P[s, a, _neighbor(n, s, b)] += slip
    rng = make_rng(spec.seed)
    reward = rng.uniform(0.0, 1.0, size=(S, 4))
    cost = rng.uniform(0.0, 1.0, size=(S, 4))
    p0 = np.zeros(S)
    p0[0] = 1.0
    return Cmdp(transition=P, reward=reward, cost=cost, initial_dist=p0, horizon=n)


def make_random_cmdp(num_states: int, num_actions: int, horizon: int, seed: int) -> Cmdp:
    """Dirichlet(1) transitions, rewards U[-1, 1], costs U[0, 1], uniform start."""
    if min(num_states, num_actions, horizon) < 1:
        raise ValueError("sizes must be >= 1")
    rng = make_rng(seed)
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    P /= P.sum(axis=2, keepdims=True)
    return Cmdp(
        transition=P,
        reward=rng.uniform(-1.0, 1.0, size=(num_states, num_actions)),
        cost=rng.uniform(0.0, 1.0, size=(num_states, num_actions)),
        initial_dist=np.full(num_states, 1.0 / num_states),
        horizon=horizon,
    )


def make_deterministic_cmdp(num_states: int, num_actions: int, horizon: int, seed: int) -> Cmdp:
    """One-hot transitions and a fixed start state; returns are then constant
    under any deterministic policy."""
    rng = make_rng(seed)
    nxt = rng.integers(num_states, size=(num_states, num_actions))
    P = np.zeros((num_states, num_actions, num_states))
    np.put_along_axis(P, nxt[..., None], 1.0, axis=2)
    p0 = np.zeros(num_states)
    p0[0] = 1.0
    return Cmdp(P, rng.uniform(-1.0, 1.0, size=(num_states, num_actions)),
                rng.uniform(0.0, 1.0, size=(num_states, num_actions)), p0, horizon)


def random_policy(model: Cmdp, seed: int, concentration: float = 1.0) -> TabularPolicy:
    """Strictly positive Dirichlet-distributed rows."""
    rng = make_rng(seed)
    rows = rng.dirichlet(np.full(model.num_actions, concentration), size=model.shape[:2])
    rows = np.maximum(rows, 1e-3)
    return TabularPolicy.from_rows(rows)


def greedy_policy(model: Cmdp) -> TabularPolicy:
    q = optimal_q(model)
    probs = np.zeros(model.shape)
    np.put_along_axis(probs, q.argmax(axis=2)[..., None], 1.0, axis=2)
    return TabularPolicy(probs)


def softmax_policy(q: np.ndarray, temperature: float) -> TabularPolicy:
    """Softmax over ``q`` per (t, s), with ``temperature`` measured in units of
    that row's value range so every row is equally greedy."""
    spread = q.max(axis=2, keepdims=True) - q.min(axis=2, keepdims=True)
    spread = np.where(spread > 0, spread, 1.0)
    z = (q - q.max(axis=2, keepdims=True)) / (temperature * spread)
    e = np.exp(z)
    return TabularPolicy(e / e.sum(axis=2, keepdims=True))


def target_temperatures(count: int, high: float = 10.0, low: float = 0.05) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    if count == 1:
        return np.array([np.sqrt(high * low)])
    return np.geomspace(high, low, count)


def make_target_policies(model: Cmdp, count: int, seed: int = 0) -> list[TabularPolicy]:
    """Policies from near-uniform to near-greedy.

    Softmax over the optimal action values at log-spaced temperatures; the
    seed adds a small per-policy jitter to the temperature so that repeated
    calls with different seeds give different policy sets.
    """
    q = optimal_q(model)
    temps = target_temperatures(count)
    if count > 1:
        rng = make_rng(seed)
        ratio = (temps[0] / temps[-1]) ** (1.0 / (count - 1))
        temps = temps * ratio ** rng.uniform(-0.25, 0.25, size=count)
    return [softmax_policy(q, tau) for tau in temps]


def make_enlarged_space_case(seed: int) -> tuple[Cmdp, TabularPolicy, TabularPolicy, tuple[int, int, int]]:
    """A 3-state, 2-action, horizon-2 model where the target plays an action
    with zero action value but nonzero downstream variance.

    Returns ``(model, target, behavior, (t, s, a))`` where ``behavior`` drops
    exactly that action. The behavior lies in the enlarged space but does not
    cover the target.
    """
    rng = make_rng(seed)
    S, A = 3, 2
    P = rng.dirichlet(np.ones(S), size=(S, A))
    # (s=0, a=0) never returns to state 0, so its successors' values do not
    # depend on r(0, .).
    P[0, 0] = np.array([0.0, *rng.dirichlet(np.ones(S - 1))])
    reward = rng.uniform(-1.0, 1.0, size=(S, A))
    cost = rng.uniform(0.0, 1.0, size=(S, A))
    target = TabularPolicy.from_rows(rng.uniform(0.2, 1.0, size=(2, S, A)))
    model = Cmdp(P, reward, cost, np.full(S, 1.0 / S), 2)
    _, v = reward_values(model, target)
    reward[0, 0] = -P[0, 0] @ v[1]
    model = Cmdp(P, reward, cost, np.full(S, 1.0 / S), 2)
    probs = target.probs.copy()
    probs[0, 0] = [0.0, 1.0]
    return model, target, TabularPolicy(probs), (0, 0, 0)


def quantize_transitions(model: Cmdp, resolution: int) -> Cmdp:
    """Round transition rows to multiples of ``1 / resolution`` (largest-remainder
    rounding, so rows still sum to one)."""
    scaled = model.transition * resolution
    k = np.floor(scaled)
    short = (resolution - k.sum(axis=2)).astype(np.int64)
    order = np.argsort(-(scaled - k), axis=2, kind="stable")
    ranks = np.argsort(order, axis=2, kind="stable")
    k = k + (ranks < short[..., None])
    return Cmdp(k / resolution, model.reward, model.cost, model.initial_dist, model.horizon)
