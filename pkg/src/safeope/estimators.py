"""Per-decision importance sampling and on-policy Monte Carlo estimation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cmdp import Cmdp, Sampler, TabularPolicy, Trajectory, TrajectoryBatch, check_policy_shape


class ZeroBehaviorProbabilityError(ValueError):
    def __init__(self, t: int):
        super().__init__(f"behavior probability of the action taken at step {t} is zero")
        self.t = t


def pdis_return(trajectory: Trajectory, target: TabularPolicy, behavior: TabularPolicy) -> float:
    """PDIS return of one episode via ``G_t = rho_t (R_{t+1} + G_{t+1})``."""
    g = 0.0
    for t in reversed(range(len(trajectory))):
        s, a = int(trajectory.states[t]), int(trajectory.actions[t])
        b = behavior.probs[t, s, a]
        if b <= 0:
            raise ZeroBehaviorProbabilityError(t)
        g = target.probs[t, s, a] / b * (float(trajectory.rewards[t]) + g)
    return g


def pdis_returns(batch: TrajectoryBatch, target: TabularPolicy, behavior: TabularPolicy,
                 log_space: bool = False) -> np.ndarray:
    """PDIS return of every episode in ``batch``, shape (n,).

    ``log_space`` accumulates the ratio products as sums of logs, which keeps
    very long horizons from overflowing.
    """
    n, T = batch.states.shape
    k = np.arange(T)
    b = behavior.probs[k, batch.states, batch.actions]
    if np.any(b <= 0):
        raise ZeroBehaviorProbabilityError(int(np.argwhere(b <= 0)[0, 1]))
    ratio = target.probs[k, batch.states, batch.actions] / b
    if log_space:
        with np.errstate(divide="ignore"):
            logw = np.cumsum(np.log(ratio), axis=1)
        return np.sum(np.exp(logw) * batch.rewards, axis=1)
    g = np.zeros(n)
    for t in reversed(range(T)):
        g = ratio[:, t] * (batch.rewards[:, t] + g)
    return g


class RunningMoments:
    """Single-pass mean and variance (Welford; batches merged with Chan's rule)."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, x: float) -> None:
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def update_batch(self, xs) -> None:
        xs = np.asarray(xs, dtype=float)
        nb = len(xs)
        if nb == 0:
            return
        mb = float(xs.mean())
        m2b = float(np.sum((xs - mb) ** 2))
        n = self.n + nb
        d = mb - self.mean
        self.mean += d * nb / n
        self.m2 += m2b + d * d * self.n * nb / n
        self.n = n

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0


@dataclass(frozen=True)
class EvalResult:
    mean_return: float
    sample_variance: float
    std_error: float
    mean_trajectory_cost: float
    num_episodes: int


def evaluate(model: Cmdp, target: TabularPolicy, behavior: TabularPolicy, episodes: int,
             rng: np.random.Generator, chunk: int = 4096) -> EvalResult:
    """Estimate ``J(target)`` from ``episodes`` episodes executed by ``behavior``.

    Costs are the raw costs actually incurred by the behavior policy; they are
    not importance weighted.
    """
    if episodes < 1:
        raise ValueError("episodes must be positive")
    check_policy_shape(model, target, "target")
    check_policy_shape(model, behavior, "behavior")
    sampler = Sampler(model)
    ret, cost = RunningMoments(), RunningMoments()
    left = episodes
    while left:
        n = min(chunk, left)
        batch = sampler.sample(behavior, n, rng)
        ret.update_batch(pdis_returns(batch, target, behavior))
        cost.update_batch(batch.costs.sum(axis=1))
        left -= n
    var = max(ret.variance, 0.0)
    return EvalResult(ret.mean, var, math.sqrt(var / episodes), cost.mean, episodes)


@dataclass(frozen=True, eq=False)
class ErrorCurves:
    """Per-run, per-episode estimator output; every array has shape (runs, episodes)."""

    returns: np.ndarray
    costs: np.ndarray
    ground_truth: float

    @property
    def running_mean(self) -> np.ndarray:
        k = np.arange(1, self.returns.shape[1] + 1)
        return np.cumsum(self.returns, axis=1) / k

    @property
    def abs_error(self) -> np.ndarray:
        return np.abs(self.running_mean - self.ground_truth)

    @property
    def cum_cost(self) -> np.ndarray:
        return np.cumsum(self.costs, axis=1)

    def normalized(self, scale: float) -> np.ndarray:
        return self.abs_error / scale


def error_curve(model: Cmdp, target: TabularPolicy, behavior: TabularPolicy, episodes: int,
                runs: int, rng: np.random.Generator, ground_truth: float) -> ErrorCurves:
    """Absolute error of the running PDIS mean after every episode, per run.

    Normalize with the on-policy estimator's mean first-episode error
    (``ErrorCurves.normalized``) and re-index by ``cum_cost`` with
    :func:`cost_indexed`.
    """
    sampler = Sampler(model)
    rets = np.empty((runs, episodes))
    costs = np.empty((runs, episodes))
    for r in range(runs):
        batch = sampler.sample(behavior, episodes, rng)
        rets[r] = pdis_returns(batch, target, behavior)
        costs[r] = batch.costs.sum(axis=1)
    return ErrorCurves(rets, costs, ground_truth)


def cost_indexed(errors: np.ndarray, cum_cost: np.ndarray, budgets: np.ndarray) -> np.ndarray:
    """Error held since the last episode that finished within each budget.

    ``errors`` and ``cum_cost`` are (runs, episodes); returns (runs, len(budgets)),
    NaN where no episode has finished yet.
    """
    out = np.full((errors.shape[0], len(budgets)), np.nan)
    for r in range(errors.shape[0]):
        idx = np.searchsorted(cum_cost[r], budgets, side="right") - 1
        ok = idx >= 0
        out[r, ok] = errors[r, idx[ok]]
    return out
