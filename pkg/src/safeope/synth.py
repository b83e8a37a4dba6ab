"""Behavior-policy synthesis.

Per state, the safety-constrained program is::

    minimize    sum_a w_a / mu_a                    (w_a = pi_a**2 * r_tilde_a)
    subject to  mu in the simplex,  sum_a mu_a c_a <= delta

and the full behavior policy is assembled backward in time, feeding each
step's solution into the previous step's extended reward and cost values.
The unconstrained special case has the closed form ``mu ~ pi * sqrt(r_tilde)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cmdp import ZERO_TOL, Cmdp, TabularPolicy, check_policy_shape
from .dp import (ModelBackup, backup_values, extended_reward_step,
                 weighted_ratio_sum)


class InfeasibleProblemError(ValueError):
    pass


class InconsistentProblemError(ValueError):
    pass


@dataclass(frozen=True)
class SafetyConfig:
    epsilon: float = 0.0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass(frozen=True)
class SolverConfig:
    dual_tolerance: float = 1e-10
    max_bisection_iters: int = 200
    constraint_slack_tolerance: float = 1e-9

    def __post_init__(self):
        if not (self.dual_tolerance > 0 and self.constraint_slack_tolerance > 0):
            raise ValueError("solver tolerances must be positive")
        if self.max_bisection_iters < 1:
            raise ValueError("max_bisection_iters must be positive")


def safety_threshold(v_cost_target: np.ndarray, config: SafetyConfig) -> np.ndarray:
    """Per-(t, s) cost budget ``(1 + epsilon) * v^c_pi``."""
    return (1.0 + config.epsilon) * np.asarray(v_cost_target, dtype=float)


@dataclass(frozen=True, eq=False)
class StateProblem:
    """One per-state program.

    ``target`` is the target policy's row; it must satisfy the constraint,
    which guarantees feasibility and serves as the fallback when every weight
    is zero.
    """

    weights: np.ndarray
    action_costs: np.ndarray
    threshold: float
    must_support: np.ndarray
    target: np.ndarray
    slack_tolerance: float = 1e-9

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        c = np.asarray(self.action_costs, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "action_costs", c)
        object.__setattr__(self, "must_support", np.asarray(self.must_support, dtype=bool))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))
        object.__setattr__(self, "threshold", float(self.threshold))
        if w.ndim != 1 or c.shape != w.shape or self.must_support.shape != w.shape:
            raise ValueError("weights, action_costs and must_support must be equal-length vectors")
        if np.any(w < 0) or self.threshold < 0 or np.any(c < 0):
            raise ValueError("weights, costs and threshold must be nonnegative")
        if np.any(self.must_support & (w <= 0)):
            a = int(np.argmax(self.must_support & (w <= 0)))
            raise InconsistentProblemError(
                f"action {a} must be supported but has zero weight")
        target_cost = float(self.target @ c)
        if target_cost > self.threshold + self.slack_tolerance * max(1.0, abs(self.threshold)):
            raise InfeasibleProblemError(
                f"target row costs {target_cost!r} > threshold {self.threshold!r}")

    @property
    def num_actions(self) -> int:
        return len(self.weights)

    def objective(self, mu) -> float:
        mu = np.asarray(mu, dtype=float)
        pos = self.weights > 0
        if np.any(mu[pos] <= 0):
            return math.inf
        return float(np.sum(self.weights[pos] / mu[pos]))


@dataclass
class StateSolution:
    probs: np.ndarray
    objective: float
    constraint_value: float
    lam: float
    nu: float
    iterations: int
    duality_gap: float
    status: str = "optimal"

    def to_dict(self) -> dict:
        return {"probs": self.probs.tolist(), "objective": self.objective,
                "constraint_value": self.constraint_value, "lambda": self.lam,
                "nu": self.nu, "iterations": self.iterations,
                "duality_gap": self.duality_gap, "status": self.status}


class _Lagrangian:
    """Minimizer of the Lagrangian over the simplex for a fixed cost multiplier.

    For ``lam >= 0`` the stationarity condition gives
    ``mu_a = sqrt(w_a / (nu + lam * c_a))`` on positive-weight actions; the
    cheapest zero-weight action (a "cost sink") takes the leftover mass when
    ``nu = -lam * c_sink`` already leaves the positive-weight mass below one.
    Internally ``u = nu + lam * c_ref`` with ``c_ref`` the cheapest
    positive-weight cost, which avoids cancellation for large ``lam``.
    """

    def __init__(self, w, c, sink, max_iters):
        self.n = len(w)
        self.pos = [a for a in range(self.n) if w[a] > 0]
        self.w = [float(w[a]) for a in self.pos]
        self.sw = [math.sqrt(x) for x in self.w]
        self.c = [float(c[a]) for a in self.pos]
        self.c_ref = min(self.c)
        self.d = [x - self.c_ref for x in self.c]
        self.sink = sink
        self.c_all = [float(x) for x in c]
        self.max_iters = max_iters
        self.iterations = 0

    def _g(self, u, lam):
        return sum(sw / math.sqrt(u + lam * d) for sw, d in zip(self.sw, self.d))

    def _root(self, lam):
        # g(u) = 1 is solved through F(u) = g(u)**-2 - 1, which is exactly
        # linear in u when all positive-weight costs coincide. Newton steps
        # are kept inside a bisection bracket [lo, hi] with g(lo) >= 1 >= g(hi).
        lo = max(w - lam * d for w, d in zip(self.w, self.d))
        hi = sum(self.sw) ** 2
        u = hi
        for _ in range(self.max_iters):
            self.iterations += 1
            terms = [sw / math.sqrt(u + lam * d) for sw, d in zip(self.sw, self.d)]
            g = sum(terms)
            if abs(g - 1.0) <= 1e-15:
                break
            if g > 1.0:
                lo = u
            else:
                hi = u
            dg = -0.5 * sum(x / (u + lam * d) for x, d in zip(terms, self.d))
            step = u - (g ** -2 - 1.0) / (-2.0 * g ** -3 * dg)
            nxt = step if lo < step < hi else 0.5 * (lo + hi)
            if abs(nxt - u) <= 1e-16 * u or hi - lo <= 1e-16 * hi:
                u = nxt
                break
            u = nxt
        return u

    def solve(self, lam):
        """Return ``(mu, nu)`` minimizing the Lagrangian at ``lam``."""
        mu = [0.0] * self.n
        if lam == 0.0:
            total = sum(self.sw)
            for a, sw in zip(self.pos, self.sw):
                mu[a] = sw / total
            return mu, total ** 2
        if self.sink is not None:
            u_sink = lam * (self.c_ref - self.c_all[self.sink])
            g_sink = self._g(u_sink, lam)
            if g_sink <= 1.0:
                for a, sw, d in zip(self.pos, self.sw, self.d):
                    mu[a] = sw / math.sqrt(u_sink + lam * d)
                mu[self.sink] = 1.0 - g_sink
                return mu, u_sink - lam * self.c_ref
        u = self._root(lam)
        vals = [sw / math.sqrt(u + lam * d) for sw, d in zip(self.sw, self.d)]
        total = sum(vals)
        for a, x in zip(self.pos, vals):
            mu[a] = x / total
        return mu, u - lam * self.c_ref

    def cost(self, mu):
        return sum(m * c for m, c in zip(mu, self.c_all))

    def objective(self, mu):
        return sum(w / mu[a] for a, w in zip(self.pos, self.w))


def solve_state_problem(problem: StateProblem, config: SolverConfig = SolverConfig()) -> StateSolution:
    """Solve one per-state program by bisection on the cost multiplier.

    The constraint value of the Lagrangian minimizer is non-increasing in the
    multiplier, so the smallest feasible multiplier is bracketed by doubling
    and then bisected until the duality gap ``lam * (delta - cost)`` falls
    below ``dual_tolerance`` relative to the objective.
    """
    w, c, delta = problem.weights, problem.action_costs, problem.threshold
    n = problem.num_actions
    if not np.any(w > 0):
        mu = problem.target.copy()
        return StateSolution(mu, 0.0, float(mu @ c), 0.0, 0.0, 0, 0.0, "zero-weight")
    pos = w > 0
    c_ref = float(c[pos].min())
    sink = None
    zero = np.flatnonzero(~pos)
    if zero.size:
        z = int(zero[np.argmin(c[zero])])  # argmin returns the lowest index on ties
        if c[z] < c_ref:
            sink = z
    lag = _Lagrangian(w, c, sink, config.max_bisection_iters)

    def finish(mu, nu, lam, status="optimal"):
        mu = np.asarray(mu)
        h = lag.cost(mu)
        obj = lag.objective(mu)
        return StateSolution(mu, obj, h, lam, nu, lag.iterations,
                             max(lam * (delta - h), 0.0), status)

    mu, nu = lag.solve(0.0)
    if lag.cost(mu) <= delta:
        return finish(mu, nu, 0.0)

    # Bracket the smallest feasible multiplier.
    spread = max(float(c.max() - c.min()), ZERO_TOL)
    lam_lo, lam_hi = 0.0, float(np.sum(np.sqrt(w))) ** 2 / spread
    best = None
    for _ in range(config.max_bisection_iters):
        mu, nu = lag.solve(lam_hi)
        if lag.cost(mu) <= delta:
            best = (mu, nu)
            break
        lam_lo, lam_hi = lam_hi, 2.0 * lam_hi
    if best is None:
        slack = config.constraint_slack_tolerance * max(1.0, abs(delta))
        if lag.cost(mu) <= delta + slack:
            return finish(mu, nu, lam_hi, "boundary")
        raise InfeasibleProblemError(
            f"constraint unattainable: best cost {lag.cost(mu)!r} > threshold {delta!r}")

    for _ in range(config.max_bisection_iters):
        mu, nu = best
        h = lag.cost(mu)
        if lam_hi * (delta - h) <= config.dual_tolerance * lag.objective(mu):
            break
        if lam_hi - lam_lo <= 1e-15 * lam_hi:
            break
        mid = 0.5 * (lam_lo + lam_hi)
        mu_mid, nu_mid = lag.solve(mid)
        if lag.cost(mu_mid) <= delta:
            lam_hi, best = mid, (mu_mid, nu_mid)
        else:
            lam_lo = mid
    sol = finish(best[0], best[1], lam_hi)
    # The target row is always feasible; never return anything worse.
    if problem.target @ c <= delta and problem.objective(problem.target) < sol.objective:
        mu = problem.target.copy()
        return StateSolution(mu, problem.objective(mu), float(mu @ c), sol.lam, sol.nu,
                             sol.iterations, sol.duality_gap, "target")
    return sol


def odi_row(weights: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Unconstrained optimum ``mu ~ sqrt(w)``; the target row if all weights vanish."""
    root = np.sqrt(np.asarray(weights, dtype=float))
    total = root.sum()
    if total <= 0:
        return np.asarray(target, dtype=float).copy()
    return root / total


# -- full-horizon synthesis ------------------------------------------------------

@dataclass
class Synthesis:
    """A synthesized behavior policy plus everything used to build it."""

    policy: TabularPolicy
    r_tilde: np.ndarray
    q: np.ndarray
    q_cost: np.ndarray
    threshold: np.ndarray
    solutions: dict = field(default_factory=dict)
    fallback_states: list = field(default_factory=list)

    def report(self) -> dict:
        T, S, _ = self.q.shape
        rows = []
        for t in range(T):
            for s in range(S):
                sol = self.solutions.get((t, s))
                mu = self.policy.probs[t, s]
                rows.append({
                    "t": t, "s": s,
                    "objective": None if sol is None else sol.objective,
                    "constraint_value": float(mu @ self.q_cost[t, s]),
                    "threshold": float(self.threshold[t, s]),
                    "slack": float(self.threshold[t, s] - mu @ self.q_cost[t, s]),
                    "lambda": None if sol is None else sol.lam,
                    "nu": None if sol is None else sol.nu,
                    "iterations": None if sol is None else sol.iterations,
                    "duality_gap": None if sol is None else sol.duality_gap,
                    "status": "fallback" if (t, s) in self.fallback_states
                    else (None if sol is None else sol.status),
                })
        return {"states": rows, "fallback_states": [list(x) for x in self.fallback_states]}


def synthesize(backup, target: np.ndarray, safety: SafetyConfig | None,
               solver: SolverConfig = SolverConfig(), cost_future: str = "behavior",
               fallback_uncovered: bool = False, clamp: bool = False) -> Synthesis:
    """Backward synthesis against any backup (exact model or offline tuples).

    ``safety=None`` gives the unconstrained closed-form policy. With
    ``cost_future="behavior"`` the constraint uses cost values under the
    already-synthesized future; ``"target"`` uses the target's cost values.
    ``fallback_uncovered`` keeps the target row at any ``(t, s)`` where a
    target-supported action has no data.
    """
    T, S, A = backup.horizon, backup.num_states, backup.num_actions
    q, _ = backup_values(backup, target, "reward")
    qc_target, vc_target = backup_values(backup, target, "cost")
    threshold = (safety_threshold(vc_target, safety) if safety is not None
                 else np.full((T, S), np.inf))
    mu = np.zeros((T, S, A))
    r_tilde = np.zeros((T, S, A))
    q_cost = np.zeros((T, S, A))
    solutions, fallbacks = {}, []
    future = None
    vc_next = np.zeros(S)
    for t in reversed(range(T)):
        r_tilde[t] = extended_reward_step(backup, t, q[t], future)
        if clamp:
            np.maximum(r_tilde[t], 0.0, out=r_tilde[t])
        if cost_future == "behavior":
            q_cost[t] = backup.mean_cost(t) + (backup.expect_next(t, vc_next) if t < T - 1 else 0.0)
        elif cost_future == "target":
            q_cost[t] = qc_target[t]
        else:
            raise ValueError(f"unknown cost_future {cost_future!r}")
        weights = target[t] ** 2 * np.maximum(r_tilde[t], 0.0)
        must = np.abs(target[t] * q[t]) > ZERO_TOL
        covered = backup.covered(t)
        for s in range(S):
            if fallback_uncovered and np.any((target[t, s] > 0) & ~covered[s]):
                mu[t, s] = target[t, s]
                fallbacks.append((t, s))
                continue
            if safety is None:
                mu[t, s] = odi_row(weights[s], target[t, s])
                continue
            problem = StateProblem(weights[s], q_cost[t, s], threshold[t, s], must[s],
                                   target[t, s], solver.constraint_slack_tolerance)
            try:
                sol = solve_state_problem(problem, solver)
            except (InfeasibleProblemError, InconsistentProblemError) as exc:
                raise type(exc)(f"(t={t}, s={s}): {exc}") from exc
            mu[t, s] = sol.probs
            solutions[(t, s)] = sol
        future = weighted_ratio_sum(t, target[t], mu[t], r_tilde[t], q[t])
        vc_next = np.sum(mu[t] * q_cost[t], axis=1)
    policy = TabularPolicy(mu / mu.sum(axis=2, keepdims=True))
    return Synthesis(policy, r_tilde, q, q_cost, threshold, solutions, sorted(fallbacks))


def synthesize_scope(model: Cmdp, target: TabularPolicy, config: SafetyConfig = SafetyConfig(),
                     solver: SolverConfig = SolverConfig(), values=None,
                     cost_future: str = "behavior") -> TabularPolicy:
    """Safety-constrained variance-minimizing behavior policy.

    ``values`` is a backup object (default: exact expectations under ``model``).
    """
    check_policy_shape(model, target, "target")
    backup = ModelBackup(model) if values is None else values
    return synthesize(backup, target.probs, config, solver, cost_future).policy


def synthesize_odi(model: Cmdp, target: TabularPolicy, values=None) -> TabularPolicy:
    """Unconstrained variance-minimizing behavior policy (``mu ~ pi sqrt(r_tilde)``)."""
    check_policy_shape(model, target, "target")
    backup = ModelBackup(model) if values is None else values
    return synthesize(backup, target.probs, None).policy
