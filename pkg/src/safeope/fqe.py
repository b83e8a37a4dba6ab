"""Tabular fitted Q-evaluation from logged transition tuples.

:class:`DatasetBackup` replaces every model expectation with an average over
the tuples logged at the same ``(t, s, a)``, so the value, extended-reward and
synthesis recursions in :mod:`dp` and :mod:`synth` run unchanged on offline
data. With a tabular representation, regressing onto the per-cell targets is
exactly that average.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cmdp import Cmdp, Sampler, TabularPolicy
from .dp import backup_extended_reward, backup_values
from .synth import SafetyConfig, SolverConfig, Synthesis, synthesize

DATASET_FORMAT = "safeope.dataset/1"
COLUMNS = ("t", "s", "a", "r", "c", "s_next")


@dataclass(frozen=True)
class OfflineTuple:
    t: int
    s: int
    a: int
    r: float
    c: float
    s_next: int


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """Column-stored multiset of ``(t, s, a, r, c, s_next)`` tuples."""

    horizon: int
    num_states: int
    num_actions: int
    t: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    c: np.ndarray
    s_next: np.ndarray

    def __post_init__(self):
        for name in ("t", "s", "a", "s_next"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64).ravel())
        for name in ("r", "c"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        n = len(self.t)
        if any(len(getattr(self, k)) != n for k in COLUMNS):
            raise ValueError("dataset columns have different lengths")
        problems = []
        for name, hi in (("t", self.horizon), ("s", self.num_states),
                         ("a", self.num_actions), ("s_next", self.num_states)):
            col = getattr(self, name)
            bad = np.flatnonzero((col < 0) | (col >= hi))
            if len(bad):
                problems.append(f"{name}[{bad[0]}] = {col[bad[0]]} outside [0, {hi})")
        if np.any(self.c < 0):
            problems.append(f"c[{np.flatnonzero(self.c < 0)[0]}] is negative")
        if not (np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.c))):
            problems.append("non-finite reward or cost")
        if problems:
            raise ValueError("invalid dataset: " + "; ".join(problems))

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def empty(cls, horizon: int, num_states: int, num_actions: int) -> "OfflineDataset":
        z = np.zeros(0)
        return cls(horizon, num_states, num_actions, z, z, z, z, z, z)

    @classmethod
    def from_tuples(cls, tuples: Sequence[OfflineTuple], horizon: int, num_states: int,
                    num_actions: int) -> "OfflineDataset":
        if not tuples:
            return cls.empty(horizon, num_states, num_actions)
        cols = list(zip(*[(x.t, x.s, x.a, x.r, x.c, x.s_next) for x in tuples]))
        return cls(horizon, num_states, num_actions, *cols)

    def tuples(self):
        for i in range(len(self)):
            yield OfflineTuple(int(self.t[i]), int(self.s[i]), int(self.a[i]),
                               float(self.r[i]), float(self.c[i]), int(self.s_next[i]))

    @property
    def counts(self) -> np.ndarray:
        """Number of tuples per ``(t, s, a)``, shape (T, S, A)."""
        T, S, A = self.horizon, self.num_states, self.num_actions
        flat = (self.t * S + self.s) * A + self.a
        return np.bincount(flat, minlength=T * S * A).reshape(T, S, A)

    def merge(self, other: "OfflineDataset") -> "OfflineDataset":
        dims = (self.horizon, self.num_states, self.num_actions)
        if dims != (other.horizon, other.num_states, other.num_actions):
            raise ValueError("cannot merge datasets with different dimensions")
        return OfflineDataset(*dims, *[np.concatenate([getattr(self, k), getattr(other, k)])
                                       for k in COLUMNS])

    def to_dict(self) -> dict:
        return {"format": DATASET_FORMAT, "horizon": self.horizon,
                "num_states": self.num_states, "num_actions": self.num_actions,
                **{k: getattr(self, k).tolist() for k in COLUMNS}}

    @classmethod
    def from_dict(cls, d: dict) -> "OfflineDataset":
        if d.get("format") != DATASET_FORMAT:
            raise ValueError(f"not a dataset document (format={d.get('format')!r})")
        return cls(int(d["horizon"]), int(d["num_states"]), int(d["num_actions"]),
                   *[d[k] for k in COLUMNS])

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for i in range(len(self)):
                w.writerow([self.t[i], self.s[i], self.a[i], repr(float(self.r[i])),
                            repr(float(self.c[i])), self.s_next[i]])

    @classmethod
    def load_csv(cls, path, horizon: int, num_states: int, num_actions: int) -> "OfflineDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(COLUMNS)}")
        body = rows[1:]
        if not body:
            return cls.empty(horizon, num_states, num_actions)
        cols = list(zip(*body))
        return cls(horizon, num_states, num_actions,
                   [int(x) for x in cols[0]], [int(x) for x in cols[1]], [int(x) for x in cols[2]],
                   [float(x) for x in cols[3]], [float(x) for x in cols[4]],
                   [int(x) for x in cols[5]])

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "OfflineDataset":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_offline_dataset(model: Cmdp, policies: Sequence[TabularPolicy],
                             episodes_per_policy: int, rng: np.random.Generator,
                             keep_fraction: float = 1.0) -> OfflineDataset:
    """Roll out every policy and flatten the episodes into tuples.

    Trajectory structure is discarded. ``keep_fraction < 1`` keeps a random
    subset of the tuples to simulate an incomplete log.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    T, S, A = model.shape
    out = OfflineDataset.empty(T, S, A)
    sampler = Sampler(model)
    for policy in policies:
        if episodes_per_policy == 0:
            break
        b = sampler.sample(policy, episodes_per_policy, rng)
        tt = np.broadcast_to(np.arange(T), b.states.shape)
        part = OfflineDataset(T, S, A, tt, b.states, b.actions, b.rewards, b.costs, b.next_states)
        out = out.merge(part)
    if keep_fraction < 1.0 and len(out):
        keep = rng.random(len(out)) < keep_fraction
        out = OfflineDataset(T, S, A, *[getattr(out, k)[keep] for k in COLUMNS])
    return out


def exact_frequency_dataset(model: Cmdp, resolution: int) -> OfflineDataset:
    """Every ``(t, s, a, s')`` repeated ``resolution * p(s'|s, a)`` times.

    The empirical transition frequencies then equal the model's exactly; the
    transition probabilities must all be multiples of ``1 / resolution``.
    """
    T, S, A = model.shape
    counts = model.transition * resolution
    k = np.rint(counts)
    if np.max(np.abs(counts - k)) > 1e-9:
        raise ValueError(f"transition probabilities are not multiples of 1/{resolution}")
    k = k.astype(np.int64)
    s, a, s2 = np.nonzero(k)
    reps = k[s, a, s2]
    s, a, s2 = np.repeat(s, reps), np.repeat(a, reps), np.repeat(s2, reps)
    n = len(s)
    return OfflineDataset(T, S, A, np.repeat(np.arange(T), n), np.tile(s, T), np.tile(a, T),
                          np.tile(model.reward[s, a], T), np.tile(model.cost[s, a], T),
                          np.tile(s2, T))


class DatasetBackup:
    """Per-``(t, s, a)`` tuple averages; cells without data read as 0."""

    def __init__(self, dataset: OfflineDataset):
        self.dataset = dataset
        T, S, A = dataset.horizon, dataset.num_states, dataset.num_actions
        self.horizon, self.num_states, self.num_actions = T, S, A
        self._idx = [np.flatnonzero(dataset.t == t) for t in range(T)]
        self._key = [dataset.s[i] * A + dataset.a[i] for i in self._idx]
        self._n = [np.bincount(k, minlength=S * A) for k in self._key]
        self._r = [self._mean(t, dataset.r[self._idx[t]]) for t in range(T)]
        self._r2 = [self._mean(t, dataset.r[self._idx[t]] ** 2) for t in range(T)]
        self._c = [self._mean(t, dataset.c[self._idx[t]]) for t in range(T)]

    def _mean(self, t: int, x: np.ndarray) -> np.ndarray:
        n = self._n[t]
        tot = np.bincount(self._key[t], weights=x, minlength=len(n))
        return np.divide(tot, n, out=np.zeros(len(n)), where=n > 0).reshape(
            self.num_states, self.num_actions)

    def covered(self, t: int) -> np.ndarray:
        return (self._n[t] > 0).reshape(self.num_states, self.num_actions)

    def mean_reward(self, t: int) -> np.ndarray:
        return self._r[t]

    def mean_sq_reward(self, t: int) -> np.ndarray:
        return self._r2[t]

    def mean_cost(self, t: int) -> np.ndarray:
        return self._c[t]

    def expect_next(self, t: int, values: np.ndarray) -> np.ndarray:
        return self._mean(t, np.asarray(values)[self.dataset.s_next[self._idx[t]]])


def _check_dims(dataset: OfflineDataset, policy: TabularPolicy, name: str) -> None:
    dims = (dataset.horizon, dataset.num_states, dataset.num_actions)
    if policy.shape != dims:
        raise ValueError(f"{name} has shape {policy.shape}, dataset expects {dims}")


def fqe_values(dataset: OfflineDataset, target: TabularPolicy, signal: str = "reward"):
    """Estimated ``(q, v)`` of ``target`` for ``signal`` in {"reward", "cost"}."""
    if signal not in ("reward", "cost"):
        raise ValueError(f"signal must be 'reward' or 'cost', got {signal!r}")
    _check_dims(dataset, target, "target")
    return backup_values(DatasetBackup(dataset), target.probs, signal)


def fqe_extended_reward(dataset: OfflineDataset, target: TabularPolicy,
                        future_behavior: TabularPolicy, q_hat: np.ndarray) -> np.ndarray:
    """Extended-reward estimate, clamped at zero from below."""
    _check_dims(dataset, target, "target")
    _check_dims(dataset, future_behavior, "future_behavior")
    return backup_extended_reward(DatasetBackup(dataset), target.probs, future_behavior.probs,
                                  np.asarray(q_hat, dtype=float), clamp=True)


def fqe_synthesize(dataset: OfflineDataset, target: TabularPolicy,
                   safety: SafetyConfig | None = SafetyConfig(),
                   solver: SolverConfig = SolverConfig()) -> Synthesis:
    """Offline synthesis; ``safety=None`` gives the unconstrained policy.

    At any ``(t, s)`` where the target plays an action the data never shows,
    the target's own row is kept.
    """
    _check_dims(dataset, target, "target")
    return synthesize(DatasetBackup(dataset), target.probs, safety, solver,
                      fallback_uncovered=True, clamp=True)
