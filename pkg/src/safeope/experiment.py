"""Experiment pipeline behind the command-line tool.

Every output is a pure function of the resolved config: random streams are
keyed by ``(seed, stream, policy, estimator, run)``, and the summary is
recomputed from the emitted CSV files rather than from in-memory state.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, oracle
from .cmdp import Cmdp, Sampler, TabularPolicy, make_rng, save_json
from .config import ESTIMATORS, ConfigError, ExperimentConfig
from .dp import (ModelBackup, expected_cost, expected_return, pdis_variance_closed_form,
                 reward_values, total_variance)
from .envs import (GridworldSpec, make_deterministic_cmdp, make_enlarged_space_case,
                   make_gridworld, make_random_cmdp, make_target_policies, random_policy)
from .estimators import cost_indexed, pdis_returns
from .fqe import OfflineDataset, fqe_synthesize, generate_offline_dataset
from .synth import SafetyConfig, SolverConfig, synthesize, synthesize_odi, synthesize_scope

# Stream identifiers for make_rng keys.
_OFFLINE, _EVAL = 2, 3

CURVE_COLUMNS = ("estimator", "policy", "run_id", "episode", "pdis_return", "traj_cost",
                 "abs_error", "cum_cost")
POLICY_COLUMNS = ("policy", "true_value", "target_cost", "target_variance")

DEFINITIONS = {
    "relative_variance": "per target policy: sample variance of episode PDIS returns "
                         "(pooled over runs) divided by the on-policy one; averaged over policies",
    "relative_cost": "per target policy: mean executed trajectory cost divided by the "
                     "on-policy one; averaged over policies",
    "normalized_error": "|running mean - true value| divided by the on-policy estimator's "
                        "run-averaged error after the first episode, per policy; averaged "
                        "over policies and runs",
    "normalized_cost": "cumulative executed cost divided by the target's exact expected "
                       "trajectory cost, so one on-policy episode costs 1 on average",
    "cost_to_accuracy": "first normalized cumulative cost at which an estimator's averaged "
                        "normalized error is at or below the on-policy error after the last "
                        "episode; the reference is the on-policy cost at the last episode",
    "cost_indexed_curves": "error held constant between episode completions",
    "environment_note": "reward and cost tables are drawn uniformly from [0, 1], so the "
                        "numbers depend on those draws and are meant for qualitative comparison",
}


def build_model(cfg: ExperimentConfig) -> Cmdp:
    env = cfg["environment"]
    if env["kind"] == "gridworld":
        return make_gridworld(GridworldSpec(env["n"], env.get("seed", 0),
                                            env.get("intended_move_prob", 0.9)))
    return make_random_cmdp(env["num_states"], env["num_actions"], env["horizon"],
                            env.get("seed", 0))


def build_targets(cfg: ExperimentConfig, model: Cmdp) -> list[TabularPolicy]:
    return make_target_policies(model, cfg["targets"]["count"], cfg["targets"]["seed"])


def solver_config(cfg: ExperimentConfig) -> SolverConfig:
    return SolverConfig(**cfg["solver"])


def build_offline_dataset(cfg: ExperimentConfig, model: Cmdp) -> OfflineDataset:
    off = cfg["offline"]
    if off.get("path"):
        path = Path(off["path"])
        if path.suffix == ".csv":
            return OfflineDataset.load_csv(path, *model.shape)
        return OfflineDataset.load_json(path)
    policies = [random_policy(model, k, concentration=0.5) for k in range(off["policies"])]
    # Episodes are spread as evenly as possible over the logging policies.
    base, extra = divmod(off["episodes"], off["policies"])
    rng = make_rng(off["seed"], _OFFLINE)
    T, S, A = model.shape
    data = OfflineDataset.empty(T, S, A)
    for k, pol in enumerate(policies):
        n = base + (k < extra)
        if n:
            data = data.merge(generate_offline_dataset(model, [pol], n, rng))
    if off["keep_fraction"] < 1.0:
        keep = rng.random(len(data)) < off["keep_fraction"]
        data = OfflineDataset(T, S, A, *[getattr(data, c)[keep] for c in ("t", "s", "a", "r", "c", "s_next")])
    return data


def behavior_policies(cfg: ExperimentConfig, model: Cmdp, target: TabularPolicy,
                      dataset: OfflineDataset | None = None) -> tuple[dict, dict]:
    """Behavior policy per requested estimator plus synthesis reports."""
    out, reports = {}, {}
    solver = solver_config(cfg)
    safety = SafetyConfig(float(cfg["epsilon"]))
    for est in cfg["estimators"]:
        if est == "on-policy":
            out[est] = target
            continue
        constrained = safety if est == "scope" else None
        if cfg["values_source"] == "fqe":
            syn = fqe_synthesize(dataset, target, constrained, solver)
        else:
            syn = synthesize(ModelBackup(model), target.probs, constrained, solver)
        out[est] = syn.policy
        reports[est] = syn.report()
    return out, reports


# -- synth ------------------------------------------------------------------------

def _write_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"version": __version__, "config": cfg.data}
    (out / "config.resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_synth(cfg: ExperimentConfig) -> Path:
    out = Path(cfg["output_dir"])
    _write_config(cfg, out)
    model = build_model(cfg)
    save_json(model, out / "model.json")
    dataset = build_offline_dataset(cfg, model) if cfg["values_source"] == "fqe" else None
    pdir = out / "policies"
    pdir.mkdir(exist_ok=True)
    for i, target in enumerate(build_targets(cfg, model)):
        save_json(target, pdir / f"target_{i}.json")
        behaviors, reports = behavior_policies(cfg, model, target, dataset)
        for est, pol in behaviors.items():
            if est == "on-policy":
                continue
            save_json(pol, pdir / f"{est}_{i}.json")
            (pdir / f"{est}_{i}.report.json").write_text(json.dumps(reports[est], indent=1) + "\n")
    return out


# -- evaluate -----------------------------------------------------------------------

@dataclass(frozen=True)
class _EvalTask:
    model: Cmdp
    target: TabularPolicy
    behaviors: dict
    truth: float
    policy_index: int
    seed: int
    runs: int
    episodes: int


def _run_policy(task: _EvalTask) -> list[list]:
    rows = []
    sampler = Sampler(task.model)
    ep = np.arange(1, task.episodes + 1)
    for e_idx, est in enumerate(ESTIMATORS):
        if est not in task.behaviors:
            continue
        mu = task.behaviors[est]
        for run in range(task.runs):
            rng = make_rng(task.seed, _EVAL, task.policy_index, e_idx, run)
            batch = sampler.sample(mu, task.episodes, rng)
            g = pdis_returns(batch, task.target, mu)
            cost = batch.costs.sum(axis=1)
            err = np.abs(np.cumsum(g) / ep - task.truth)
            cum = np.cumsum(cost)
            for k in range(task.episodes):
                rows.append([est, task.policy_index, run, k + 1, repr(float(g[k])),
                             repr(float(cost[k])), repr(float(err[k])), repr(float(cum[k]))])
    return rows


def run_evaluate(cfg: ExperimentConfig) -> Path:
    if "on-policy" not in cfg["estimators"]:
        raise ConfigError("evaluate needs the on-policy estimator as the reference")
    out = Path(cfg["output_dir"])
    _write_config(cfg, out)
    model = build_model(cfg)
    dataset = build_offline_dataset(cfg, model) if cfg["values_source"] == "fqe" else None
    tasks, prow = [], []
    for i, target in enumerate(build_targets(cfg, model)):
        behaviors, _ = behavior_policies(cfg, model, target, dataset)
        truth = expected_return(model, target)
        prow.append([i, repr(truth), repr(expected_cost(model, target)),
                     repr(total_variance(model, target, target))])
        tasks.append(_EvalTask(model, target, behaviors, truth, i, cfg["seed"],
                               cfg["runs"], cfg["episodes"]))
    with open(out / "policies.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(POLICY_COLUMNS)
        w.writerows(prow)
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(cfg["workers"]) as pool:
            results = list(pool.map(_run_policy, tasks))
    else:
        results = [_run_policy(t) for t in tasks]
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for rows in results:
            w.writerows(rows)
    summary = summarize(out)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return out


def load_curves(out: Path) -> tuple[dict, dict]:
    """Read curves.csv and policies.csv into per-estimator arrays.

    Returns ``(curves, policies)`` where ``curves[est][col]`` has shape
    (policies, runs, episodes).
    """
    with open(out / "policies.csv", newline="") as fh:
        rd = csv.DictReader(fh)
        pol = {k: [] for k in POLICY_COLUMNS}
        for r in rd:
            for k in POLICY_COLUMNS:
                pol[k].append(float(r[k]))
    policies = {k: np.array(v) for k, v in pol.items()}
    raw: dict = {}
    with open(out / "curves.csv", newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != CURVE_COLUMNS:
            raise ValueError("unexpected curves.csv header")
        for est, p, run, k, g, c, e, cc in rd:
            raw.setdefault(est, []).append((int(p), int(run), int(k), float(g), float(c),
                                            float(e), float(cc)))
    curves = {}
    for est, rows in raw.items():
        arr = np.array(rows)
        P = int(arr[:, 0].max()) + 1
        R = int(arr[:, 1].max()) + 1
        K = int(arr[:, 2].max())
        cube = {}
        for j, col in enumerate(("pdis_return", "traj_cost", "abs_error", "cum_cost")):
            x = np.full((P, R, K), np.nan)
            x[arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2].astype(int) - 1] = arr[:, 3 + j]
            cube[col] = x
        curves[est] = cube
    return curves, policies


def _first_below(err: np.ndarray, level: float) -> int | None:
    hit = np.flatnonzero(err <= level)
    return int(hit[0]) if len(hit) else None


def summarize(out: Path, budget_points: int = 100) -> dict:
    """Summary tables computed only from the CSV files in ``out``."""
    curves, policies = load_curves(Path(out))
    ref = curves["on-policy"]
    ref_var = np.var(ref["pdis_return"].reshape(len(policies["policy"]), -1), axis=1, ddof=1)
    ref_cost = np.mean(ref["traj_cost"].reshape(len(policies["policy"]), -1), axis=1)
    scale = ref["abs_error"][:, :, 0].mean(axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    unit = policies["target_cost"]
    unit = np.where(unit > 0, unit, 1.0)
    K = ref["abs_error"].shape[2]
    norm_err, norm_cost = {}, {}
    for est, cube in curves.items():
        norm_err[est] = (cube["abs_error"] / scale[:, None, None]).mean(axis=(0, 1))
        norm_cost[est] = (cube["cum_cost"] / unit[:, None, None]).mean(axis=(0, 1))
    level = float(norm_err["on-policy"][-1])
    reference_cost = float(norm_cost["on-policy"][-1])
    budgets = np.linspace(reference_cost / budget_points, reference_cost, budget_points)
    summary = {"version": __version__, "definitions": DEFINITIONS, "episodes": K,
               "accuracy_level": level, "reference_cost": reference_cost,
               "estimators": {}}
    for est, cube in curves.items():
        P = cube["pdis_return"].shape[0]
        var = np.var(cube["pdis_return"].reshape(P, -1), axis=1, ddof=1)
        cost = np.mean(cube["traj_cost"].reshape(P, -1), axis=1)
        rel_var = np.divide(var, ref_var, out=np.full(P, np.nan), where=ref_var > 0)
        k_hit = _first_below(norm_err[est], level)
        cta = None if k_hit is None else float(norm_cost[est][k_hit])
        # Cost-indexed errors per (policy, run), then averaged.
        e = (cube["abs_error"] / scale[:, None, None]).reshape(-1, K)
        c = (cube["cum_cost"] / unit[:, None, None]).reshape(-1, K)
        by_cost = cost_indexed(e, c, budgets)
        seen = ~np.isnan(by_cost)
        err_by_cost = np.where(seen.any(axis=0),
                               np.nansum(by_cost, axis=0) / np.maximum(seen.sum(axis=0), 1), np.nan)
        summary["estimators"][est] = {
            "relative_variance": float(np.nanmean(rel_var)),
            "relative_variance_per_policy": rel_var.tolist(),
            "relative_cost": float(np.mean(cost / ref_cost)),
            "relative_cost_per_policy": (cost / ref_cost).tolist(),
            "cost_to_accuracy": cta,
            "cost_to_accuracy_ratio": None if cta is None else cta / reference_cost,
            "episodes_to_accuracy": None if k_hit is None else k_hit + 1,
            "error_by_episode": norm_err[est].tolist(),
            "error_by_cost": {"budgets": budgets.tolist(),
                              "error": err_by_cost.tolist()},
        }
    return _json_safe(summary)


def _json_safe(x):
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_safe(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


# -- offline ------------------------------------------------------------------------

def run_gen_offline(cfg: ExperimentConfig) -> Path:
    out = Path(cfg["output_dir"])
    _write_config(cfg, out)
    model = build_model(cfg)
    data = build_offline_dataset(cfg, model)
    data.save_csv(out / "dataset.csv")
    data.save_json(out / "dataset.json")
    counts = data.counts
    (out / "coverage.json").write_text(json.dumps({
        "tuples": len(data), "covered_cells": int((counts > 0).sum()),
        "cells": int(counts.size)}, indent=1) + "\n")
    return out


def run_fqe_synth(cfg: ExperimentConfig) -> Path:
    out = Path(cfg["output_dir"])
    _write_config(cfg, out)
    model = build_model(cfg)
    data = build_offline_dataset(cfg, model)
    pdir = out / "policies"
    pdir.mkdir(exist_ok=True)
    solver = solver_config(cfg)
    for i, target in enumerate(build_targets(cfg, model)):
        syn = fqe_synthesize(data, target, SafetyConfig(float(cfg["epsilon"])), solver)
        save_json(syn.policy, pdir / f"scope_fqe_{i}.json")
        (pdir / f"scope_fqe_{i}.report.json").write_text(json.dumps(syn.report(), indent=1) + "\n")
    return out


# -- verify -------------------------------------------------------------------------

def _check(name, ok, **detail):
    return {"check": name, "passed": bool(ok), **detail}


def verify_model(model: Cmdp, target: TabularPolicy, epsilons, corrupt: bool = False,
                 expect_zero_variance: bool = False) -> list[dict]:
    """Oracle identity checks for one model and target."""

    checks = []
    truth = expected_return(model, target)
    jc_target = expected_cost(model, target)
    behaviors = {"target": target, "odi": synthesize_odi(model, target)}
    for eps in epsilons:
        behaviors[f"scope(eps={eps})"] = synthesize_scope(model, target, SafetyConfig(eps))
    if corrupt:
        # Drop the target's most valuable action everywhere: outside the
        # enlarged space, so the estimator is biased.
        q, _ = reward_values(model, target)
        probs = target.probs.copy()
        drop = np.abs(target.probs * q).argmax(axis=2)
        np.put_along_axis(probs, drop[..., None], 0.0, axis=2)
        probs[probs.sum(axis=2) == 0] = 1.0
        behaviors["corrupted"] = TabularPolicy.from_rows(probs)
    exact_var = {}
    for name, mu in behaviors.items():
        mean, var, jc = oracle.exact_moments(model, target, mu)
        checks.append(_check(f"unbiased[{name}]", abs(mean - truth) <= 1e-10,
                             error=abs(mean - truth)))
        if name == "corrupted":
            continue
        m_s, v_s = oracle.state_variances(model, target, mu)
        v_cf = pdis_variance_closed_form(model, target, mu)
        second = v_s + m_s ** 2
        rel = float(np.max(np.abs(v_cf - v_s) / np.maximum(second, 1e-300)))
        checks.append(_check(f"variance_identity[{name}]", rel <= 1e-8, relative_error=rel))
        exact_var[name] = (var, v_s)
        if name.startswith("scope"):
            eps = float(name.split("=")[1].rstrip(")"))
            bound = (1 + eps) * jc_target + 1e-9
            checks.append(_check(f"safety[{name}]", jc <= bound, cost=jc, bound=bound))
    tv, ts = exact_var["target"]
    if expect_zero_variance:
        worst = max(max(abs(v), float(np.max(np.abs(s)))) for v, s in exact_var.values())
        checks.append(_check("zero_variance", worst <= 1e-12, largest=worst))
    for name, (v, s) in exact_var.items():
        if name.startswith("scope"):
            ok = v <= tv + 1e-9 and np.all(s <= ts + 1e-9)
            checks.append(_check(f"variance_reduction[{name}]", ok, variance=v, target_variance=tv))
    return checks


def run_verify(cfg: ExperimentConfig) -> tuple[dict, bool]:
    v = cfg["verify"]
    checks = []
    for k in range(v["models"]):
        rng = make_rng(v["seed"], k)
        S = int(rng.integers(2, v["max_states"] + 1)) if v["max_states"] >= 2 else 1
        A = int(rng.integers(2, v["max_actions"] + 1)) if v["max_actions"] >= 2 else 1
        T = int(rng.integers(1, v["max_horizon"] + 1))
        seed = int(rng.integers(2 ** 31))
        if v["deterministic"]:
            model = make_deterministic_cmdp(S, A, T, seed)
            target = random_policy(model, seed + 1)
            probs = np.zeros(model.shape)
            np.put_along_axis(probs, target.probs.argmax(axis=2)[..., None], 1.0, axis=2)
            target = TabularPolicy(probs)
        else:
            model = make_random_cmdp(S, A, T, seed)
            target = random_policy(model, seed + 1)
        for c in verify_model(model, target, v["epsilons"], v["corrupt"], v["deterministic"]):
            checks.append({"model": k, "dims": [S, A, T], **c})
    if not v["deterministic"]:
        model, target, mu, cell = make_enlarged_space_case(v["seed"])
        mean, _, _ = oracle.exact_moments(model, target, mu)
        truth = expected_return(model, target)
        checks.append({"model": "enlarged-space", **_check(
            "unbiased[drops zero-value action]", abs(mean - truth) <= 1e-10,
            error=abs(mean - truth), cell=list(cell))})
    failed = [c for c in checks if not c["passed"]]
    report = {"version": __version__, "checks": len(checks), "failed": len(failed),
              "failures": failed, "results": checks}
    return _json_safe(report), not failed
