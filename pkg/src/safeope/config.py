"""Experiment configuration: a JSON document plus dotted-key overrides."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

ESTIMATORS = ("on-policy", "scope", "odi")

DEFAULTS: dict = {
    "environment": {"kind": "gridworld", "n": 10, "seed": 0, "intended_move_prob": 0.9},
    "targets": {"count": 10, "seed": 0},
    "epsilon": 0.0,
    "episodes": 1000,
    "runs": 10,
    "estimators": list(ESTIMATORS),
    "values_source": "exact",
    "offline": {"policies": 30, "episodes": 1000, "seed": 0, "keep_fraction": 1.0, "path": None},
    "solver": {"dual_tolerance": 1e-10, "max_bisection_iters": 200,
               "constraint_slack_tolerance": 1e-9},
    "seed": 0,
    "output_dir": "safeope-out",
    "workers": 1,
    "verify": {"models": 100, "seed": 0, "max_states": 4, "max_actions": 3, "max_horizon": 4,
               "epsilons": [0.0, 0.1, 1.0], "deterministic": False, "corrupt": False},
}

FULL_PROTOCOL = {"targets.count": 30, "runs": 30}


class ConfigError(ValueError):
    pass


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict) and not (k == "environment" and isinstance(v, dict)):
            if not isinstance(v, dict):
                raise ConfigError(f"{key} must be an object")
            out[k] = _merge(base[k], v, key + ".")
        elif k == "environment":
            out[k] = dict(v)
        else:
            out[k] = v
    return out


def set_key(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node and not (len(parts) == 2 and parts[0] == "environment"):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def parse_assignment(text: str) -> tuple[str, object]:
    """``key.path=value`` with a JSON value (bare words are taken as strings)."""
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _positive_int(cfg: dict, dotted: str, allow_zero: bool = False) -> None:
    node = cfg
    for p in dotted.split("."):
        node = node[p]
    ok = isinstance(node, int) and not isinstance(node, bool) and (node >= 0 if allow_zero else node > 0)
    if not ok:
        raise ConfigError(f"{dotted} must be a {'nonnegative' if allow_zero else 'positive'} integer, got {node!r}")


def validate(cfg: dict) -> None:
    env = cfg["environment"]
    kind = env.get("kind")
    if kind == "gridworld":
        if not (isinstance(env.get("n"), int) and env["n"] >= 2):
            raise ConfigError("environment.n must be an integer >= 2")
        p = env.get("intended_move_prob", 0.9)
        if not (isinstance(p, (int, float)) and 0.0 <= p <= 1.0):
            raise ConfigError("environment.intended_move_prob must lie in [0, 1]")
    elif kind == "random":
        for k in ("num_states", "num_actions", "horizon"):
            if not (isinstance(env.get(k), int) and env[k] >= 1):
                raise ConfigError(f"environment.{k} must be a positive integer")
    else:
        raise ConfigError(f"environment.kind must be 'gridworld' or 'random', got {kind!r}")
    if not isinstance(env.get("seed", 0), int):
        raise ConfigError("environment.seed must be an integer")
    for key in ("targets.count", "episodes", "runs", "workers", "offline.policies",
                "offline.episodes", "verify.models"):
        _positive_int(cfg, key)
    eps = cfg["epsilon"]
    if not (isinstance(eps, (int, float)) and not isinstance(eps, bool) and eps >= 0):
        raise ConfigError(f"epsilon must be a number >= 0, got {eps!r}")
    est = cfg["estimators"]
    if not est or any(e not in ESTIMATORS for e in est) or len(set(est)) != len(est):
        raise ConfigError(f"estimators must be distinct names from {ESTIMATORS}, got {est!r}")
    if cfg["values_source"] not in ("exact", "fqe"):
        raise ConfigError("values_source must be 'exact' or 'fqe'")
    kf = cfg["offline"]["keep_fraction"]
    if not (isinstance(kf, (int, float)) and 0 < kf <= 1):
        raise ConfigError("offline.keep_fraction must lie in (0, 1]")
    if any(not (isinstance(e, (int, float)) and e >= 0) for e in cfg["verify"]["epsilons"]):
        raise ConfigError("verify.epsilons must be numbers >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    data: dict

    def __getitem__(self, key):
        return self.data[key]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)


def resolve(path=None, overrides: list[tuple[str, object]] = (), full: bool = False) -> ExperimentConfig:
    """Defaults, then the config file, then ``--full``, then overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, doc)
    if full:
        for k, v in FULL_PROTOCOL.items():
            set_key(cfg, k, v)
    for k, v in overrides:
        set_key(cfg, k, v)
    validate(cfg)
    return ExperimentConfig(cfg)
