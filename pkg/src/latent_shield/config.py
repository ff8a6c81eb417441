"""Experiment configuration: JSON schema, presets and object construction."""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any

from .envs import make_env
from .policy import AgentConfig
from .shield import EpsilonSchedule, ShieldConfig
from .srssm import ModelConfig
from .trainer import ScheduleState, TrainConfig

VERSION = 1
OUTPUT_ENV_VAR = "LATENT_SHIELD_OUT"

_REQ = object()  # marks a required key

SCHEMA: dict[str, dict[str, Any]] = {
    "env": {
        "name": _REQ, "episode_length": _REQ,
        "mode": "fixed", "width": 8, "height": 8, "n_unsafe": 6, "layout_seed": 0,
        "unsafe_cells": None, "render_size": 64,
        "p_stick": 0.1, "x0": 10.0,
    },
    "model": {
        "deterministic_state_size": _REQ, "stochastic_state_size": _REQ,
        "nn_hidden_layer_size": _REQ, "observation_embedding_size": _REQ,
        "model_learning_rate": _REQ, "policy_learning_rate": _REQ, "value_learning_rate": _REQ,
        "discount_factor": 0.99, "kl_balancing_ratio": [4, 1], "violation_class_weighting": 3.0,
        "bit_depth": 5, "adam_epsilon": 1e-7, "adam_beta": [0.9, 0.999],
        "exploration_noise_variance": 0.3, "lambda_return": 0.95, "entropy_weight": 1e-3,
        "cnn_depth": 8, "free_nats": 0.0, "obs_scale": None, "policy_layers": 2,
        "exploration_mix": 0.1, "return_normalisation": True,
        "discrete_policy_gradient": "dynamics", "imagination_starts": None,
    },
    "shield": {
        "mode": "latent", "abps_horizon": _REQ, "abps_sampled_trajectories": _REQ,
        "abps_unsafe_threshold": 0.15, "action_noise_variance": 0.3,
        "epsilon_schedule": None, "candidates": None, "oracle_draws": 8,
    },
    "trainer": {
        "seed_episodes": _REQ, "training_steps": _REQ, "batch_size": _REQ,
        "sequence_length": _REQ, "imagination_horizon": _REQ, "total_episodes": _REQ,
        "r_punish": _REQ, "schedule": _REQ, "action_repeat": 1, "reward_scale": 1.0,
        "eval_episodes": 10,
    },
}
TOP_LEVEL = {"version", "output_dir", *SCHEMA}


class ConfigError(ValueError):
    pass


def _vgw_full() -> dict:
    return {
        "version": VERSION,
        "env": {"name": "vgw", "mode": "fixed", "width": 8, "height": 8, "n_unsafe": 6,
                "render_size": 64, "episode_length": 500},
        "model": {"deterministic_state_size": 200, "stochastic_state_size": 30,
                  "nn_hidden_layer_size": 200, "observation_embedding_size": 1024,
                  "model_learning_rate": 1e-3, "policy_learning_rate": 8e-5,
                  "value_learning_rate": 8e-5, "bit_depth": 5},
        "shield": {"abps_horizon": 2, "abps_sampled_trajectories": 20, "abps_unsafe_threshold": 0.15,
                   "epsilon_schedule": {"mode": "linear", "start": 0.5, "end": 0.125}},
        "trainer": {"seed_episodes": 5, "training_steps": 100, "batch_size": 50, "sequence_length": 50,
                    "imagination_horizon": 15, "total_episodes": 200, "r_punish": -40.0,
                    "schedule": {"kind": "phased", "phases": [[10, 3], [20, 2], [30, 1]]}},
    }


def _cd_full() -> dict:
    return {
        "version": VERSION,
        "env": {"name": "cd", "p_stick": 0.1, "x0": 10.0, "episode_length": 20},
        "model": {"deterministic_state_size": 8, "stochastic_state_size": 16,
                  "nn_hidden_layer_size": 16, "observation_embedding_size": 32,
                  "model_learning_rate": 1e-4, "policy_learning_rate": 8e-5,
                  "value_learning_rate": 8e-7, "bit_depth": None},
        "shield": {"abps_horizon": 6, "abps_sampled_trajectories": 10, "abps_unsafe_threshold": 0.15,
                   "epsilon_schedule": {"mode": "constant", "start": 0.15}},
        "trainer": {"seed_episodes": 50, "training_steps": 100, "batch_size": 250, "sequence_length": 10,
                    "imagination_horizon": 15, "total_episodes": 500, "r_punish": -5.0,
                    "schedule": {"kind": "phased", "phases": [[60, 1]]}},
    }


def _vgw_desk() -> dict:
    cfg = _vgw_full()
    cfg["env"].update(render_size=16, episode_length=100)
    cfg["model"].update(deterministic_state_size=64, stochastic_state_size=16, nn_hidden_layer_size=64,
                        observation_embedding_size=128, cnn_depth=8, model_learning_rate=3e-3,
                        policy_learning_rate=3e-4, value_learning_rate=4e-4,
                        discrete_policy_gradient="reinforce", imagination_starts=64)
    cfg["trainer"].update(training_steps=120, batch_size=16, sequence_length=16, total_episodes=100,
                          reward_scale=0.1, eval_episodes=50)
    return cfg


def _cd_desk() -> dict:
    cfg = _cd_full()
    cfg["model"].update(model_learning_rate=1e-3, policy_learning_rate=3e-4, value_learning_rate=3e-4,
                        obs_scale=[10.0, 5.0])
    cfg["trainer"].update(training_steps=20, batch_size=64, total_episodes=150, eval_episodes=50)
    return cfg


PRESETS = {"vgw_full": _vgw_full, "cd_full": _cd_full, "vgw_desk": _vgw_desk, "cd_desk": _cd_desk}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return resolve(PRESETS[name]())


def resolve(raw: dict) -> dict:
    """Validate ``raw`` and fill defaults; raises :class:`ConfigError` naming the offending key."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    if "version" not in raw:
        raise ConfigError("missing config key 'version'")
    if raw["version"] != VERSION:
        raise ConfigError(f"unsupported config version {raw['version']!r}")
    out = {"version": VERSION, "output_dir": raw.get("output_dir")}
    for section, keys in SCHEMA.items():
        if section not in raw:
            raise ConfigError(f"missing config key {section!r}")
        given = raw[section]
        if not isinstance(given, dict):
            raise ConfigError(f"config key {section!r} must be an object")
        extra = set(given) - set(keys)
        if extra:
            raise ConfigError(f"unknown config key '{section}.{sorted(extra)[0]}'")
        sec = {}
        for k, default in keys.items():
            if k in given:
                sec[k] = copy.deepcopy(given[k])
            elif default is _REQ:
                raise ConfigError(f"missing config key '{section}.{k}'")
            else:
                sec[k] = copy.deepcopy(default)
        out[section] = sec
    if out["trainer"]["action_repeat"] != 1:
        raise ConfigError("trainer.action_repeat must be 1")
    try:
        build(out)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return out


def load(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        if str(path) in PRESETS:
            return preset(str(path))
        raise ConfigError(f"config file {path} not found")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return resolve(raw)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as JSON when possible)."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = cfg
        parts = path.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key {path!r}")
            node = node[part]
        if not isinstance(node, dict) or (parts[-1] not in node and node is not cfg):
            raise ConfigError(f"unknown config key {path!r}")
        node[parts[-1]] = parsed
    return resolve(cfg)


def output_root(cfg: dict) -> Path:
    return Path(cfg.get("output_dir") or os.environ.get(OUTPUT_ENV_VAR) or "runs")


# ---------------------------------------------------------------------------
# construction


def build(cfg: dict):
    """Return ``(env, ModelConfig, AgentConfig, TrainConfig)`` for a resolved config."""
    e, m, s, t = cfg["env"], cfg["model"], cfg["shield"], cfg["trainer"]
    env_opts = {"name": e["name"], "episode_length": e["episode_length"]}
    if e["name"] == "vgw":
        env_opts.update({k: e[k] for k in ("mode", "width", "height", "n_unsafe", "layout_seed",
                                           "unsafe_cells", "render_size")})
    elif e["name"] == "cd":
        env_opts.update(p_stick=e["p_stick"], x0=e["x0"])
    else:
        raise ConfigError(f"unknown environment 'env.name'={e['name']!r}")
    env = make_env(env_opts)

    ratio = m["kl_balancing_ratio"]
    if isinstance(ratio, str):
        a, b = (float(x) for x in ratio.split(":"))
    else:
        a, b = (float(x) for x in ratio)
    model_cfg = ModelConfig(
        obs_shape=tuple(env.observation_shape), n_actions=env.n_actions, discrete=env.discrete,
        deter=m["deterministic_state_size"], stoch=m["stochastic_state_size"],
        hidden=m["nn_hidden_layer_size"], embed=m["observation_embedding_size"],
        cnn_depth=m["cnn_depth"], bit_depth=m["bit_depth"] if env.discrete else None,
        kl_prior_share=a / (a + b), free_nats=m["free_nats"],
        violation_weight=m["violation_class_weighting"], obs_scale=m["obs_scale"],
    )
    agent_cfg = AgentConfig(
        discount=m["discount_factor"], lam=m["lambda_return"], horizon=t["imagination_horizon"],
        actor_lr=m["policy_learning_rate"], value_lr=m["value_learning_rate"],
        entropy=m["entropy_weight"], explore_noise=m["exploration_noise_variance"],
        explore_mix=m["exploration_mix"], hidden=m["nn_hidden_layer_size"], layers=m["policy_layers"],
        return_norm=m["return_normalisation"], discrete_grad=m["discrete_policy_gradient"],
        imagine_starts=m["imagination_starts"],
    )
    eps_cfg = s["epsilon_schedule"] or {"mode": "constant", "start": s["abps_unsafe_threshold"]}
    eps = EpsilonSchedule(
        mode=eps_cfg.get("mode", "constant"), start=eps_cfg.get("start", s["abps_unsafe_threshold"]),
        end=eps_cfg.get("end", eps_cfg.get("start", s["abps_unsafe_threshold"])),
        total=eps_cfg.get("total", t["total_episodes"]),
    )
    shield_cfg = ShieldConfig(horizon=s["abps_horizon"], samples=s["abps_sampled_trajectories"],
                              epsilon=s["abps_unsafe_threshold"], noise_var=s["action_noise_variance"],
                              candidates=s["candidates"])
    sched = t["schedule"]
    if isinstance(sched, str):
        sched = {"kind": sched}
    phases = tuple(tuple(p) for p in sched["phases"]) if "phases" in sched else ScheduleState().phases
    schedule = ScheduleState(kind=sched.get("kind", "phased"), phases=phases)
    train_cfg = TrainConfig(
        seed_episodes=t["seed_episodes"], train_steps=t["training_steps"], batch_size=t["batch_size"],
        seq_len=t["sequence_length"], total_episodes=t["total_episodes"], r_punish=t["r_punish"],
        reward_scale=t["reward_scale"], model_lr=m["model_learning_rate"], shield_mode=s["mode"],
        schedule=schedule, epsilon=eps, shield=shield_cfg, oracle_draws=s["oracle_draws"],
        eval_episodes=t["eval_episodes"],
    )
    if train_cfg.seq_len > env.episode_length + 1:
        raise ConfigError("trainer.sequence_length exceeds the episode length")
    if tuple(m["adam_beta"]) != (0.9, 0.999) or m["adam_epsilon"] != 1e-7:
        # the optimiser is built with these constants
        raise ConfigError("model.adam_beta/adam_epsilon other than (0.9, 0.999)/1e-7 are not supported")
    return env, model_cfg, agent_cfg, train_cfg
