"""Outer training loop: seed data, model/agent updates, shielded collection, evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import numerics as nx
from .policy import ActorCritic, AgentConfig, act
from .scltl import Labeller, parse
from .shield import (EpsilonSchedule, ShieldConfig, ShieldDecision, abps_filter, epsilon_at,
                     oracle_bps_filter)
from .srssm import SRSSM, Latent, ModelConfig

log = logging.getLogger(__name__)

METRICS_HEADER = ["episode", "phase", "train_reward", "train_violations", "interferences",
                  "model_loss", "obs_loss", "reward_loss", "kl_loss", "violation_loss", "epsilon"]
EVAL_HEADER = ["seed", "episode", "test_reward", "test_violations"]
INTERFERENCE_HEADER = ["episode", "step", "proposed", "chosen", "proposed_risk", "chosen_risk"]


# ---------------------------------------------------------------------------
# data


@dataclass
class Episode:
    """One episode; index 0 holds the reset observation with a null action."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    raw_rewards: np.ndarray
    violations: np.ndarray
    interfered: np.ndarray
    valuations: list
    seed: int

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def steps(self) -> int:
        return len(self.rewards) - 1


class ExperienceBuffer:
    def __init__(self):
        self.episodes: list[Episode] = []

    def add(self, ep: Episode) -> None:
        if not set(np.unique(ep.violations)) <= {0, 1}:
            raise ValueError("violation flags must be 0 or 1")
        self.episodes.append(ep)

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def total_steps(self) -> int:
        return sum(e.steps for e in self.episodes)

    def count_sequences(self, length: int) -> int:
        return sum(max(len(e) - length + 1, 0) for e in self.episodes)

    def sample(self, batch: int, length: int, rng: np.random.Generator) -> dict:
        """``batch`` windows of exactly ``length`` steps, uniform over (episode, offset)."""
        counts = np.array([max(len(e) - length + 1, 0) for e in self.episodes])
        total = int(counts.sum())
        if total == 0:
            raise ValueError(f"no episode holds a sequence of length {length}")
        picks = rng.integers(total, size=batch)
        bounds = np.cumsum(counts)
        out = {k: [] for k in ("obs", "actions", "rewards", "violations")}
        for p in picks:
            i = int(np.searchsorted(bounds, p, side="right"))
            off = int(p - (bounds[i] - counts[i]))
            e = self.episodes[i]
            sl = slice(off, off + length)
            out["obs"].append(e.obs[sl])
            out["actions"].append(e.actions[sl])
            out["rewards"].append(e.rewards[sl])
            out["violations"].append(e.violations[sl])
        return {k: np.stack(v) for k, v in out.items()}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ScheduleState:
    kind: str = "phased"  # always_off | always_on | phased
    phases: tuple = ((10, 3), (20, 2), (30, 1))

    def __post_init__(self):
        if self.kind not in ("always_off", "always_on", "phased"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        self.phases = tuple((int(t), int(c)) for t, c in self.phases)
        thresholds = [t for t, _ in self.phases]
        if any(c < 1 for _, c in self.phases):
            raise ValueError("cadence must be >= 1")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError("phase thresholds must be strictly increasing")


def schedule_enabled(state: ScheduleState, episode: int) -> bool:
    """Whether shielding is on for ``episode`` (0-based, seed episodes included).

    In a phase starting at episode ``t0`` with cadence ``c`` shielding is on
    for episodes ``t0, t0 + c, t0 + 2c, ...``.
    """
    if episode < 0:
        raise ValueError("episode must be >= 0")
    if state.kind == "always_off":
        return False
    if state.kind == "always_on":
        return True
    active = None
    for threshold, cadence in state.phases:
        if episode >= threshold:
            active = (threshold, cadence)
    if active is None:
        return False
    return (episode - active[0]) % active[1] == 0


@dataclass
class TrainConfig:
    seed_episodes: int = 5
    train_steps: int = 100
    batch_size: int = 50
    seq_len: int = 50
    total_episodes: int = 100
    r_punish: float = -40.0
    reward_scale: float = 1.0
    model_lr: float = 1e-3
    shield_mode: str = "latent"  # latent | none | oracle
    schedule: ScheduleState = field(default_factory=ScheduleState)
    epsilon: EpsilonSchedule = field(default_factory=lambda: EpsilonSchedule("linear", 0.5, 0.125, 100))
    shield: ShieldConfig = field(default_factory=ShieldConfig)
    oracle_draws: int = 8
    eval_episodes: int = 10

    def __post_init__(self):
        for name in ("seed_episodes", "batch_size", "seq_len", "total_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.train_steps < 0:
            raise ValueError("train_steps must be >= 0")
        if self.shield_mode not in ("latent", "none", "oracle"):
            raise ValueError(f"unknown shield mode {self.shield_mode!r}")


@dataclass
class EpisodeStats:
    reward: float
    violations: int
    interferences: int
    punished_reward: float


# ---------------------------------------------------------------------------
# agent


class Agent:
    """World model plus actor-critic, with the rngs that drive them."""

    def __init__(self, model_cfg: ModelConfig, agent_cfg: AgentConfig, model_lr: float, seed: int):
        torch.manual_seed(seed)
        self.model = SRSSM(model_cfg)
        feat = model_cfg.deter + model_cfg.stoch
        self.ac = ActorCritic(feat, model_cfg.n_actions, model_cfg.discrete, agent_cfg)
        self.model_opt = nx.Adam(self.model, model_lr)
        self.generator = torch.Generator().manual_seed(seed + 1)
        self.discrete = model_cfg.discrete
        self.n_actions = model_cfg.n_actions

    def initial_state(self) -> Latent:
        return self.model.initial_state(1)

    @torch.no_grad()
    def observe(self, state: Latent, action, obs) -> Latent:
        embed = self.model.encode(np.asarray(obs)[None])
        a = self.model.encode_action(torch.as_tensor([action])).reshape(1, -1)
        nxt, _, _ = self.model.obs_step(state, a, embed, self.generator)
        return nxt

    def null_action(self):
        return 0 if self.discrete else 0.0

    def policy(self, feat, noise_std=0.0, generator=None):
        return self.ac.actor(feat, noise_std, generator)

    def tensors(self) -> dict:
        out = nx.module_tensors("model", self.model)
        out.update(nx.module_tensors("actor", self.ac.actor))
        out.update(nx.module_tensors("critic", self.ac.critic))
        return out

    def load(self, tensors: dict) -> None:
        nx.load_into(self.model, "model", tensors)
        nx.load_into(self.ac.actor, "actor", tensors)
        nx.load_into(self.ac.critic, "critic", tensors)


def _store_obs(obs: np.ndarray) -> np.ndarray:
    if obs.ndim == 3:
        return np.clip(np.rint(obs * 255), 0, 255).astype(np.uint8)
    return obs.astype(np.float32)


def random_action(env, rng: np.random.Generator):
    if env.discrete:
        return int(rng.integers(env.n_actions))
    return float(rng.uniform(-1.0, 1.0))


# ---------------------------------------------------------------------------
# collection


def collect_episode(env, agent: Optional[Agent], ep_seed: int, *, shield_on: bool = False,
                    shield_mode: str = "latent", shield_cfg: ShieldConfig | None = None,
                    epsilon: float | None = None, r_punish: float | None = -40.0,
                    explore: bool = True, random_policy: bool = False,
                    rng: np.random.Generator | None = None, oracle_draws: int = 8,
                    shield_fn: Callable | None = None, events: list | None = None,
                    episode_index: int = 0) -> tuple[Episode, EpisodeStats]:
    """Run one episode and return the stored tuples plus statistics.

    ``r_punish=None`` disables reward rewriting (evaluation). ``shield_fn``
    overrides the shield with ``fn(latent, env, proposed) -> ShieldDecision``.
    """
    rng = rng or np.random.default_rng(ep_seed)
    labeller = Labeller(parse(env.spec, env.alphabet))
    shield_cfg = shield_cfg or ShieldConfig()
    obs = env.reset(ep_seed)
    state = agent.initial_state() if agent is not None else None
    null = 0 if env.discrete else 0.0
    if state is not None:
        state = agent.observe(state, null, obs)
    obs_l, act_l, rew_l, raw_l, viol_l, int_l, val_l = [_store_obs(obs)], [null], [0.0], [0.0], [0], [False], [frozenset()]
    stats = EpisodeStats(0.0, 0, 0, 0.0)
    done = False
    t = 0
    while not done:
        t += 1
        if random_policy or agent is None:
            proposed = random_action(env, rng)
        else:
            proposed = act(agent.ac.actor, state, explore, agent.generator,
                           agent.ac.cfg.explore_noise, agent.ac.cfg.explore_mix)
        decision: ShieldDecision | None = None
        if shield_on:
            if shield_fn is not None:
                decision = shield_fn(state, env, proposed)
            elif shield_mode == "latent":
                decision = abps_filter(agent.model, state, proposed, agent.policy, shield_cfg,
                                       agent.generator, epsilon, env.discrete, env.n_actions)
            elif shield_mode == "oracle":
                decision = oracle_bps_filter(env, env.state, proposed, shield_cfg.horizon,
                                             labeller=labeller, draws=oracle_draws, rng=rng)
        if decision is not None:
            action, interfered = decision.action, decision.interfered
        else:
            action, interfered = proposed, False
        if interfered and events is not None:
            events.append((episode_index, t, proposed, action,
                           decision.risks.get(proposed, float("nan")), decision.risk))
        res = env.step(action)
        violated = labeller.step(res.valuation)
        reward = res.reward
        if r_punish is not None and (violated or interfered):
            reward = r_punish
        stats.reward += res.reward
        stats.punished_reward += reward
        stats.violations += int(violated)
        stats.interferences += int(interfered)
        obs_l.append(_store_obs(res.observation))
        act_l.append(action)
        rew_l.append(reward)
        raw_l.append(res.reward)
        viol_l.append(int(violated))
        int_l.append(interfered)
        val_l.append(res.valuation)
        done = res.done
        if not done and state is not None:
            state = agent.observe(state, action, res.observation)
    ep = Episode(
        obs=np.stack(obs_l),
        actions=np.asarray(act_l, dtype=np.int64 if env.discrete else np.float32),
        rewards=np.asarray(rew_l, dtype=np.float32),
        raw_rewards=np.asarray(raw_l, dtype=np.float32),
        violations=np.asarray(viol_l, dtype=np.uint8),
        interfered=np.asarray(int_l, dtype=bool),
        valuations=val_l,
        seed=int(ep_seed),
    )
    return ep, stats


def seed_collect(env, n: int, rng: np.random.Generator, r_punish: float | None = -40.0,
                 buffer: ExperienceBuffer | None = None) -> ExperienceBuffer:
    """``n`` uniform-random episodes."""
    if n < 1:
        raise ValueError("need at least one seed episode")
    buffer = buffer or ExperienceBuffer()
    for _ in range(n):
        ep, _ = collect_episode(env, None, int(rng.integers(2**31)), random_policy=True,
                                r_punish=r_punish, rng=rng)
        buffer.add(ep)
    return buffer


# ---------------------------------------------------------------------------
# learning


def train_cycle(buffer: ExperienceBuffer, agent: Agent, cfg: TrainConfig,
                rng: np.random.Generator) -> dict | None:
    """``cfg.train_steps`` model updates, each followed by an imagination update of the agent."""
    if cfg.train_steps == 0:
        return None
    if buffer.count_sequences(cfg.seq_len) == 0:
        raise ValueError("insufficient data: no sequence of the configured length")
    sums: dict = {}
    for _ in range(cfg.train_steps):
        batch = buffer.sample(cfg.batch_size, cfg.seq_len, rng)
        states, loss = agent.model.observe_sequence(
            batch["obs"], batch["actions"], batch["rewards"] * cfg.reward_scale,
            batch["violations"], agent.generator)
        if not torch.isfinite(loss.total):
            raise FloatingPointError("non-finite model loss")
        agent.model_opt.zero_grad()
        loss.total.backward()
        agent.model_opt.step()
        stats = agent.ac.update(agent.model, states.detach(), agent.generator)
        for k, v in {**loss.as_floats(), **stats}.items():
            sums[k] = sums.get(k, 0.0) + v
    return {k: v / cfg.train_steps for k, v in sums.items()}


@dataclass
class EvalResult:
    rows: list  # (seed, episode, reward, violations)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows], dtype=float)

    @property
    def violations(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows], dtype=float)

    def summary(self) -> dict:
        if not self.rows:
            return {"test_reward_mean": float("nan"), "test_reward_std": float("nan"),
                    "test_violations_mean": float("nan"), "test_violations_std": float("nan")}
        return {"test_reward_mean": float(self.rewards.mean()), "test_reward_std": float(self.rewards.std()),
                "test_violations_mean": float(self.violations.mean()),
                "test_violations_std": float(self.violations.std())}


def evaluate(env, agent: Agent, episodes: int, *, shield_mode: str = "latent",
             shield_cfg: ShieldConfig | None = None, epsilon: float | None = None,
             run_seed: int = 0, oracle_draws: int = 8) -> EvalResult:
    """Greedy episodes; raw environment rewards, no reward rewriting, no learning."""
    rows = []
    ss = np.random.SeedSequence([run_seed, 99])
    for i in range(episodes):
        ep_seed = int(np.random.default_rng(ss.spawn(1)[0]).integers(2**31))
        _, stats = collect_episode(env, agent, ep_seed, shield_on=shield_mode != "none",
                                   shield_mode=shield_mode, shield_cfg=shield_cfg, epsilon=epsilon,
                                   r_punish=None, explore=False,
                                   rng=np.random.default_rng(ep_seed), oracle_draws=oracle_draws)
        rows.append((run_seed, i, stats.reward, stats.violations))
    return EvalResult(rows)


# ---------------------------------------------------------------------------
# driver


@dataclass
class RunResult:
    metrics: list
    agent: Agent
    buffer: ExperienceBuffer
    events: list
    train_violations: int
    wall_time: float


def train(env, model_cfg: ModelConfig, agent_cfg: AgentConfig, cfg: TrainConfig, seed: int,
          on_episode: Callable[[dict], None] | None = None) -> RunResult:
    """The full loop: seed episodes, then alternate learning and collection."""
    t0 = time.time()
    ss = np.random.SeedSequence(seed)
    data_rng, env_rng, agent_seed = (np.random.default_rng(ss.spawn(1)[0]),
                                     np.random.default_rng(ss.spawn(1)[0]),
                                     int(ss.generate_state(1)[0] % (2**31)))
    agent = Agent(model_cfg, agent_cfg, cfg.model_lr, agent_seed)
    buffer = ExperienceBuffer()
    metrics, events = [], []
    train_violations = 0
    blank = {k: float("nan") for k in ("total", "observation", "reward", "kl", "violation")}
    for episode in range(cfg.total_episodes):
        ep_seed = int(env_rng.integers(2**31))
        losses = None
        if episode < cfg.seed_episodes:
            phase = "seed"
            eps_now = epsilon_at(cfg.epsilon, episode)
            # the oracle needs no model, so it filters the random seed episodes too
            oracle = cfg.shield_mode == "oracle"
            ep, stats = collect_episode(env, None, ep_seed, random_policy=True, r_punish=cfg.r_punish,
                                        rng=np.random.default_rng(ep_seed), shield_on=oracle,
                                        shield_mode="oracle", shield_cfg=cfg.shield,
                                        oracle_draws=cfg.oracle_draws, events=events,
                                        episode_index=episode)
            if oracle:
                phase = "seed_shielded"
        else:
            losses = train_cycle(buffer, agent, cfg, data_rng)
            # the schedule eases in the learned shield; the oracle baseline is always on
            on = cfg.shield_mode == "oracle" or (cfg.shield_mode == "latent"
                                                 and schedule_enabled(cfg.schedule, episode))
            phase = "shielded" if on else "unshielded"
            eps_now = epsilon_at(cfg.epsilon, episode)
            ep, stats = collect_episode(env, agent, ep_seed, shield_on=on, shield_mode=cfg.shield_mode,
                                        shield_cfg=cfg.shield, epsilon=eps_now, r_punish=cfg.r_punish,
                                        explore=True, rng=np.random.default_rng(ep_seed),
                                        oracle_draws=cfg.oracle_draws, events=events,
                                        episode_index=episode)
        buffer.add(ep)
        train_violations += stats.violations
        lf = losses or blank
        row = {
            "episode": episode, "phase": phase, "train_reward": stats.reward,
            "train_violations": stats.violations, "interferences": stats.interferences,
            "model_loss": lf["total"], "obs_loss": lf["observation"], "reward_loss": lf["reward"],
            "kl_loss": lf["kl"], "violation_loss": lf["violation"], "epsilon": eps_now,
            "entropy": lf.get("entropy", float("nan")), "imagined_return": lf.get("return", float("nan")),
        }
        metrics.append(row)
        log.info("episode %d %s reward %.1f violations %d interferences %d model %.3f",
                 episode, phase, stats.reward, stats.violations, stats.interferences, lf["total"])
        if on_episode is not None:
            on_episode(row)
    return RunResult(metrics, agent, buffer, events, train_violations, time.time() - t0)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(round(float(v), 6))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            vals = [r[k] for k in header] if isinstance(r, dict) else list(r)
            w.writerow([_fmt(v) for v in vals])
