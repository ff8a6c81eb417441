"""Cliff Driver: accelerate towards a cliff edge without going over."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .base import EpisodeDone, StepResult

SPEC = "(!agent_fallen_off_cliff) U episode_ended"
ALPHABET = ("agent_fallen_off_cliff", "episode_ended")

REWARD_FALLEN = -5.0
# actions available to exhaustive lookahead
BPS_BINS = (-1.0, -0.1, 0.1, 1.0)


@dataclass(frozen=True)
class CliffConfig:
    x0: float = 10.0
    p_stick: float = 0.1
    episode_length: int = 20

    def __post_init__(self):
        if not 0.0 <= self.p_stick <= 1.0:
            raise ValueError("p_stick must lie in [0, 1]")
        if self.x0 <= 0:
            raise ValueError("x0 must be positive")


@dataclass
class CliffState:
    x: float
    v: float
    prev_action: float
    t: int
    p_stick: float
    rng: np.random.Generator = field(repr=False)
    done: bool = False

    def copy(self) -> "CliffState":
        return CliffState(self.x, self.v, self.prev_action, self.t, self.p_stick,
                          copy.deepcopy(self.rng), self.done)


def transition(s: CliffState, action: float, stuck: bool, x0: float, episode_length: int):
    """Deterministic part of the dynamics given the stick outcome.

    Returns ``(x, v, applied, t, reward, valuation, done)``.
    """
    if s.done:
        raise EpisodeDone("episode already finished")
    applied = s.prev_action if stuck else float(action)
    v = max(0.0, s.v + applied)
    x = s.x - v
    t = s.t + 1
    fallen = x < 0
    timeout = t >= episode_length
    reward = REWARD_FALLEN if fallen else 1.0 - x / x0
    valuation = set()
    if fallen:
        valuation.add("agent_fallen_off_cliff")
    elif timeout:
        valuation.add("episode_ended")
    return x, v, applied, t, reward, frozenset(valuation), fallen or timeout


class CliffDriver:
    name = "cd"
    spec = SPEC
    alphabet = ALPHABET
    n_actions = 1
    discrete = False
    observation_shape = (2,)

    def __init__(self, config: CliffConfig | None = None):
        self.config = config or CliffConfig()
        self.state: CliffState | None = None

    @property
    def episode_length(self) -> int:
        return self.config.episode_length

    def reset(self, seed: int) -> np.ndarray:
        self.state = CliffState(
            x=self.config.x0, v=0.0, prev_action=0.0, t=0,
            p_stick=self.config.p_stick, rng=np.random.default_rng([seed, 13]),
        )
        return self.observe(self.state)

    @staticmethod
    def observe(s: CliffState) -> np.ndarray:
        return np.array([s.x, s.v], dtype=np.float32)

    def step(self, action: float) -> StepResult:
        self.state, result = self._advance(self.state, action)
        return result

    def _check(self, action) -> float:
        a = float(np.asarray(action).reshape(-1)[0])
        if not -1.0 <= a <= 1.0 or not np.isfinite(a):
            raise ValueError(f"action {a} outside [-1, 1]")
        return a

    def _advance(self, s: CliffState, action) -> tuple:
        a = self._check(action)
        if s.done:
            raise EpisodeDone("episode already finished")
        stuck = bool(s.rng.random() < s.p_stick)
        x, v, applied, t, reward, valuation, done = transition(
            s, a, stuck, self.config.x0, self.config.episode_length)
        nxt = CliffState(x, v, applied, t, s.p_stick, s.rng, done)
        info = {"stuck": stuck, "applied": applied}
        return nxt, StepResult(self.observe(nxt), reward, valuation, done, info)

    def clone_and_simulate(self, state: CliffState, action: float):
        return self._advance(state.copy(), action)

    def simulate(self, state: CliffState, action: float, stuck: bool):
        """Transition with an externally chosen stick outcome; ``state`` is untouched."""
        a = self._check(action)
        x, v, applied, t, reward, valuation, done = transition(
            state, a, stuck, self.config.x0, self.config.episode_length)
        nxt = CliffState(x, v, applied, t, state.p_stick, state.rng, done)
        return nxt, reward, valuation, done
