"""Visual Grid World: reach randomly placed targets, avoid red cells."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .base import EpisodeDone, StepResult

ACTIONS = ("up", "down", "left", "right", "stay")
_MOVES = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1), 4: (0, 0)}

SPEC = "(!agent_in_red_square) U episode_ended"
ALPHABET = ("agent_in_red_square", "episode_ended")

REWARD_TARGET = 100.0
REWARD_UNSAFE = -40.0
REWARD_NO_MOVE = -10.0
REWARD_STEP = -1.0

# hand-authored layout for the default 8x8 fixed grid, (row, col)
FIXED_8X8_UNSAFE = ((1, 5), (2, 2), (3, 2), (4, 5), (5, 5), (6, 1))

GREEN = (0.0, 1.0, 0.0)
BLACK = (0.0, 0.0, 0.0)
RED = (1.0, 0.0, 0.0)
WHITE = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class GridWorldConfig:
    width: int = 8
    height: int = 8
    mode: str = "fixed"  # "fixed" or "procedural"
    n_unsafe: int = 6
    layout_seed: int = 0
    unsafe_cells: Optional[tuple] = None  # explicit (row, col) cells for fixed mode
    episode_length: int = 500
    render_size: int = 64

    def __post_init__(self):
        if self.mode not in ("fixed", "procedural"):
            raise ValueError(f"unknown grid mode {self.mode!r}")
        if self.width < 2 or self.height < 1:
            raise ValueError("grid too small")
        free = self.width * self.height - self.n_unsafe
        if self.unsafe_cells is not None:
            free = self.width * self.height - len(set(map(tuple, self.unsafe_cells)))
        if free < 2:
            raise ValueError(
                f"{self.n_unsafe} unsafe cells leave fewer than 2 free cells on a "
                f"{self.width}x{self.height} grid"
            )
        if self.render_size < max(self.width, self.height):
            raise ValueError("render_size must be at least one pixel per cell")


@dataclass(frozen=True)
class GridWorldState:
    width: int
    height: int
    agent: tuple
    target: tuple
    unsafe: frozenset
    t: int
    seed: int
    captures: int = 0
    done: bool = False


def default_fixed_layout(cfg: GridWorldConfig) -> frozenset:
    if cfg.unsafe_cells is not None:
        return frozenset(tuple(c) for c in cfg.unsafe_cells)
    if (cfg.width, cfg.height, cfg.n_unsafe) == (8, 8, 6):
        return frozenset(FIXED_8X8_UNSAFE)
    return _draw_layout(cfg, np.random.default_rng([cfg.layout_seed, 7]))


def _draw_layout(cfg: GridWorldConfig, rng: np.random.Generator) -> frozenset:
    cells = cfg.width * cfg.height
    picks = rng.choice(cells, size=cfg.n_unsafe, replace=False)
    return frozenset((int(i) // cfg.width, int(i) % cfg.width) for i in picks)


def _free_cells(state_like, exclude=()) -> list:
    w, h, unsafe = state_like
    skip = set(unsafe) | set(exclude)
    return [(r, c) for r in range(h) for c in range(w) if (r, c) not in skip]


def _relocate_target(s: GridWorldState) -> tuple:
    rng = np.random.default_rng([s.seed, 11, s.captures])
    free = _free_cells((s.width, s.height, s.unsafe), exclude=[s.agent])
    return free[int(rng.integers(len(free)))]


def transition(s: GridWorldState, action: int, episode_length: int):
    """Pure transition: ``(state', reward, valuation, done, moved)``."""
    if s.done:
        raise EpisodeDone("episode already finished")
    if action not in _MOVES:
        raise ValueError(f"invalid action {action!r}")
    dr, dc = _MOVES[action]
    r, c = s.agent
    nr = min(max(r + dr, 0), s.height - 1)
    nc = min(max(c + dc, 0), s.width - 1)
    agent = (nr, nc)
    moved = agent != s.agent
    t = s.t + 1
    done = t >= episode_length
    in_red = agent in s.unsafe
    captures, target = s.captures, s.target
    if moved and agent == s.target:
        reward = REWARD_TARGET
        captures += 1
    elif in_red:
        reward = REWARD_UNSAFE
    elif not moved:
        reward = REWARD_NO_MOVE
    else:
        reward = REWARD_STEP
    nxt = replace(s, agent=agent, t=t, captures=captures, done=done, target=target)
    if captures != s.captures:
        nxt = replace(nxt, target=_relocate_target(nxt))
    valuation = set()
    if in_red:
        valuation.add("agent_in_red_square")
    if done:
        valuation.add("episode_ended")
    return nxt, reward, frozenset(valuation), done, moved


def render(s: GridWorldState, size: int = 64) -> np.ndarray:
    """Draw the grid as uniform colour blocks on a ``size`` x ``size`` canvas."""
    cell = size // max(s.width, s.height)
    grid = np.ones((s.height, s.width, 3), dtype=np.float32)
    for r, c in s.unsafe:
        grid[r, c] = RED
    grid[s.target] = BLACK
    grid[s.agent] = GREEN
    img = np.repeat(np.repeat(grid, cell, axis=0), cell, axis=1)
    canvas = np.ones((size, size, 3), dtype=np.float32)
    canvas[: img.shape[0], : img.shape[1]] = img
    return canvas


class GridWorld:
    """Seedable grid world; observations are rendered RGB frames."""

    name = "vgw"
    spec = SPEC
    alphabet = ALPHABET
    n_actions = len(ACTIONS)
    discrete = True

    def __init__(self, config: GridWorldConfig | None = None):
        self.config = config or GridWorldConfig()
        self.state: GridWorldState | None = None
        self._fixed = default_fixed_layout(self.config) if self.config.mode == "fixed" else None

    @property
    def observation_shape(self) -> tuple:
        return (self.config.render_size, self.config.render_size, 3)

    @property
    def episode_length(self) -> int:
        return self.config.episode_length

    def layout(self, seed: int) -> frozenset:
        if self._fixed is not None:
            return self._fixed
        return _draw_layout(self.config, np.random.default_rng([seed, 3]))

    def reset(self, seed: int) -> np.ndarray:
        cfg = self.config
        unsafe = self.layout(seed)
        rng = np.random.default_rng([seed, 5])
        free = _free_cells((cfg.width, cfg.height, unsafe))
        i, j = rng.choice(len(free), size=2, replace=False)
        self.state = GridWorldState(
            width=cfg.width, height=cfg.height, agent=free[int(i)], target=free[int(j)],
            unsafe=unsafe, t=0, seed=int(seed),
        )
        return self.render(self.state)

    def render(self, state: GridWorldState | None = None) -> np.ndarray:
        return render(state or self.state, self.config.render_size)

    def step(self, action: int) -> StepResult:
        self.state, result = self.clone_and_simulate(self.state, action)
        return result

    def simulate(self, state: GridWorldState, action: int):
        """Transition without rendering; for exhaustive lookahead."""
        return transition(state, int(action), self.config.episode_length)

    def clone_and_simulate(self, state: GridWorldState, action: int):
        nxt, reward, valuation, done, moved = self.simulate(state, action)
        obs = render(nxt, self.config.render_size)
        return nxt, StepResult(obs, reward, valuation, done, {"moved": moved})
