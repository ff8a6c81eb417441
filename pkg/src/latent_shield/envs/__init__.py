from .base import EpisodeDone, StepResult, read_ppm, write_ppm
from .cliff import CliffConfig, CliffDriver, CliffState
from .gridworld import ACTIONS, GridWorld, GridWorldConfig, GridWorldState

__all__ = [
    "ACTIONS", "CliffConfig", "CliffDriver", "CliffState", "EpisodeDone",
    "GridWorld", "GridWorldConfig", "GridWorldState", "StepResult",
    "make_env", "read_ppm", "write_ppm",
]


def make_env(section: dict):
    """Build an environment from the ``env`` section of an experiment config."""
    opts = dict(section)
    name = opts.pop("name")
    opts.pop("seed", None)
    if name == "vgw":
        if opts.get("unsafe_cells") is not None:
            opts["unsafe_cells"] = tuple(tuple(c) for c in opts["unsafe_cells"])
        return GridWorld(GridWorldConfig(**opts))
    if name == "cd":
        return CliffDriver(CliffConfig(**opts))
    raise ValueError(f"unknown environment {name!r}")
