"""Action filters: Monte-Carlo latent lookahead and exhaustive simulator lookahead.

Also an H-bounded-safety verifier for small explicit MDPs and the threshold
schedules used during training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Optional, Sequence

import numpy as np
import torch

from .envs.cliff import BPS_BINS
from .scltl import Labeller

log = logging.getLogger(__name__)


@dataclass
class ShieldConfig:
    horizon: int = 2
    samples: int = 20
    epsilon: float = 0.15
    noise_var: float = 0.3
    candidates: Optional[Sequence] = None

    def __post_init__(self):
        if self.horizon < 1 or self.samples < 1:
            raise ValueError("horizon and samples must be >= 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")

    @property
    def noise_std(self) -> float:
        return float(np.sqrt(self.noise_var))


@dataclass
class ShieldDecision:
    action: Any
    interfered: bool
    risk: float
    proposed: Any = None
    risks: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EpsilonSchedule:
    mode: str = "constant"
    start: float = 0.15
    end: float = 0.15
    total: int = 1

    def __post_init__(self):
        if self.mode not in ("constant", "linear"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        for v in (self.start, self.end):
            if not 0.0 < v < 1.0:
                raise ValueError("epsilon values must lie in (0, 1)")


def epsilon_at(schedule: EpsilonSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.mode == "constant":
        return schedule.start
    frac = min(step / max(schedule.total, 1), 1.0)
    return schedule.start + frac * (schedule.end - schedule.start)


def default_candidates(proposed, discrete: bool, n_actions: int = 5) -> list:
    """Fallback actions tried in order once the proposed one is rejected."""
    if discrete:
        return [a for a in range(n_actions) if a != proposed]
    cands = [b for b in BPS_BINS if b != proposed]
    neg = -float(proposed)
    if neg != proposed and neg not in cands:
        cands.append(neg)
    return cands


# ---------------------------------------------------------------------------
# latent shield


def estimate_violation_probability(model, state, first_action, policy, cfg: ShieldConfig,
                                   generator: torch.Generator | None = None) -> float:
    """Fraction of ``cfg.samples`` imagined futures that hit a predicted violation."""
    flags = model.rollout_unsafe(state, [first_action], policy, cfg.horizon, cfg.samples,
                                 cfg.noise_std, generator)
    return float(np.mean(flags[0]))


def abps_filter(model, state, proposed, policy, cfg: ShieldConfig,
                generator: torch.Generator | None = None, epsilon: float | None = None,
                discrete: bool = True, n_actions: int = 5) -> ShieldDecision:
    """Accept ``proposed`` unless its estimated risk exceeds epsilon.

    On rejection the remaining candidates are tried in order and the first
    with risk <= epsilon is returned; if none qualifies a uniformly random
    candidate is taken.
    """
    eps = cfg.epsilon if epsilon is None else epsilon
    risk = estimate_violation_probability(model, state, proposed, policy, cfg, generator)
    risks = {proposed: risk}
    if risk <= eps:
        return ShieldDecision(proposed, False, risk, proposed, risks)

    cands = list(cfg.candidates) if cfg.candidates is not None else default_candidates(proposed, discrete, n_actions)
    cands = [c for c in cands if c != proposed]
    if not cands:
        raise ValueError("empty candidate set")
    # candidates are scored in one batch; the first acceptable one wins
    flags = model.rollout_unsafe(state, cands, policy, cfg.horizon, cfg.samples, cfg.noise_std, generator)
    for c, f in zip(cands, flags):
        risks[c] = float(np.mean(f))
    for c in cands:
        if risks[c] <= eps:
            return ShieldDecision(c, True, risks[c], proposed, risks)
    pick = cands[int(torch.randint(len(cands), (), generator=generator))]
    log.debug("no safe action found; random fallback %r (risks %s)", pick, risks)
    return ShieldDecision(pick, True, risks[pick], proposed, risks)


# ---------------------------------------------------------------------------
# exhaustive lookahead


class BudgetExceeded(RuntimeError):
    pass


def exists_safe_path(step: Callable, roots: Sequence, first_action, horizon: int,
                     actions: Sequence, budget: int = 1_000_000) -> bool:
    """Whether some action sequence of ``horizon`` steps starting with ``first_action`` is safe.

    ``roots`` is a list of particles (one per sampled future); a sequence is
    safe only when it is safe for every particle. ``step(particle, action,
    k, depth)`` returns ``(particle', violated, terminal)`` for particle
    index ``k``. Terminal particles stop contributing.
    """
    counter = [0]

    def advance(particles, action, depth):
        out = []
        for k, p in particles:
            counter[0] += 1
            if counter[0] > budget:
                raise BudgetExceeded(f"lookahead exceeded {budget} simulated steps")
            nxt, violated, terminal = step(p, action, k, depth)
            if violated:
                return None
            if not terminal:
                out.append((k, nxt))
        return out

    def search(particles, depth) -> bool:
        if depth == horizon or not particles:
            return True
        for a in actions:
            nxt = advance(particles, a, depth)
            if nxt is not None and search(nxt, depth + 1):
                return True
        return False

    start = advance(list(enumerate(roots)), first_action, 0)
    return start is not None and search(start, 1)


def _env_stepper(env, labeller: Labeller | None, stick: np.ndarray | None):
    """Adapt an environment's pure transition to :func:`exists_safe_path`."""
    base = labeller or Labeller(_parse_env_spec(env))

    if env.discrete:
        def step(p, a, k, depth):
            state, lab = p
            nxt, _, valuation, done, _ = env.simulate(state, a)
            lab = lab.copy()
            violated = lab.step(valuation)
            return (nxt, lab), violated, done
    else:
        def step(p, a, k, depth):
            state, lab = p
            stuck = bool(stick[k, depth]) if stick is not None else False
            nxt, _, valuation, done = env.simulate(state, a, stuck)
            lab = lab.copy()
            violated = lab.step(valuation)
            return (nxt, lab), violated, done
    return step, base


def _parse_env_spec(env):
    from .scltl import parse

    return parse(env.spec, env.alphabet)


def oracle_bps_filter(env, env_state, proposed, horizon: int, candidates: Sequence | None = None,
                      labeller: Labeller | None = None, draws: int = 8,
                      rng: np.random.Generator | None = None, budget: int = 1_000_000) -> ShieldDecision:
    """Exhaustive lookahead on the true simulator.

    ``proposed`` is accepted iff some completion avoids all violations within
    ``horizon`` steps. Continuous actions are rounded to the nearest lookahead
    bin. For stochastic dynamics each sequence is replayed under ``draws``
    sampled stick patterns and must be safe under all of them.
    """
    if env.discrete:
        actions = list(range(env.n_actions))
        stick = None
        n_particles = 1
    else:
        actions = list(BPS_BINS)
        proposed = min(BPS_BINS, key=lambda b: abs(b - float(proposed)))
        p_stick = env.config.p_stick
        if p_stick > 0:
            rng = rng or np.random.default_rng(0)
            stick = rng.random((draws, horizon)) < p_stick
            n_particles = draws
        else:
            stick = None
            n_particles = 1
    if candidates is None:
        candidates = [a for a in actions if a != proposed]
    candidates = [c for c in candidates if c != proposed]
    if not candidates and not actions:
        raise ValueError("empty candidate set")
    step, lab = _env_stepper(env, labeller, stick)
    roots = [(env_state, lab)] * n_particles

    def safe(a) -> bool:
        return exists_safe_path(step, roots, a, horizon, actions, budget)

    risks = {}
    ok = safe(proposed)
    risks[proposed] = 0.0 if ok else 1.0
    if ok:
        return ShieldDecision(proposed, False, 0.0, proposed, risks)
    for c in candidates:
        ok = safe(c)
        risks[c] = 0.0 if ok else 1.0
        if ok:
            return ShieldDecision(c, True, 0.0, proposed, risks)
    # every option leads to a violation within the horizon: nothing to fix
    return ShieldDecision(proposed, False, 1.0, proposed, risks)


# ---------------------------------------------------------------------------
# explicit MDPs and bounded safety


@dataclass
class ExplicitMDP:
    """Finite MDP with (possibly) nondeterministic successors."""

    states: list
    actions: list
    successors: Callable[[Hashable, Any], Iterable[Hashable]]
    unsafe: frozenset
    terminal: frozenset = frozenset()


@dataclass
class BoundedSafetyResult:
    holds: bool
    counterexample: Any = None
    safe_actions: tuple = ()


def safe_first_actions(mdp: ExplicitMDP, s, horizon: int, budget: int = 1_000_000) -> list:
    """Actions that begin at least one violation-free trajectory of ``horizon`` steps."""
    # nondeterminism is resolved angelically: any safe successor keeps a path alive
    memo: dict = {}
    count = [0]

    def ok(state, depth) -> bool:
        if depth == horizon or state in mdp.terminal:
            return True
        key = (state, depth)
        if key in memo:
            return memo[key]
        count[0] += 1
        if count[0] > budget:
            raise BudgetExceeded(f"verifier exceeded {budget} states")
        res = any(_ok_after(state, a, depth) for a in mdp.actions)
        memo[key] = res
        return res

    def _ok_after(state, a, depth) -> bool:
        return any(n not in mdp.unsafe and ok(n, depth + 1) for n in mdp.successors(state, a))

    return [a for a in mdp.actions if _ok_after(s, a, 0)]


def check_bounded_safety(mdp: ExplicitMDP, policy: Callable[[Hashable], Any], horizon: int,
                         budget: int = 100_000) -> BoundedSafetyResult:
    """Verify H-bounded safety of ``policy`` on every state of ``mdp``.

    For each state either the policy's action starts a safe trajectory, or
    every trajectory from the state violates within the horizon.
    """
    if len(mdp.states) > budget:
        raise BudgetExceeded(f"{len(mdp.states)} states exceed the budget of {budget}")
    for s in mdp.states:
        if s in mdp.terminal:
            continue
        good = safe_first_actions(mdp, s, horizon)
        if good and policy(s) not in good:
            return BoundedSafetyResult(False, s, tuple(good))
    return BoundedSafetyResult(True)


def grid_mdp(width: int, height: int, unsafe: Iterable) -> ExplicitMDP:
    """Deterministic grid navigation MDP over agent positions (row, col)."""
    moves = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1), 4: (0, 0)}

    def successors(s, a):
        dr, dc = moves[a]
        return [(min(max(s[0] + dr, 0), height - 1), min(max(s[1] + dc, 0), width - 1))]

    states = [(r, c) for r in range(height) for c in range(width)]
    return ExplicitMDP(states, list(moves), successors, frozenset(map(tuple, unsafe)))


def mdp_shielded_policy(mdp: ExplicitMDP, base: Callable, horizon: int) -> Callable:
    """Wrap ``base`` with exhaustive lookahead over ``mdp`` (fallback: keep ``base``)."""

    def policy(s):
        a = base(s)
        good = safe_first_actions(mdp, s, horizon)
        if not good or a in good:
            return a
        return good[0]

    return policy
