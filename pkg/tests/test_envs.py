import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_shield.envs import (
    CliffConfig, CliffDriver, EpisodeDone, GridWorld, GridWorldConfig, make_env, read_ppm, write_ppm,
)
from latent_shield.envs import gridworld as gw
from latent_shield.envs.cliff import CliffState, transition as cd_transition


def grid_state(agent, target, unsafe=(), t=0, w=8, h=8):
    return gw.GridWorldState(w, h, agent, target, frozenset(unsafe), t, seed=0)


# -- grid world rewards ------------------------------------------------------

def test_reward_target():
    s = grid_state((3, 3), (3, 4))
    s2, r, val, done, moved = gw.transition(s, 3, 500)
    assert r == 100.0 and moved and s2.captures == 1
    assert s2.target != s2.agent and s2.target not in s2.unsafe


def test_reward_unsafe_entry_and_staying_on_red():
    s = grid_state((3, 3), (0, 0), unsafe=[(3, 4)])
    s2, r, val, _, _ = gw.transition(s, 3, 500)
    assert r == -40.0 and "agent_in_red_square" in val
    _, r, val, _, _ = gw.transition(s2, 4, 500)
    assert r == -40.0 and "agent_in_red_square" in val


def test_reward_no_move():
    s = grid_state((3, 3), (0, 0))
    assert gw.transition(s, 4, 500)[1] == -10.0
    corner = grid_state((0, 0), (5, 5))
    _, r, _, _, moved = gw.transition(corner, 0, 500)
    assert r == -10.0 and not moved


def test_reward_plain_move():
    assert gw.transition(grid_state((3, 3), (0, 0)), 1, 500)[1] == -1.0


def test_target_beats_unsafe_precedence_constants():
    assert (gw.REWARD_TARGET, gw.REWARD_UNSAFE, gw.REWARD_NO_MOVE, gw.REWARD_STEP) == (100.0, -40.0, -10.0, -1.0)


def test_episode_end_and_done_error():
    s = grid_state((3, 3), (0, 0), t=499)
    s2, _, val, done, _ = gw.transition(s, 1, 500)
    assert done and "episode_ended" in val
    with pytest.raises(EpisodeDone):
        gw.transition(s2, 1, 500)
    with pytest.raises(ValueError):
        gw.transition(s, 7, 500)


@given(st.integers(0, 7), st.integers(0, 7), st.integers(0, 4), st.integers(0, 1000))
def test_reward_totality_and_valuation_consistency(r, c, a, seed):
    env = GridWorld(GridWorldConfig(render_size=16))
    env.reset(seed)
    s = env.state
    if (r, c) in s.unsafe or (r, c) == s.target:
        return
    from dataclasses import replace

    s = replace(s, agent=(r, c))
    _, rew, val, _, moved = gw.transition(s, a, 500)
    assert rew in (100.0, -40.0, -10.0, -1.0)
    assert (rew == -40.0) == ("agent_in_red_square" in val)
    if rew == -1.0:
        assert moved


# -- layouts, resets, rendering -----------------------------------------------

def test_fixed_layout_is_stable():
    env = GridWorld()
    env.reset(1)
    a = env.state.unsafe
    env.reset(2)
    assert env.state.unsafe == a == frozenset(gw.FIXED_8X8_UNSAFE)


def test_procedural_layouts_differ():
    # 64 choose 6 layouts: a repeat among 50 draws has probability below 1e-4
    env = GridWorld(GridWorldConfig(mode="procedural"))
    layouts = {env.layout(s) for s in range(50)}
    assert len(layouts) == 50


def test_spawn_never_unsafe_or_target():
    env = GridWorld(GridWorldConfig(mode="procedural", render_size=8))
    for seed in range(10_000):
        env.reset(seed)
        s = env.state
        assert s.agent not in s.unsafe and s.agent != s.target and s.target not in s.unsafe


def test_too_many_unsafe_cells():
    with pytest.raises(ValueError):
        GridWorldConfig(width=3, height=3, n_unsafe=8)


def test_render_blocks():
    s = grid_state((0, 0), (7, 7))
    img = gw.render(s, 64)
    assert img.shape == (64, 64, 3)
    green = np.all(img == gw.GREEN, -1)
    black = np.all(img == gw.BLACK, -1)
    assert green.sum() == 64 and green[:8, :8].all()
    assert black.sum() == 64 and black[56:, 56:].all()
    assert np.array_equal(img, gw.render(s, 64))


def test_agent_drawn_over_red():
    s = grid_state((2, 2), (7, 7), unsafe=[(2, 2)])
    img = gw.render(s, 16)
    assert tuple(img[4, 4]) == gw.GREEN


def test_clone_isolation_and_determinism():
    env = GridWorld(GridWorldConfig(render_size=16))
    env.reset(3)
    s0 = env.state
    s1, res = env.clone_and_simulate(s0, 1)
    env.step(1)
    assert env.state == s1 and s0.t == 0
    traj = []
    for _ in range(2):
        env.reset(9)
        traj.append([env.step(a).reward for a in [0, 1, 2, 3, 4] * 4])
    assert traj[0] == traj[1]


def test_ppm_round_trip(tmp_path):
    img = gw.render(grid_state((1, 1), (2, 2), [(3, 3)]), 16)
    write_ppm(tmp_path / "f.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "f.ppm"), img)


# -- cliff driver --------------------------------------------------------------

def cliff_state(x=10.0, v=0.0, prev=0.0, t=0):
    return CliffState(x, v, prev, t, 0.0, np.random.default_rng(0))


def test_cliff_unit_step_example():
    x, v, applied, t, r, val, done = cd_transition(cliff_state(), 1.0, False, 10.0, 20)
    assert (x, v, r, done) == (9.0, 1.0, pytest.approx(0.1), False)


def test_cliff_fall():
    x, v, _, _, r, val, done = cd_transition(cliff_state(x=0.5, v=1.0), 0.0, False, 10.0, 20)
    assert x < 0 and r == -5.0 and done and "agent_fallen_off_cliff" in val


def test_cliff_braking_does_not_reverse():
    x, v, *_ = cd_transition(cliff_state(), -1.0, False, 10.0, 20)
    assert v == 0.0 and x == 10.0


def test_cliff_reward_at_edge_and_start():
    assert cd_transition(cliff_state(x=10.0), 0.0, False, 10.0, 20)[4] == 0.0
    assert cd_transition(cliff_state(x=1.0, v=1.0), 0.0, False, 10.0, 20)[4] == 1.0


def test_cliff_stuck_repeats_previous():
    _, v, applied, *_ = cd_transition(cliff_state(v=1.0, prev=1.0), -1.0, True, 10.0, 20)
    assert applied == 1.0 and v == 2.0


def test_cliff_timeout_valuation():
    *_, val, done = cd_transition(cliff_state(t=19), 0.0, False, 10.0, 20)
    assert done and val == frozenset({"episode_ended"})


def test_cliff_action_range():
    env = CliffDriver()
    env.reset(0)
    with pytest.raises(ValueError):
        env.step(1.5)


@given(st.floats(-1, 1), st.floats(0, 20), st.floats(0, 5), st.booleans())
def test_cliff_reward_cases(a, x, v, stuck):
    x2, v2, _, _, r, val, done = cd_transition(cliff_state(x=x, v=v), a, stuck, 10.0, 20)
    assert v2 >= 0
    if x2 < 0:
        assert r == -5.0 and done
    else:
        assert r == pytest.approx(1 - x2 / 10.0)


def test_cliff_clone_isolation():
    env = CliffDriver(CliffConfig(p_stick=0.5))
    env.reset(4)
    s0 = env.state
    a = env.clone_and_simulate(s0, 1.0)[1]
    b = env.clone_and_simulate(s0, 1.0)[1]
    assert a.info == b.info and a.reward == b.reward
    env0 = CliffDriver(CliffConfig(p_stick=0.0))
    env0.reset(0)
    r1 = env0.clone_and_simulate(env0.state, 0.5)[1].reward
    assert r1 == env0.clone_and_simulate(env0.state, 0.5)[1].reward


@pytest.mark.parametrize("p", [0.1, 0.5])
def test_stick_rate(p):
    env = CliffDriver(CliffConfig(p_stick=p, episode_length=10**6, x0=1e12))
    env.reset(0)
    rng = np.random.default_rng(1)
    stuck = sum(env.step(float(rng.uniform(-1, 1))).info["stuck"] for _ in range(20_000))
    assert abs(stuck / 20_000 - p) < 0.02


def test_make_env():
    assert isinstance(make_env({"name": "vgw", "render_size": 16, "seed": 3}), GridWorld)
    assert isinstance(make_env({"name": "cd", "p_stick": 0.5}), CliffDriver)
    with pytest.raises(ValueError):
        make_env({"name": "pong"})
