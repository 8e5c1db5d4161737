"""Environment mechanics, determinism, and layout properties.

The cart-pole checks run against an independent transcription of the
classic published dynamics kept in this file; the gridworld movement
checks run against a hand-traced rule model, also kept here.
"""

import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from replaylab.envs import (
    ACT_FORWARD,
    ACT_PICKUP,
    ACT_TOGGLE,
    ACT_TURN_LEFT,
    ACT_TURN_RIGHT,
    Cell,
    CartPoleState,
    EnvError,
    GridState,
    Heading,
    HEADING_VEC,
    encode_observation,
    grid_obs_length,
    make_env,
)

DATA_DIR = Path(__file__).parent / "data"


# -- independent oracles -------------------------------------------------------


def reference_cartpole_step(state, action):
    """Straight-line transcription of the classic cart-pole Euler update."""
    x, x_dot, theta, theta_dot = state
    force = 10.0 if action == 1 else -10.0
    masspole, masscart, length = 0.1, 1.0, 0.5
    total_mass = masspole + masscart
    polemass_length = masspole * length
    costheta, sintheta = math.cos(theta), math.sin(theta)
    temp = (force + polemass_length * theta_dot**2 * sintheta) / total_mass
    thetaacc = (9.8 * sintheta - costheta * temp) / (
        length * (4.0 / 3.0 - masspole * costheta**2 / total_mass)
    )
    xacc = temp - polemass_length * thetaacc * costheta / total_mass
    tau = 0.02
    return (x + tau * x_dot, x_dot + tau * xacc, theta + tau * theta_dot,
            theta_dot + tau * thetaacc)


def model_grid_step(grid, pos, heading, carrying, action):
    """Hand-traced movement/pickup/toggle rules, independent of the env code."""
    grid = grid.copy()
    reward, done, success = 0.0, False, False
    if action == ACT_TURN_LEFT:
        heading = (heading - 1) % 4
    elif action == ACT_TURN_RIGHT:
        heading = (heading + 1) % 4
    else:
        dr, dc = HEADING_VEC[Heading(heading)]
        tr, tc = pos[0] + dr, pos[1] + dc
        cell = grid[tr, tc]
        if action == ACT_FORWARD:
            if cell in (Cell.WALL, Cell.DOOR_LOCKED, Cell.KEY):
                pass
            elif cell == Cell.LAVA:
                pos, done = (tr, tc), True
            elif cell == Cell.GOAL:
                pos, reward, done, success = (tr, tc), 1.0, True, True
            else:
                pos = (tr, tc)
        elif action == ACT_PICKUP and cell == Cell.KEY:
            carrying = True
            grid[tr, tc] = Cell.EMPTY
        elif action == ACT_TOGGLE and cell == Cell.DOOR_LOCKED and carrying:
            grid[tr, tc] = Cell.DOOR_OPEN
    return grid, pos, heading, carrying, reward, done, success


def bfs_reaches_goal(env) -> bool:
    """Brute-force search over (pos, heading, carrying, door) states."""
    env.reset()
    start = (env.state.grid.copy(), env.state.agent_pos, int(env.state.agent_dir), False)

    def key(grid, pos, heading, carrying):
        return (grid.tobytes(), pos, heading, carrying)

    frontier = [start]
    seen = {key(*start)}
    while frontier:
        grid, pos, heading, carrying = frontier.pop()
        for action in range(env.action_count):
            g2, p2, h2, c2, reward, done, success = model_grid_step(
                grid, pos, heading, carrying, action)
            if success:
                return True
            if done:
                continue
            k = key(g2, p2, h2, c2)
            if k not in seen:
                seen.add(k)
                frontier.append((g2, p2, h2, c2))
    return False


# -- construction and determinism ------------------------------------------------


def test_unknown_kind_and_bad_size_raise():
    with pytest.raises(EnvError):
        make_env("pong", None, 0)
    with pytest.raises(EnvError):
        make_env("crossing", 4, 0)
    with pytest.raises(EnvError):
        make_env("doorkey", 12, 0)


@pytest.mark.parametrize("kind,size", [("crossing", 7), ("doorkey", 6), ("cartpole", None)])
def test_same_seed_same_initial_observation(kind, size):
    a = make_env(kind, size, 99)
    b = make_env(kind, size, 99)
    assert np.array_equal(a.reset(), b.reset())


@given(seed=st.integers(0, 10_000), size=st.sampled_from([5, 6, 7]),
       actions=st.lists(st.integers(0, 2), min_size=1, max_size=60))
@settings(max_examples=40, deadline=None)
def test_full_run_determinism_crossing(seed, size, actions):
    def rollout():
        env = make_env("crossing", size, seed)
        env.reset()
        rewards = []
        for a in actions:
            res = env.step(a)
            rewards.append(res.reward)
            if res.done:
                break
        return rewards

    assert rollout() == rollout()


def test_reset_restores_identical_layout():
    env = make_env("doorkey", 6, 3)
    first = env.reset()
    env.step(ACT_FORWARD)
    env.step(ACT_TURN_RIGHT)
    again = env.reset()
    assert np.array_equal(first, again)
    assert env.state.steps_taken == 0


def test_randomized_layout_flag_redraws():
    env = make_env("crossing", 9, 7, randomize_layout=True)
    layouts = {env.reset().tobytes() for _ in range(12)}
    assert len(layouts) > 1


# -- layout invariants ------------------------------------------------------------


@pytest.mark.parametrize("size", [5, 6, 7, 8, 9])
@pytest.mark.parametrize("seed", range(25))
def test_doorkey_layout_counts(size, seed):
    env = make_env("doorkey", size, seed)
    env.reset()
    grid = env.state.grid
    assert (grid == Cell.KEY).sum() == 1
    assert (grid == Cell.DOOR_LOCKED).sum() == 1
    assert (grid == Cell.DOOR_OPEN).sum() == 0
    assert (grid == Cell.GOAL).sum() == 1
    assert env.state.carrying_key is False


@pytest.mark.parametrize("size", [5, 6, 7, 8, 9])
@pytest.mark.parametrize("seed", range(25))
def test_crossing_stream_has_exactly_one_opening(size, seed):
    env = make_env("crossing", size, seed)
    env.reset()
    grid = env.state.grid
    assert (grid == Cell.GOAL).sum() == 1
    lava_rows = {r for r, c in zip(*np.nonzero(grid == Cell.LAVA))}
    lava_cols = {c for r, c in zip(*np.nonzero(grid == Cell.LAVA))}
    if len(lava_rows) == 1:  # horizontal stream
        row = lava_rows.pop()
        open_cells = [c for c in range(1, size - 1) if grid[row, c] != Cell.LAVA]
    else:  # vertical stream
        assert len(lava_cols) == 1
        col = lava_cols.pop()
        open_cells = [r for r in range(1, size - 1) if grid[r, col] != Cell.LAVA]
    assert len(open_cells) == 1


@pytest.mark.parametrize("size", [5, 6, 7])
@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", ["crossing", "doorkey"])
def test_every_layout_is_solvable(kind, size, seed):
    assert bfs_reaches_goal(make_env(kind, size, seed))


# -- step semantics -----------------------------------------------------------------


def test_gridworld_nonterminal_step_reward_zero():
    env = make_env("crossing", 7, 1)
    env.reset()
    res = env.step(ACT_TURN_LEFT)
    assert res.reward == 0.0 and not res.done


def test_gridworld_episode_reward_binary_and_success_iff_one():
    rng = np.random.default_rng(0)
    for seed in range(10):
        env = make_env("crossing", 5, seed)
        env.reset()
        total, success = 0.0, False
        while True:
            res = env.step(int(rng.integers(3)))
            total += res.reward
            if res.done:
                success = res.success
                break
        assert total in (0.0, 1.0)
        assert success == (total == 1.0)
        assert env.state.steps_taken <= env.spec.max_steps


def test_turns_rotate_heading_and_forward_blocked_by_wall():
    env = make_env("crossing", 5, 2)
    env.reset()
    st0 = env.state
    assert st0.agent_dir == Heading.RIGHT
    env.step(ACT_TURN_LEFT)
    assert env.state.agent_dir == Heading.UP
    pos_before = env.state.agent_pos
    env.step(ACT_FORWARD)  # facing the border wall from (1,1)
    assert env.state.agent_pos == pos_before


def test_lava_step_ends_episode_with_zero_reward():
    env = make_env("crossing", 5, 0)
    env.reset()
    grid = env.state.grid
    # Plant the agent on an empty cell adjacent to lava, facing the lava.
    placed = False
    for r, c in zip(*np.nonzero(grid == Cell.LAVA)):
        for heading, (dr, dc) in HEADING_VEC.items():
            if grid[r - dr, c - dc] == Cell.EMPTY:
                env.state.agent_pos = (int(r - dr), int(c - dc))
                env.state.agent_dir = heading
                placed = True
                break
        if placed:
            break
    assert placed
    res = env.step(ACT_FORWARD)
    assert res.done and res.reward == 0.0 and not res.success


def test_goal_step_gives_plus_one():
    env = make_env("crossing", 5, 0)
    env.reset()
    s = env.size
    env.state.agent_pos = (s - 2, s - 3)
    env.state.agent_dir = Heading.RIGHT
    res = env.step(ACT_FORWARD)
    assert res.done and res.success and res.reward == 1.0


def test_doorkey_pickup_and_toggle_rules():
    env = make_env("doorkey", 6, 11)
    env.reset()
    grid = env.state.grid
    (kr, kc) = [tuple(x) for x in zip(*np.nonzero(grid == Cell.KEY))][0]
    (dr, dc) = [tuple(x) for x in zip(*np.nonzero(grid == Cell.DOOR_LOCKED))][0]

    # face the key from the empty cell above or below it, then pick it up
    env.state.agent_pos = (kr - 1, kc) if grid[kr - 1, kc] == Cell.EMPTY else (kr + 1, kc)
    env.state.agent_dir = Heading.DOWN if env.state.agent_pos[0] < kr else Heading.UP
    # key cell blocks forward until picked up
    pos_before = env.state.agent_pos
    env.step(ACT_FORWARD)
    assert env.state.agent_pos == pos_before
    env.step(ACT_PICKUP)
    assert env.state.carrying_key is True
    assert env.state.grid[kr, kc] == Cell.EMPTY

    # toggle opens the faced locked door only while carrying
    env.state.agent_pos = (dr, dc - 1)
    env.state.agent_dir = Heading.RIGHT
    env.step(ACT_TOGGLE)
    assert env.state.grid[dr, dc] == Cell.DOOR_OPEN
    res = env.step(ACT_FORWARD)
    assert env.state.agent_pos == (dr, dc) and not res.done


def test_doorkey_toggle_without_key_does_nothing():
    env = make_env("doorkey", 6, 11)
    env.reset()
    grid = env.state.grid
    (dr, dc) = [tuple(x) for x in zip(*np.nonzero(grid == Cell.DOOR_LOCKED))][0]
    env.state.agent_pos = (dr, dc - 1)
    env.state.agent_dir = Heading.RIGHT
    env.step(ACT_TOGGLE)
    assert env.state.grid[dr, dc] == Cell.DOOR_LOCKED


def test_model_oracle_agrees_with_env_on_random_walks():
    rng = np.random.default_rng(5)
    for seed in range(5):
        env = make_env("doorkey", 6, seed)
        env.reset()
        grid = env.state.grid.copy()
        pos, heading, carrying = env.state.agent_pos, int(env.state.agent_dir), False
        # stay under the 4*size^2 step limit: the movement oracle has no clock
        for _ in range(env.spec.max_steps - 1):
            action = int(rng.integers(5))
            res = env.step(action)
            grid, pos, heading, carrying, reward, done, success = model_grid_step(
                grid, pos, heading, carrying, action)
            assert reward == res.reward and done == res.done and success == res.success
            assert env.state.agent_pos == pos
            assert int(env.state.agent_dir) == heading
            assert env.state.carrying_key == carrying
            assert np.array_equal(env.state.grid, grid)
            if done:
                break


def test_step_after_done_and_bad_action_raise():
    env = make_env("crossing", 5, 0, max_steps=1)
    env.reset()
    with pytest.raises(EnvError):
        env.step(3)  # crossing has 3 actions
    res = env.step(ACT_TURN_LEFT)
    assert res.done  # max_steps reached
    with pytest.raises(EnvError):
        env.step(ACT_TURN_LEFT)


def test_max_steps_defaults():
    assert make_env("crossing", 7, 0).spec.max_steps == 4 * 49
    assert make_env("doorkey", 5, 0).spec.max_steps == 100
    cp = make_env("cartpole", None, 0)
    assert cp.spec.max_steps == 3000
    assert cp.spec.max_total_reward == 3000.0


# -- cart-pole dynamics ---------------------------------------------------------------


def test_cartpole_reset_in_standard_uniform_range():
    env = make_env("cartpole", None, 123)
    draws = np.stack([env.reset() for _ in range(200)])
    assert np.all(np.abs(draws) <= 0.05)
    assert len({row.tobytes() for row in draws}) == 200  # stream advances


def test_cartpole_matches_reference_dynamics():
    env = make_env("cartpole", None, 0)
    env.reset()
    env.state = CartPoleState(0.01, -0.02, 0.03, 0.04)
    state = (0.01, -0.02, 0.03, 0.04)
    actions = [1, 0, 0, 1, 1, 1, 0, 1, 0, 0, 1, 1, 0, 0, 1]
    for a in actions:
        res = env.step(a)
        state = reference_cartpole_step(state, a)
        got = (env.state.cart_position, env.state.cart_velocity,
               env.state.pole_angle, env.state.pole_tip_velocity)
        assert got == pytest.approx(state, abs=1e-15)
        assert res.reward == 1.0
        if res.done:
            break


def test_cartpole_golden_fixture_replay():
    """Frozen trajectory produced by the reference dynamics transcription."""
    import json

    path = DATA_DIR / "cartpole_golden.jsonl"
    records = [json.loads(line) for line in path.read_text().splitlines()]
    env = make_env("cartpole", None, 0)
    env.reset()
    first = records[0]["obs"]
    env.state = CartPoleState(*first)
    for rec in records:
        assert np.allclose(encode_observation(env.state), rec["obs"], atol=1e-12)
        res = env.step(rec["action"])
        assert res.reward == rec["reward"]
        assert res.done == rec["done"]


def test_cartpole_odd_symmetry_from_zero_state():
    env = make_env("cartpole", None, 0)
    env.reset()
    env.state = CartPoleState(0.0, 0.0, 0.0, 0.0)
    env.step(0)
    left = np.array(encode_observation(env.state))
    env.reset()
    env.state = CartPoleState(0.0, 0.0, 0.0, 0.0)
    env.step(1)
    right = np.array(encode_observation(env.state))
    assert np.allclose(left, -right, atol=1e-15)


CPTHETA_ENVELOPE = 12 * math.pi / 180


def test_cartpole_bounded_under_alternating_forces():
    env = make_env("cartpole", None, 0)
    env.reset()
    env.state = CartPoleState(0.0, 0.0, 0.0, 0.0)
    for i in range(10):
        res = env.step(i % 2)
        assert not res.done
    assert abs(env.state.pole_angle) < CPTHETA_ENVELOPE


def test_cartpole_terminates_on_angle_bound():
    env = make_env("cartpole", None, 0)
    env.reset()
    env.state = CartPoleState(0.0, 0.0, 0.0, 0.0)
    done = False
    for _ in range(3000):
        res = env.step(1)  # constant push tips the pole
        if res.done:
            done = True
            break
    assert done
    assert abs(env.state.pole_angle) > CPTHETA_ENVELOPE or abs(env.state.cart_position) > 2.4


# -- observation encoding ---------------------------------------------------------------


@pytest.mark.parametrize("size", [5, 6, 9])
def test_grid_observation_length(size):
    env = make_env("crossing", size, 0)
    obs = env.reset()
    assert obs.shape == (grid_obs_length(size),)
    assert obs.shape == (4 + size * size * 3,)
    assert np.isfinite(obs).all()


def test_heading_changes_only_direction_slots():
    env = make_env("crossing", 6, 4)
    env.reset()
    a = encode_observation(env.state)
    env.state.agent_dir = Heading.DOWN
    b = encode_observation(env.state)
    assert not np.array_equal(a[:4], b[:4])
    assert np.array_equal(a[4:], b[4:])


def test_cartpole_observation_is_raw_state():
    state = CartPoleState(0.1, -0.2, 0.3, -0.4)
    assert np.array_equal(encode_observation(state), [0.1, -0.2, 0.3, -0.4])


def test_encoding_injective_on_reachable_states():
    """Distinct (grid, pos, heading, carrying) tuples map to distinct vectors."""
    env = make_env("doorkey", 5, 1)
    env.reset()
    start = (env.state.grid.copy(), env.state.agent_pos, int(env.state.agent_dir), False)
    seen = {}
    frontier = [start]
    visited = {(start[0].tobytes(), start[1], start[2], start[3])}
    while frontier:
        grid, pos, heading, carrying = frontier.pop()
        obs = encode_observation(GridState(grid, pos, Heading(heading), carrying))
        key = obs.tobytes()
        ident = (grid.tobytes(), pos, heading, carrying)
        assert seen.setdefault(key, ident) == ident, "two states share an encoding"
        for action in range(5):
            g2, p2, h2, c2, _, done, _ = model_grid_step(grid, pos, heading, carrying, action)
            if done:
                continue
            k2 = (g2.tobytes(), p2, h2, c2)
            if k2 not in visited:
                visited.add(k2)
                frontier.append((g2, p2, h2, c2))
