"""Deterministic, seedable benchmark environments.

Two sparse-reward gridworlds (a lava crossing and a key/door task) plus a
dense-reward cart-pole balancer.  Every environment is a pure function of
(kind, size, seed, action sequence): layouts and reset noise come from a
private generator owned by the instance, so independently constructed
environments with the same seed replay bitwise-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class Cell(IntEnum):
    EMPTY = 0
    WALL = 1
    LAVA = 2
    GOAL = 3
    KEY = 4
    DOOR_LOCKED = 5
    DOOR_OPEN = 6


class Heading(IntEnum):
    RIGHT = 0
    DOWN = 1
    LEFT = 2
    UP = 3


# (row delta, col delta) per heading
HEADING_VEC = {
    Heading.RIGHT: (0, 1),
    Heading.DOWN: (1, 0),
    Heading.LEFT: (0, -1),
    Heading.UP: (-1, 0),
}

# Gridworld action ids. Crossing exposes only the first three.
ACT_TURN_LEFT = 0
ACT_TURN_RIGHT = 1
ACT_FORWARD = 2
ACT_PICKUP = 3
ACT_TOGGLE = 4

GRID_SIZES = (5, 6, 7, 8, 9)

CELL_CHARS = {
    Cell.EMPTY: ".",
    Cell.WALL: "#",
    Cell.LAVA: "~",
    Cell.GOAL: "G",
    Cell.KEY: "k",
    Cell.DOOR_LOCKED: "D",
    Cell.DOOR_OPEN: "d",
}
AGENT_CHARS = {Heading.RIGHT: ">", Heading.DOWN: "v", Heading.LEFT: "<", Heading.UP: "^"}


class EnvError(Exception):
    """Invalid environment construction or use (bad kind/size/action, step after done)."""


@dataclass
class EnvSpec:
    action_count: int
    max_steps: int
    max_total_reward: float
    obs_length: int


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    success: bool


@dataclass
class GridState:
    grid: np.ndarray  # (size, size) of Cell codes
    agent_pos: tuple[int, int]
    agent_dir: Heading
    carrying_key: bool = False
    steps_taken: int = 0


@dataclass
class CartPoleState:
    cart_position: float = 0.0
    cart_velocity: float = 0.0
    pole_angle: float = 0.0
    pole_tip_velocity: float = 0.0
    steps_taken: int = 0


def encode_observation(state) -> np.ndarray:
    """Fixed-length feature vector for a state.

    Gridworld: one-hot heading (4 slots) followed by a (3, size, size) image
    flattened channel-major.  Channel 0 holds the object kind, channel 1 the
    door lock state, channel 2 marks the agent cell.  Values are scaled to
    [0, 1].  Cart-pole: the four raw state variables in fixed order.
    """
    if isinstance(state, CartPoleState):
        return np.array(
            [state.cart_position, state.cart_velocity, state.pole_angle, state.pole_tip_velocity],
            dtype=np.float64,
        )
    size = state.grid.shape[0]
    dir_onehot = np.zeros(4, dtype=np.float64)
    dir_onehot[int(state.agent_dir)] = 1.0
    img = np.zeros((3, size, size), dtype=np.float64)
    grid = state.grid
    kind = np.where(grid == Cell.DOOR_OPEN, int(Cell.DOOR_LOCKED), grid)
    img[0] = kind / 5.0
    img[1] = np.where(grid == Cell.DOOR_LOCKED, 1.0, 0.0)
    r, c = state.agent_pos
    img[2, r, c] = 1.0
    return np.concatenate([dir_onehot, img.ravel()])


def grid_obs_length(size: int) -> int:
    return 4 + size * size * 3


class GridEnv:
    """Shared mechanics for the crossing and key/door gridworlds.

    The layout is generated once from the seed and restored on every reset;
    pass randomize_layout=True to draw a fresh layout per episode instead.
    """

    kind: str = "grid"

    def __init__(self, size: int, seed: int, max_steps: int | None = None,
                 randomize_layout: bool = False):
        if size not in GRID_SIZES:
            raise EnvError(f"grid size must be one of {GRID_SIZES}, got {size}")
        self.size = size
        self.randomize_layout = randomize_layout
        self._layout_rng = np.random.default_rng(seed)
        self._max_steps = max_steps if max_steps is not None else 4 * size * size
        self._layout = self._generate_layout(self._layout_rng)
        self.state: GridState | None = None
        self._done = True

    # -- layout -----------------------------------------------------------

    def _generate_layout(self, rng: np.random.Generator) -> GridState:
        raise NotImplementedError

    def _empty_walled_grid(self) -> np.ndarray:
        grid = np.full((self.size, self.size), int(Cell.EMPTY), dtype=np.int64)
        grid[0, :] = grid[-1, :] = int(Cell.WALL)
        grid[:, 0] = grid[:, -1] = int(Cell.WALL)
        return grid

    # -- env interface ------------------------------------------------------

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(
            action_count=self.action_count,
            max_steps=self._max_steps,
            max_total_reward=1.0,
            obs_length=grid_obs_length(self.size),
        )

    def reset(self) -> np.ndarray:
        if self.randomize_layout:
            self._layout = self._generate_layout(self._layout_rng)
        src = self._layout
        self.state = GridState(
            grid=src.grid.copy(),
            agent_pos=src.agent_pos,
            agent_dir=src.agent_dir,
            carrying_key=src.carrying_key,
            steps_taken=0,
        )
        self._done = False
        return encode_observation(self.state)

    def step(self, action: int) -> StepResult:
        if self._done or self.state is None:
            raise EnvError("step() called on a finished episode; call reset() first")
        if not 0 <= action < self.action_count:
            raise EnvError(f"action {action} out of range [0, {self.action_count})")
        st = self.state
        st.steps_taken += 1
        reward, success, terminal = 0.0, False, False

        if action == ACT_TURN_LEFT:
            st.agent_dir = Heading((int(st.agent_dir) - 1) % 4)
        elif action == ACT_TURN_RIGHT:
            st.agent_dir = Heading((int(st.agent_dir) + 1) % 4)
        elif action == ACT_FORWARD:
            dr, dc = HEADING_VEC[st.agent_dir]
            tr, tc = st.agent_pos[0] + dr, st.agent_pos[1] + dc
            cell = Cell(st.grid[tr, tc])
            if cell in (Cell.WALL, Cell.DOOR_LOCKED, Cell.KEY):
                pass  # blocked
            elif cell == Cell.LAVA:
                st.agent_pos = (tr, tc)
                terminal = True
            elif cell == Cell.GOAL:
                st.agent_pos = (tr, tc)
                reward, success, terminal = 1.0, True, True
            else:
                st.agent_pos = (tr, tc)
        elif action == ACT_PICKUP:
            dr, dc = HEADING_VEC[st.agent_dir]
            tr, tc = st.agent_pos[0] + dr, st.agent_pos[1] + dc
            if st.grid[tr, tc] == Cell.KEY:
                st.carrying_key = True
                st.grid[tr, tc] = int(Cell.EMPTY)
        elif action == ACT_TOGGLE:
            dr, dc = HEADING_VEC[st.agent_dir]
            tr, tc = st.agent_pos[0] + dr, st.agent_pos[1] + dc
            if st.grid[tr, tc] == Cell.DOOR_LOCKED and st.carrying_key:
                st.grid[tr, tc] = int(Cell.DOOR_OPEN)

        done = terminal or st.steps_taken >= self._max_steps
        self._done = done
        return StepResult(encode_observation(st), reward, done, success)

    def render(self) -> str:
        """Debug ASCII dump of the current grid."""
        st = self.state if self.state is not None else self._layout
        rows = []
        for r in range(self.size):
            chars = [CELL_CHARS[Cell(st.grid[r, c])] for c in range(self.size)]
            if r == st.agent_pos[0]:
                chars[st.agent_pos[1]] = AGENT_CHARS[st.agent_dir]
            rows.append("".join(chars))
        return "\n".join(rows)


class CrossingEnv(GridEnv):
    """Reach the far corner past a lava stream with a single safe opening."""

    kind = "crossing"
    action_count = 3

    def _generate_layout(self, rng: np.random.Generator) -> GridState:
        s = self.size
        grid = self._empty_walled_grid()
        horizontal = rng.random() < 0.5
        lane = int(rng.integers(2, s - 2))       # keeps start and goal rows/cols clear
        opening = int(rng.integers(1, s - 1))
        for k in range(1, s - 1):
            if k == opening:
                continue
            if horizontal:
                grid[lane, k] = int(Cell.LAVA)
            else:
                grid[k, lane] = int(Cell.LAVA)
        grid[s - 2, s - 2] = int(Cell.GOAL)
        return GridState(grid=grid, agent_pos=(1, 1), agent_dir=Heading.RIGHT)


class DoorKeyEnv(GridEnv):
    """Pick up the key, unlock the door in the dividing wall, reach the goal."""

    kind = "doorkey"
    action_count = 5

    def _generate_layout(self, rng: np.random.Generator) -> GridState:
        s = self.size
        grid = self._empty_walled_grid()
        wall_col = int(rng.integers(2, s - 2))
        door_row = int(rng.integers(1, s - 1))
        for r in range(1, s - 1):
            grid[r, wall_col] = int(Cell.WALL)
        grid[door_row, wall_col] = int(Cell.DOOR_LOCKED)
        spots = [
            (r, c)
            for r in range(1, s - 1)
            for c in range(1, wall_col)
            if (r, c) != (1, 1)
        ]
        key_pos = spots[int(rng.integers(len(spots)))]
        grid[key_pos] = int(Cell.KEY)
        grid[s - 2, s - 2] = int(Cell.GOAL)
        return GridState(grid=grid, agent_pos=(1, 1), agent_dir=Heading.RIGHT)


# Standard published cart-pole parameter set.
CP_GRAVITY = 9.8
CP_MASS_CART = 1.0
CP_MASS_POLE = 0.1
CP_TOTAL_MASS = CP_MASS_CART + CP_MASS_POLE
CP_HALF_LENGTH = 0.5
CP_POLEMASS_LENGTH = CP_MASS_POLE * CP_HALF_LENGTH
CP_FORCE_MAG = 10.0
CP_TAU = 0.02
CP_THETA_LIMIT = 12 * math.pi / 180
CP_X_LIMIT = 2.4


class CartPoleEnv:
    """Cart-pole balancing with Euler-integrated dynamics, +1 reward per step."""

    kind = "cartpole"
    action_count = 2

    def __init__(self, seed: int, max_steps: int = 3000):
        self._rng = np.random.default_rng(seed)
        self._max_steps = max_steps
        self.state: CartPoleState | None = None
        self._done = True

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(
            action_count=2,
            max_steps=self._max_steps,
            max_total_reward=float(self._max_steps),
            obs_length=4,
        )

    def reset(self) -> np.ndarray:
        x, xd, th, thd = self._rng.uniform(-0.05, 0.05, size=4)
        self.state = CartPoleState(x, xd, th, thd, steps_taken=0)
        self._done = False
        return encode_observation(self.state)

    def step(self, action: int) -> StepResult:
        if self._done or self.state is None:
            raise EnvError("step() called on a finished episode; call reset() first")
        if action not in (0, 1):
            raise EnvError(f"action {action} out of range [0, 2)")
        st = self.state
        force = CP_FORCE_MAG if action == 1 else -CP_FORCE_MAG
        cos_th = math.cos(st.pole_angle)
        sin_th = math.sin(st.pole_angle)
        temp = (force + CP_POLEMASS_LENGTH * st.pole_tip_velocity**2 * sin_th) / CP_TOTAL_MASS
        theta_acc = (CP_GRAVITY * sin_th - cos_th * temp) / (
            CP_HALF_LENGTH * (4.0 / 3.0 - CP_MASS_POLE * cos_th**2 / CP_TOTAL_MASS)
        )
        x_acc = temp - CP_POLEMASS_LENGTH * theta_acc * cos_th / CP_TOTAL_MASS
        # Euler update applies old velocities to positions first.
        st.cart_position += CP_TAU * st.cart_velocity
        st.cart_velocity += CP_TAU * x_acc
        st.pole_angle += CP_TAU * st.pole_tip_velocity
        st.pole_tip_velocity += CP_TAU * theta_acc
        st.steps_taken += 1

        out_of_bounds = (
            abs(st.cart_position) > CP_X_LIMIT or abs(st.pole_angle) > CP_THETA_LIMIT
        )
        done = out_of_bounds or st.steps_taken >= self._max_steps
        self._done = done
        return StepResult(encode_observation(st), 1.0, done, False)

    def render(self) -> str:
        st = self.state or CartPoleState()
        return (
            f"x={st.cart_position:+.3f} xd={st.cart_velocity:+.3f} "
            f"th={st.pole_angle:+.4f} thd={st.pole_tip_velocity:+.4f}"
        )


ENV_KINDS = ("crossing", "doorkey", "cartpole")


def make_env(kind: str, size: int | None, seed: int, max_steps: int | None = None,
             randomize_layout: bool = False):
    """Build a seeded environment. size applies to gridworlds only."""
    if kind == "crossing":
        return CrossingEnv(size, seed, max_steps=max_steps, randomize_layout=randomize_layout)
    if kind == "doorkey":
        return DoorKeyEnv(size, seed, max_steps=max_steps, randomize_layout=randomize_layout)
    if kind == "cartpole":
        return CartPoleEnv(seed, max_steps=max_steps if max_steps is not None else 3000)
    raise EnvError(f"unknown environment kind {kind!r}; expected one of {ENV_KINDS}")
