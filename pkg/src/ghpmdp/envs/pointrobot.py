"""Planar point robot with four fixed thrusters, one possibly crippled.

State is ``(x, y, vx, vy)``. Thruster ``k`` pushes along ``k * 90`` degrees with
signed magnitude ``a_k`` in [-1, 1]. The reward is the velocity component along
the goal direction (one of eight compass angles ``k * 45`` degrees); the
episode ends when the robot leaves the disc of radius ``ARENA_RADIUS``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASS = 1.0
DRAG = 0.1
DT = 0.1
EPISODE_LENGTH = 100
ARENA_RADIUS = 10.0
STATE_DIM = 4
ACTION_DIM = 4
N_LEGS = 4
N_DIRECTIONS = 8

THRUSTER_DIRS = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])


def goal_vector(direction: int) -> np.ndarray:
    ang = np.deg2rad(45.0 * direction)
    return np.array([np.cos(ang), np.sin(ang)])


@dataclass(frozen=True)
class PointRobotParams:
    crippled_actuator: int | None = None
    goal_direction: int = 0

    def __post_init__(self):
        if self.crippled_actuator is not None and not 0 <= self.crippled_actuator < N_LEGS:
            raise ValueError(f"crippled actuator must be in 0..{N_LEGS - 1} or None")
        if not 0 <= self.goal_direction < N_DIRECTIONS:
            raise ValueError(f"goal direction must be in 0..{N_DIRECTIONS - 1}")


def early_termination(states) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    return np.hypot(states[..., 0], states[..., 1]) > ARENA_RADIUS


def pointrobot_step(state, action, params: PointRobotParams):
    """Pure transition: ``(next_state, reward, done)``; vectorized over leading axes."""
    state = np.asarray(state, dtype=np.float64)
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0).copy()
    if params.crippled_actuator is not None:
        a[..., params.crippled_actuator] = 0.0
    force = a @ THRUSTER_DIRS
    pos, vel = state[..., :2], state[..., 2:]
    vel = vel + DT * (force - DRAG * vel) / MASS
    pos = pos + DT * vel
    nxt = np.concatenate([pos, vel], axis=-1)
    reward = vel @ goal_vector(params.goal_direction)
    return nxt, reward, early_termination(nxt)


class PointRobotEnv:
    observation_dim = STATE_DIM
    action_dim = ACTION_DIM

    def __init__(self, params: PointRobotParams, episode_length: int = EPISODE_LENGTH):
        self.params = params
        self.episode_length = episode_length
        self.state = None
        self.t = 0

    def reset(self) -> np.ndarray:
        self.state = np.zeros(STATE_DIM)
        self.t = 0
        return self.state.copy()

    def step(self, action):
        nxt, r, done = pointrobot_step(self.state, action, self.params)
        self.state = nxt
        self.t += 1
        return nxt.copy(), float(r), bool(done)

    @property
    def truncated(self) -> bool:
        return self.t >= self.episode_length
