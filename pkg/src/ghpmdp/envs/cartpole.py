"""Cart-pole swing-up with hidden action scale, pole length and goal position.

The pole is a point mass at distance ``length`` from the pivot; the angle is
measured from upright, so the pole hangs at ``theta = pi``. Observations are
``(x, x_dot, cos theta, sin theta, theta_dot)``. Each control step of ``DT``
seconds is integrated with ``SUBSTEPS`` semi-implicit Euler substeps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import gradcore as gc

CART_MASS = 1.0
POLE_MASS = 0.1
GRAVITY = 9.81
MAX_FORCE = 10.0
DT = 0.05
SUBSTEPS = 32
EPISODE_LENGTH = 200
STATE_DIM = 5
ACTION_DIM = 1


@dataclass(frozen=True)
class CartpoleParams:
    action_scale: float = 1.0
    pole_length: float = 0.5
    goal_x: float = 0.0

    def __post_init__(self):
        if self.action_scale <= 0 or self.pole_length <= 0:
            raise ValueError("action scale and pole length must be positive")


def integrate(x, x_dot, theta, theta_dot, force, length, sin=np.sin, cos=np.cos, substeps=SUBSTEPS):
    """Advance one control step. Works on arrays or graph nodes (pass gc.sin/gc.cos)."""
    h = DT / substeps
    for _ in range(substeps):
        st, ct = sin(theta), cos(theta)
        x_acc = (force + POLE_MASS * st * (length * theta_dot * theta_dot - GRAVITY * ct)) / (
            CART_MASS + POLE_MASS * st * st
        )
        theta_acc = (GRAVITY * st - x_acc * ct) / length
        x_dot = x_dot + h * x_acc
        theta_dot = theta_dot + h * theta_acc
        x = x + h * x_dot
        theta = theta + h * theta_dot
    return x, x_dot, theta, theta_dot


def observe(x, x_dot, theta, theta_dot) -> np.ndarray:
    return np.stack([x, x_dot, np.cos(theta), np.sin(theta), theta_dot], axis=-1)


def split_obs(obs):
    obs = np.asarray(obs, dtype=np.float64)
    theta = np.arctan2(obs[..., 3], obs[..., 2])
    return obs[..., 0], obs[..., 1], theta, obs[..., 4]


def tip_x(obs, length):
    obs = np.asarray(obs, dtype=np.float64)
    return obs[..., 0] + length * obs[..., 3]


def reward_from_obs(next_obs, params: CartpoleParams):
    return -((params.goal_x - tip_x(next_obs, params.pole_length)) ** 2)


def cartpole_step(state, action, params: CartpoleParams):
    """Pure transition: returns ``(next_obs, reward, done)``; never done early."""
    x, xd, th, thd = split_obs(state)
    a = np.clip(np.asarray(action, dtype=np.float64)[..., 0], -1.0, 1.0)
    force = params.action_scale * MAX_FORCE * a
    x, xd, th, thd = integrate(x, xd, th, thd, force, params.pole_length)
    nxt = observe(x, xd, th, thd)
    return nxt, reward_from_obs(nxt, params), np.zeros(np.shape(x), dtype=bool)


def early_termination(states) -> np.ndarray:
    return np.zeros(np.shape(states)[:-1], dtype=bool)


def mechanical_energy(x_dot, theta, theta_dot, length) -> float:
    """Kinetic plus potential energy, potential zero with the pole hanging."""
    kinetic = (
        0.5 * (CART_MASS + POLE_MASS) * x_dot**2
        + POLE_MASS * length * x_dot * theta_dot * np.cos(theta)
        + 0.5 * POLE_MASS * length**2 * theta_dot**2
    )
    return kinetic + POLE_MASS * GRAVITY * length * (1.0 + np.cos(theta))


def predict_graph(states, actions, action_scale, pole_length):
    """Differentiable next observation given scale/length nodes of shape ``(S, 1)`` or scalars.

    ``states`` is ``(N, 5)``, ``actions`` ``(N, 1)``; the result broadcasts to ``(S, N, 5)``.
    """
    x, xd, th, thd = split_obs(states)
    a = np.clip(np.asarray(actions, dtype=np.float64)[..., 0], -1.0, 1.0)
    force = action_scale * (MAX_FORCE * a)
    x, xd, th, thd = integrate(x, xd, th, thd, force, pole_length, sin=gc.sin, cos=gc.cos)
    parts = [gc.constant(p) for p in (x, xd, gc.cos(th), gc.sin(th), thd)]
    shape = np.broadcast_shapes(*(p.shape for p in parts))
    parts = [gc.reshape(p + np.zeros(shape), shape + (1,)) for p in parts]
    return gc.concat(parts, axis=-1)


class CartpoleEnv:
    def __init__(self, params: CartpoleParams, episode_length: int = EPISODE_LENGTH):
        self.params = params
        self.episode_length = episode_length
        self.state = None
        self.t = 0

    observation_dim = STATE_DIM
    action_dim = ACTION_DIM

    def reset(self) -> np.ndarray:
        self.state = observe(0.0, 0.0, np.pi, 0.0)
        self.t = 0
        return self.state.copy()

    def step(self, action):
        nxt, r, done = cartpole_step(self.state, action, self.params)
        self.state = nxt
        self.t += 1
        return nxt.copy(), float(r), bool(done)

    @property
    def truncated(self) -> bool:
        return self.t >= self.episode_length
