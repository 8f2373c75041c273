"""Episode collection and the two behaviour policies (random and MPC)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..data import TransitionRecord
from ..envs import TERMINATION
from ..planner import CemConfig, plan_action


@dataclass
class Episode:
    task_id: str
    records: list = field(default_factory=list)
    total_return: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.records)


def random_policy(action_dim: int, rng: np.random.Generator) -> Callable:
    def act(state):
        return rng.uniform(-1.0, 1.0, size=action_dim)

    return act


def mpc_policy(model, posterior, cem: CemConfig, family: str, rng: np.random.Generator) -> Callable:
    term = TERMINATION[family]

    def act(state):
        action, _ = plan_action(state, model.dynamics, model.reward, posterior, cem, rng, term)
        return action

    return act


def run_episode(env, task_id: str, policy: Callable, steps: int, on_step: Callable | None = None) -> Episode:
    """Roll ``policy`` for up to ``steps`` steps; ``on_step(t, episode)`` runs after each step."""
    ep = Episode(task_id)
    state = env.reset()
    for t in range(1, steps + 1):
        action = np.asarray(policy(state), dtype=np.float64)
        nxt, reward, done = env.step(action)
        ep.records.append(TransitionRecord(state, action, nxt, reward, done, task_id))
        ep.total_return += reward
        state = nxt
        if on_step is not None:
            on_step(t, ep)
        if done:
            break
    return ep
