"""Transition records and per-task replay buffers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable

import numpy as np


@dataclass(frozen=True)
class TransitionRecord:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    done: bool
    task_id: Hashable

    def __post_init__(self):
        for name in ("state", "action", "next_state"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "reward", float(self.reward))
        object.__setattr__(self, "done", bool(self.done))


@dataclass
class TaskData:
    """Column view of one task's transitions."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    @classmethod
    def from_records(cls, records: Iterable[TransitionRecord]) -> "TaskData":
        records = list(records)
        if not records:
            return cls(np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0))
        return cls(
            np.stack([r.state for r in records]),
            np.stack([r.action for r in records]),
            np.stack([r.next_state for r in records]),
            np.array([r.reward for r in records]),
        )

    def subset(self, index) -> "TaskData":
        return TaskData(self.states[index], self.actions[index], self.next_states[index], self.rewards[index])

    def dyn_inputs(self) -> np.ndarray:
        return np.concatenate([self.states, self.actions], axis=-1)

    def rew_inputs(self) -> np.ndarray:
        return np.concatenate([self.states, self.actions, self.next_states], axis=-1)


class ReplayBuffer:
    """Append-only transition lists keyed by task id."""

    def __init__(self):
        self._records: dict[Hashable, list[TransitionRecord]] = {}
        self._episodes: dict[Hashable, list[int]] = {}
        self._cache: dict[Hashable, TaskData] = {}

    @property
    def tasks(self) -> list[Hashable]:
        return list(self._records)

    def register(self, task_id: Hashable) -> None:
        self._records.setdefault(task_id, [])
        self._episodes.setdefault(task_id, [])

    def append(self, record: TransitionRecord) -> None:
        self.register(record.task_id)
        self._records[record.task_id].append(record)
        self._cache.pop(record.task_id, None)

    def extend(self, records: Iterable[TransitionRecord]) -> None:
        records = list(records)
        for r in records:
            self.append(r)
        if records:
            self._episodes[records[0].task_id].append(len(records))

    def count(self, task_id: Hashable) -> int:
        return len(self._records.get(task_id, ()))

    def episode_lengths(self, task_id: Hashable) -> list[int]:
        return list(self._episodes.get(task_id, ()))

    def records(self, task_id: Hashable) -> tuple[TransitionRecord, ...]:
        return tuple(self._records.get(task_id, ()))

    def arrays(self, task_id: Hashable) -> TaskData:
        if task_id not in self._cache:
            self._cache[task_id] = TaskData.from_records(self._records.get(task_id, ()))
        return self._cache[task_id]

    def total(self) -> int:
        return sum(len(v) for v in self._records.values())
