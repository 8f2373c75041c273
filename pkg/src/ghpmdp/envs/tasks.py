"""Task descriptors, split generation and the plain-text split manifest."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import cartpole, pointrobot

FAMILIES = ("cartpole", "pointrobot")
SPLITS = ("train", "weak", "strong")
SPLITS_EVAL = ("weak", "strong")
MANIFEST_VERSION = 1
DEFAULT_HOLDOUT_DIRECTION = 1  # 45 degrees

N_TRAIN = 12
N_WEAK = 5

# two toy tasks differing in every hidden parameter; goal switch adds GOAL_SHIFT
TOY_TASKS = (
    {"action_scale": 0.8, "pole_length": 0.5, "goal_x": 1.0},
    {"action_scale": 1.2, "pole_length": 0.7, "goal_x": 1.5},
)
GOAL_SHIFT = 1.0


@dataclass(frozen=True)
class TaskDescriptor:
    family: str
    task_id: str
    hidden: dict = field(default_factory=dict, hash=False, compare=True)
    split: str = "train"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def params(self):
        if self.family == "cartpole":
            return cartpole.CartpoleParams(**self.hidden)
        return pointrobot.PointRobotParams(**self.hidden)

    def make_env(self):
        if self.family == "cartpole":
            return cartpole.CartpoleEnv(self.params())
        return pointrobot.PointRobotEnv(self.params())


def pointrobot_task(leg: int, direction: int, split: str = "train") -> TaskDescriptor:
    return TaskDescriptor(
        "pointrobot",
        f"leg{leg}-dir{direction}",
        {"crippled_actuator": leg, "goal_direction": direction},
        split,
    )


def cartpole_task(index: int, split: str = "train", **overrides) -> TaskDescriptor:
    hidden = dict(TOY_TASKS[index])
    hidden.update(overrides)
    return TaskDescriptor("cartpole", f"cartpole{index}", hidden, split)


def make_task_split(
    family: str,
    rng: np.random.Generator,
    holdout_direction: int = DEFAULT_HOLDOUT_DIRECTION,
    max_retries: int = 1000,
) -> dict[str, list[TaskDescriptor]]:
    """Disjoint train / weak / strong task sets.

    Point robot: 12 of the 28 (leg, non-holdout direction) pairs for training,
    covering every leg and direction; 5 further pairs for weak generalization;
    the holdout direction crossed with all legs for strong generalization.
    """
    if family == "cartpole":
        return {"train": [cartpole_task(i) for i in range(len(TOY_TASKS))], "weak": [], "strong": []}
    if family != "pointrobot":
        raise ValueError(f"unknown family {family!r}")
    directions = [d for d in range(pointrobot.N_DIRECTIONS) if d != holdout_direction]
    pairs = [(leg, d) for leg in range(pointrobot.N_LEGS) for d in directions]
    for _ in range(max_retries):
        chosen = rng.choice(len(pairs), size=N_TRAIN, replace=False)
        train = [pairs[i] for i in sorted(chosen)]
        if {l for l, _ in train} == set(range(pointrobot.N_LEGS)) and {d for _, d in train} == set(directions):
            break
    else:
        raise RuntimeError(f"no covering training split found in {max_retries} attempts")
    rest = [p for p in pairs if p not in train]
    weak = [rest[i] for i in sorted(rng.choice(len(rest), size=N_WEAK, replace=False))]
    strong = [(leg, holdout_direction) for leg in range(pointrobot.N_LEGS)]
    return {
        "train": [pointrobot_task(l, d, "train") for l, d in train],
        "weak": [pointrobot_task(l, d, "weak") for l, d in weak],
        "strong": [pointrobot_task(l, d, "strong") for l, d in strong],
    }


def sample_task(
    family: str,
    split: str,
    rng: np.random.Generator,
    tasks: dict[str, list[TaskDescriptor]] | None = None,
    exclude: Iterable[str] = (),
) -> TaskDescriptor:
    """Draw one task of ``split``, skipping task ids in ``exclude``."""
    if tasks is None:
        tasks = make_task_split(family, rng)
    pool = tasks.get(split)
    if not pool:
        raise ValueError(f"split {split!r} is not defined for family {family!r}")
    excluded = set(exclude)
    remaining = [t for t in pool if t.task_id not in excluded]
    if not remaining:
        raise LookupError(f"split {split!r} of {family!r} is exhausted")
    return remaining[int(rng.integers(len(remaining)))]


def manifest_text(family: str, seed: int, tasks: dict[str, list[TaskDescriptor]]) -> str:
    lines = [
        "# ghpmdp task split manifest",
        f"version {MANIFEST_VERSION}",
        f"family {family}",
        f"seed {seed}",
    ]
    for split in SPLITS:
        for t in tasks.get(split, []):
            kv = " ".join(f"{k}={v}" for k, v in sorted(t.hidden.items()))
            lines.append(f"task {split} {t.task_id} {kv}".rstrip())
    return "\n".join(lines) + "\n"


def write_manifest(path, family: str, seed: int, tasks: dict[str, list[TaskDescriptor]]) -> None:
    Path(path).write_text(manifest_text(family, seed, tasks))


def _parse_value(text: str):
    if text == "None":
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_manifest(path) -> tuple[str, int, dict[str, list[TaskDescriptor]]]:
    return parse_manifest(Path(path).read_text())


def parse_manifest(text: str) -> tuple[str, int, dict[str, list[TaskDescriptor]]]:
    family, seed, version = None, None, None
    tasks: dict[str, list[TaskDescriptor]] = {s: [] for s in SPLITS}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, *rest = line.split()
        if head == "version":
            version = int(rest[0])
            if version != MANIFEST_VERSION:
                raise ValueError(f"manifest version {version} unsupported (expected {MANIFEST_VERSION})")
        elif head == "family":
            family = rest[0]
        elif head == "seed":
            seed = int(rest[0])
        elif head == "task":
            split, task_id, *kvs = rest
            hidden = {k: _parse_value(v) for k, v in (kv.split("=", 1) for kv in kvs)}
            tasks[split].append(TaskDescriptor(family, task_id, hidden, split))
        else:
            raise ValueError(f"unrecognized manifest line: {raw!r}")
    if version is None or family is None:
        raise ValueError("manifest missing version or family header")
    return family, seed, tasks
