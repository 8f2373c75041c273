"""Built-in hidden-parameter environment families."""

from . import cartpole, pointrobot
from .cartpole import CartpoleEnv, CartpoleParams, cartpole_step
from .pointrobot import PointRobotEnv, PointRobotParams, pointrobot_step
from .tasks import (
    SPLITS_EVAL,
    TaskDescriptor,
    make_task_split,
    manifest_text,
    parse_manifest,
    read_manifest,
    sample_task,
    write_manifest,
)

TERMINATION = {
    "cartpole": cartpole.early_termination,
    "pointrobot": pointrobot.early_termination,
}


def early_termination(family: str, states):
    """Environment-specific termination predicate, vectorized over states."""
    try:
        return TERMINATION[family](states)
    except KeyError:
        raise ValueError(f"unknown family {family!r}") from None


__all__ = [
    "SPLITS_EVAL",
    "CartpoleEnv",
    "CartpoleParams",
    "PointRobotEnv",
    "PointRobotParams",
    "TaskDescriptor",
    "cartpole",
    "cartpole_step",
    "early_termination",
    "make_task_split",
    "manifest_text",
    "parse_manifest",
    "pointrobot",
    "pointrobot_step",
    "read_manifest",
    "sample_task",
    "write_manifest",
]
