"""Construct models and posteriors from an :class:`ExperimentConfig`.

Every mode goes through the same builders; modes differ only in the latent
layout handed to the networks and in how tasks map to models.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..latent import TaskPosterior
from ..models import ProbabilisticEnsemble, WorldModel
from .config import ExperimentConfig

SHARED = "shared"


def build_world_model(config: ExperimentConfig, rng: np.random.Generator, prefix: str = "") -> WorldModel:
    layout = config.layout()
    dyn_latents, rew_latents = (), ()
    if layout is not None:
        dyn_latents = tuple((n, layout.factor(n).dim) for n in layout.dynamics_factors())
        rew_latents = tuple((n, layout.factor(n).dim) for n in layout.reward_factors())
    dyn = ProbabilisticEnsemble.build(
        "dynamics",
        config.state_dim,
        config.action_dim,
        dyn_latents,
        config.dyn_hidden,
        config.ensemble_size,
        rng,
        name=f"{prefix}dynamics",
    )
    rew = ProbabilisticEnsemble.build(
        "reward",
        config.state_dim,
        config.action_dim,
        rew_latents,
        config.rew_hidden,
        config.ensemble_size,
        rng,
        name=f"{prefix}reward",
    )
    names = tuple(f.name for f in layout.factors) if layout is not None else ()
    return WorldModel(dyn, rew, names)


def model_keys(config: ExperimentConfig, task_ids: Sequence[str]) -> list[str]:
    """Specialists get one model per training task; every other mode shares one."""
    return list(task_ids) if config.mode == "specialist" else [SHARED]


def build_models(config: ExperimentConfig, task_ids: Sequence[str], rng: np.random.Generator) -> dict:
    return {k: build_world_model(config, rng, prefix=f"{k}/") for k in model_keys(config, task_ids)}


def build_posteriors(config: ExperimentConfig, task_ids: Sequence[str]) -> dict:
    layout = config.layout()
    if layout is None:
        return {}
    return {t: TaskPosterior(t, layout) for t in task_ids}


def model_for(models: dict, task_id: str) -> WorldModel:
    if SHARED in models:
        return models[SHARED]
    try:
        return models[task_id]
    except KeyError:
        raise KeyError(f"no specialist model for task {task_id!r}") from None
