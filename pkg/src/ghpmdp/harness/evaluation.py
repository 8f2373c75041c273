"""Test-time adaptation on held-out tasks with frozen networks."""

from __future__ import annotations

import logging
import time
from pathlib import Path

from ..data import TaskData
from ..envs import SPLITS_EVAL, parse_manifest
from ..latent import TaskPosterior, reset_to_prior
from ..objective import testtime_inference_step
from .builders import SHARED
from .checkpoint import load_checkpoint
from .metrics import MetricsRow, write_metrics
from .rollout import mpc_policy, run_episode
from .training import posterior_snapshot, rng_streams

log = logging.getLogger(__name__)


class FrozenModelViolation(AssertionError):
    pass


def _checksums(models: dict) -> dict:
    return {k: m.checksum() for k, m in models.items()}


def run_adaptation_eval(checkpoint, split: str, out_dir=None, overrides: dict | None = None) -> list[MetricsRow]:
    """Evaluate every task of ``split`` for ``eval_episodes`` episodes.

    Each task starts from a posterior reset to the prior. Every
    ``svi_every`` steps the posterior (and only the posterior) is refit on all
    transitions seen so far on that task. Planning uses the test-time done
    penalty. Raises :class:`FrozenModelViolation` if any network parameter
    changed.
    """
    if split not in SPLITS_EVAL:
        raise ValueError(f"split must be one of {SPLITS_EVAL}, got {split!r}")
    state = load_checkpoint(checkpoint)
    config = state.config.with_overrides(**(overrides or {}))
    if config.mode == "specialist":
        raise ValueError("specialist models exist only for training tasks; nothing to adapt")
    _, _, tasks = parse_manifest(state.meta["manifest"])
    if not tasks[split]:
        raise ValueError(f"split {split!r} is empty for family {config.family!r}")
    model = state.models[SHARED]
    before = _checksums(state.models)
    layout = config.layout()
    rngs = rng_streams(config.seed, salt=1 + SPLITS_EVAL.index(split))
    cem = config.cem_config().for_test()
    tc = config.train_config()
    T = config.steps_per_episode
    rows = []

    for task in tasks[split]:
        post = reset_to_prior(TaskPosterior(task.task_id, layout)) if layout is not None else None
        seen = []

        def adapt(t, ep):
            if post is not None and t % config.svi_every == 0:
                data = TaskData.from_records(seen + ep.records)
                testtime_inference_step(
                    model, post, data, tc, rngs["train"], config.svi_iterations, config.svi_lr_multiplier
                )

        policy = mpc_policy(model, post, cem, config.family, rngs["plan"])
        for episode in range(1, config.eval_episodes + 1):
            start = time.perf_counter()
            env = task.make_env()
            env.episode_length = T
            ep = run_episode(env, task.task_id, policy, T, on_step=adapt)
            seen.extend(ep.records)
            rows.append(
                MetricsRow(
                    config.mode,
                    config.seed,
                    split,
                    task.task_id,
                    episode,
                    ep.total_return,
                    ep.steps,
                    time.perf_counter() - start,
                    posterior_snapshot(post),
                )
            )
            log.info("%s seed=%d task=%s episode=%d return=%.2f", split, config.seed, task.task_id, episode, ep.total_return)

    if _checksums(state.models) != before:
        raise FrozenModelViolation("network parameters changed during test-time adaptation")
    if out_dir is not None:
        path = Path(out_dir) / f"metrics_{split}.csv"
        path.unlink(missing_ok=True)
        path.with_name(f"timing_{split}.csv").unlink(missing_ok=True)
        write_metrics(rows, path, path.with_name(f"timing_{split}.csv"))
    return rows
