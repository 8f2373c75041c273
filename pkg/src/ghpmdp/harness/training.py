"""Multi-task training loop: alternate model fitting and MPC data collection."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import ReplayBuffer
from ..envs import make_task_split, manifest_text
from ..objective import train_phase
from .builders import SHARED, build_models, build_posteriors, model_for
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, save_config
from .metrics import MetricsRow, write_metrics
from .rollout import mpc_policy, random_policy, run_episode

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"
STREAMS = ("split", "init", "schedule", "policy", "plan", "train")


def rng_streams(seed: int, salt: int = 0) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one master seed."""
    children = np.random.SeedSequence([seed, salt]).spawn(len(STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}


def posterior_snapshot(posterior) -> dict:
    if posterior is None:
        return {}
    return {k: (m.copy(), s.copy()) for k, (m, s) in posterior.snapshot().items()}


@dataclass
class TrainingResult:
    config: ExperimentConfig
    models: dict
    posteriors: dict
    buffer: ReplayBuffer
    tasks: dict
    rows: list = field(default_factory=list)
    out_dir: Path | None = None

    @property
    def checkpoint_path(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / CHECKPOINT_NAME


def _fit(config, models, posteriors, buffer, task_ids, rng, out_dir, meta):
    tc = config.train_config()
    try:
        if config.mode == "specialist":
            for t in task_ids:
                if buffer.count(t):
                    train_phase({t: buffer.arrays(t)}, models[t], None, tc, rng)
        else:
            data = {t: buffer.arrays(t) for t in task_ids if buffer.count(t)}
            train_phase(data, models[SHARED], posteriors or None, tc, rng)
    except FloatingPointError:
        if out_dir is not None:
            save_checkpoint(out_dir / "diagnostic.ckpt", config, models, posteriors, meta)
            log.error("non-finite loss; diagnostic checkpoint written to %s", out_dir / "diagnostic.ckpt")
        raise


def run_training(config: ExperimentConfig, out_dir=None) -> TrainingResult:
    """Algorithm-1 style loop over ``train_rounds`` rounds of every training task.

    Round 0 collects one random-policy episode per task. Each later round
    fits the models on all data gathered so far (once per round, or before
    every episode with ``train_cadence = episode``) and then collects one MPC
    episode per task with the training-time done penalty of 0. A final fit
    after the last round leaves the checkpoint trained on every transition.
    """
    rngs = rng_streams(config.seed)
    tasks = make_task_split(config.family, rngs["split"], config.holdout_direction)
    train_tasks = tasks["train"]
    ids = [t.task_id for t in train_tasks]
    held_out = {t.task_id for s in ("weak", "strong") for t in tasks[s]}
    models = build_models(config, ids, rngs["init"])
    posteriors = build_posteriors(config, ids)
    buffer = ReplayBuffer()
    for t in ids:
        buffer.register(t)
    meta = {"manifest": manifest_text(config.family, config.seed, tasks)}

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for stale in ("metrics.csv", "timing.csv"):
            (out_dir / stale).unlink(missing_ok=True)
        save_config(config, out_dir / "config.cfg")
        (out_dir / "manifest.txt").write_text(meta["manifest"])

    cem = config.cem_config()
    T = config.steps_per_episode
    rows = []
    for rnd in range(config.train_rounds):
        order = [train_tasks[i] for i in rngs["schedule"].permutation(len(train_tasks))]
        if rnd > 0 and config.learn and config.train_cadence == "round":
            _fit(config, models, posteriors, buffer, ids, rngs["train"], out_dir, meta)
        for task in order:
            if task.task_id in held_out:
                raise AssertionError(f"held-out task {task.task_id} scheduled for training")
            fit_ids = [task.task_id] if config.mode == "specialist" else ids
            if rnd > 0 and config.learn and config.train_cadence == "episode":
                _fit(config, models, posteriors, buffer, fit_ids, rngs["train"], out_dir, meta)
            start = time.perf_counter()
            env = task.make_env()
            env.episode_length = T
            post = posteriors.get(task.task_id)
            if rnd == 0:
                policy = random_policy(config.action_dim, rngs["policy"])
            else:
                policy = mpc_policy(model_for(models, task.task_id), post, cem, config.family, rngs["plan"])
            ep = run_episode(env, task.task_id, policy, T)
            buffer.extend(ep.records)
            row = MetricsRow(
                config.mode,
                config.seed,
                "train",
                task.task_id,
                rnd,
                ep.total_return,
                ep.steps,
                time.perf_counter() - start,
                posterior_snapshot(post),
            )
            rows.append(row)
            log.info("train seed=%d round=%d task=%s return=%.2f steps=%d", config.seed, rnd, task.task_id, ep.total_return, ep.steps)
            if out_dir is not None:
                write_metrics([row], out_dir / "metrics.csv")
                save_checkpoint(out_dir / CHECKPOINT_NAME, config, models, posteriors, meta)

    for t in buffer.tasks:
        if t in held_out:
            raise AssertionError(f"held-out task {t} leaked into the training buffer")
    if config.learn:
        _fit(config, models, posteriors, buffer, ids, rngs["train"], out_dir, meta)
        if out_dir is not None:
            save_checkpoint(out_dir / CHECKPOINT_NAME, config, models, posteriors, meta)
    return TrainingResult(config, models, posteriors, buffer, tasks, rows, out_dir)


def transfer_return(rows) -> float:
    """Mean return over the MPC (non-random) training episodes."""
    vals = [r.episode_return for r in rows if r.phase == "train" and r.episode > 0]
    if not vals:
        raise ValueError("no MPC training episodes recorded")
    return float(np.mean(vals))
