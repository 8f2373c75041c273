"""Variational training and test-time inference objectives."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Mapping

import numpy as np

from . import gradcore as gc
from .data import TaskData
from .latent import TaskPosterior, kl_per_factor
from .models import WorldModel

log = logging.getLogger(__name__)


@dataclass
class Minibatch:
    """Transitions from one task; arrays are ``(B, d)`` or ``(M, B, d)`` per member."""

    task_id: Hashable
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("minibatch must contain at least one transition")

    @property
    def batch_size(self) -> int:
        return self.states.shape[-2]

    @classmethod
    def from_data(cls, task_id, data: TaskData, index=None) -> "Minibatch":
        if index is not None:
            data = data.subset(index)
        return cls(task_id, data.states, data.actions, data.next_states, data.rewards[..., None])


@dataclass
class LossReport:
    total: gc.Node
    dynamics_nll: float
    reward_nll: float
    kl: float
    kl_factors: dict[str, float] = field(default_factory=dict)
    kl_scale: float = 1.0

    @property
    def value(self) -> float:
        return float(self.total.value)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    n_samples: int = 2
    # posteriors see only their own task's minibatches, so they may need a larger step
    posterior_lr_multiplier: float = 1.0


def _expand(arr: np.ndarray, members: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.broadcast_to(arr, (members,) + arr.shape)
    return arr


def elbo_loss(
    model: WorldModel,
    posterior: TaskPosterior | None,
    batch: Minibatch,
    rng: np.random.Generator,
    n_samples: int = 2,
    kl_scale: float = 1.0,
    trainable: bool = True,
) -> LossReport:
    """Negative ELBO averaged over ensemble members.

    Each member contributes ``-(1/S) sum_s sum_b [log p_dyn + log p_rew]``
    with its own ``S`` latent draws; the KL term is added once and scaled by
    ``kl_scale``.
    """
    dyn, rew = model.dynamics, model.reward
    k = dyn.size
    if rew.size != k:
        raise ValueError("dynamics and reward ensembles must have the same size")
    s = _expand(batch.states, k)
    a = _expand(batch.actions, k)
    s2 = _expand(batch.next_states, k)
    r = _expand(np.asarray(batch.rewards, dtype=np.float64).reshape(batch.states.shape[:-1] + (1,)), k)
    b = s.shape[1]

    needed = tuple(dict.fromkeys(dyn.latent_names + rew.latent_names))
    if needed and posterior is None:
        raise ValueError(f"models consume latents {needed} but no posterior was given")
    if posterior is not None and batch.task_id != posterior.task_id:
        raise KeyError(f"batch from task {batch.task_id!r} given posterior of task {posterior.task_id!r}")

    reps = n_samples if needed else 1
    z = {}
    for name in needed:
        dim = posterior.layout.factor(name).dim
        eps = rng.standard_normal((k, reps, dim))
        mu = posterior.params.leaf(f"{name}.mean")
        log_std = posterior.params.leaf(f"{name}.log_std")
        z[name] = gc.repeat(mu + gc.exp(log_std) * eps, b, axis=1)

    def tile(x):
        return np.tile(x, (1, reps, 1))

    dyn_base = tile(np.concatenate([s, a], axis=-1))
    rew_base = tile(np.concatenate([s, a, s2], axis=-1))
    mean_d, lv_d = dyn.net.forward(dyn_base, {n: z[n] for n in dyn.latent_names}, trainable)
    mean_r, lv_r = rew.net.forward(rew_base, {n: z[n] for n in rew.latent_names}, trainable)
    norm = 1.0 / (reps * k)
    nll_d = gc.gaussian_nll(tile(s2 - s), mean_d, lv_d) * norm
    nll_r = gc.gaussian_nll(tile(r), mean_r, lv_r) * norm
    total = nll_d + nll_r

    kl_total, kl_factors = 0.0, {}
    if posterior is not None:
        parts = kl_per_factor(posterior)
        kl_factors = {n: float(node.value) for n, node in parts.items()}
        kl_node = None
        for node in parts.values():
            kl_node = node if kl_node is None else kl_node + node
        kl_node = kl_node * kl_scale
        kl_total = float(kl_node.value)
        total = total + kl_node
    return LossReport(total, float(nll_d.value), float(nll_r.value), kl_total, kl_factors, kl_scale)


def loss_joint(model, posterior, batch, rng, n_samples=2, kl_scale=1.0, trainable=True) -> LossReport:
    """Single shared latent conditioning both models."""
    if posterior is None or posterior.layout.mode != "joint":
        raise ValueError("loss_joint requires a joint-mode posterior")
    return elbo_loss(model, posterior, batch, rng, n_samples, kl_scale, trainable)


def loss_structured(model, posterior, batch, rng, n_samples=2, kl_scale=1.0, trainable=True) -> LossReport:
    """Per-factor latents wired by each network's inputs; one KL per factor."""
    if posterior is None:
        raise ValueError("loss_structured requires a posterior")
    return elbo_loss(model, posterior, batch, rng, n_samples, kl_scale, trainable)


def _check_finite(report: LossReport, task_id) -> None:
    if not np.isfinite(report.value):
        raise FloatingPointError(f"non-finite loss on task {task_id!r}: {report}")


def train_phase(
    data: Mapping[Hashable, TaskData],
    model: WorldModel,
    posteriors: Mapping[Hashable, TaskPosterior] | None,
    config: TrainConfig,
    rng: np.random.Generator,
) -> list[float]:
    """Fit networks and per-task posteriors on all data; returns mean loss per epoch.

    Each member trains on its own bootstrap resample of every task buffer.
    Minibatches are single-task and interleaved round-robin across tasks.
    Network gradients are exact per member; posterior gradients are averaged
    over members.
    """
    tasks = list(data)
    if not tasks:
        raise ValueError("train_phase needs at least one task")
    for t in tasks:
        if len(data[t]) == 0:
            raise ValueError(f"empty buffer for task {t!r}")
    k = model.dynamics.size

    all_dyn = np.concatenate([data[t].dyn_inputs() for t in tasks])
    all_rew = np.concatenate([data[t].rew_inputs() for t in tasks])
    model.dynamics.normalizer.reset()
    model.dynamics.normalizer.update(all_dyn)
    model.reward.normalizer.reset()
    model.reward.normalizer.update(all_rew)

    boot = {t: rng.integers(0, len(data[t]), size=(k, len(data[t]))) for t in tasks}
    history = []
    for _ in range(config.epochs):
        order = {t: rng.permuted(boot[t], axis=1) for t in tasks}
        n_batches = {t: -(-len(data[t]) // config.batch_size) for t in tasks}
        losses = []
        for j in range(max(n_batches.values())):
            for t in tasks:
                if j >= n_batches[t]:
                    continue
                idx = order[t][:, j * config.batch_size : (j + 1) * config.batch_size]
                d = data[t]
                batch = Minibatch(
                    t,
                    d.states[idx],
                    d.actions[idx],
                    d.next_states[idx],
                    d.rewards[idx][..., None],
                )
                post = None if posteriors is None else posteriors.get(t)
                report = elbo_loss(
                    model, post, batch, rng, config.n_samples, idx.shape[1] / len(d), True
                )
                _check_finite(report, t)
                stores = model.stores + ([post.params] if post is not None else [])
                grads = gc.backward(report.total, stores)
                for store in model.stores:
                    g = {key: v * k for key, v in grads[store.name].items()}
                    gc.adam_step(store, g, config.learning_rate)
                if post is not None:
                    gc.adam_step(
                        post.params, grads[post.params.name], config.learning_rate * config.posterior_lr_multiplier
                    )
                losses.append(report.value)
        history.append(float(np.mean(losses)))
    return history


def testtime_inference_step(
    model: WorldModel,
    posterior: TaskPosterior,
    observed: TaskData,
    config: TrainConfig,
    rng: np.random.Generator,
    iterations: int = 100,
    lr_multiplier: float = 5.0,
    final_lr_multiplier: float | None = None,
    beta2: float = 0.999,
) -> TaskPosterior:
    """SVI on the posterior only, over all data observed so far; networks stay fixed.

    Each iteration uses a uniform minibatch of at most ``config.batch_size``
    transitions with the KL scaled by ``B / N``. The step size is
    ``config.learning_rate * lr_multiplier``; with ``final_lr_multiplier`` set
    it decays geometrically to that multiple over the iterations.
    """
    if observed is None or len(observed) == 0:
        log.warning("test-time inference called with no observations; posterior unchanged")
        return posterior
    n = len(observed)
    full = Minibatch.from_data(posterior.task_id, observed)
    end = lr_multiplier if final_lr_multiplier is None else final_lr_multiplier
    for i in range(iterations):
        frac = i / (iterations - 1) if iterations > 1 else 0.0
        lr = config.learning_rate * lr_multiplier * (end / lr_multiplier) ** frac
        if n > config.batch_size:
            idx = rng.choice(n, size=config.batch_size, replace=False)
            batch = Minibatch.from_data(posterior.task_id, observed, idx)
        else:
            batch = full
        report = elbo_loss(
            model, posterior, batch, rng, config.n_samples, batch.batch_size / n, trainable=False
        )
        _check_finite(report, posterior.task_id)
        grads = gc.backward(report.total, posterior.params)
        gc.adam_step(posterior.params, grads, lr, beta2=beta2)
    return posterior
