"""Latent inference on the hidden-parameter cartpole with a known model.

There is no network learning here: the dynamics and reward are the true
parametric cartpole with ``(eta_a, eta_l, eta_x)`` replaced by
``softplus(z_a, z_l, z_x)``. Mean-field Gaussian posteriors over the three
latents are fitted by SVI on the current episode's transitions, warm-started
from the previous episode, and a random-search planner acts on samples from
that posterior.

Schedule: episode 0 records the prior, episode 1 runs a random policy,
episodes 2 and up plan, and the goal moves by ``GOAL_SHIFT`` from episode 4 on.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import gradcore as gc
from ..data import TaskData
from ..envs import cartpole
from ..envs.tasks import GOAL_SHIFT, TOY_TASKS, cartpole_task
from ..latent import LatentLayout, TaskPosterior, positive_transform
from ..planner import CemConfig
from .config import ExperimentConfig
from .metrics import MetricsRow, write_metrics, write_trace
from .rollout import mpc_policy, random_policy, run_episode
from .training import rng_streams

log = logging.getLogger(__name__)

SWITCH_EPISODE = 4
TOY_LAYOUT = LatentLayout.structured({"z_a": (1, "agent"), "z_l": (1, "dynamics"), "z_x": (1, "reward")})
TRUE_NAMES = {"z_a": "action_scale", "z_l": "pole_length", "z_x": "goal_x"}


def _softplus(z):
    return np.logaddexp(0.0, z)


class ParametricDynamics:
    """Known cartpole transition, conditioned on ``z_a`` and ``z_l``."""

    size = 1
    latent_names = ("z_a", "z_l")

    def __init__(self, noise_std: float, substeps: int = cartpole.SUBSTEPS):
        self.log_var = 2.0 * np.log(noise_std)
        self.substeps = substeps

    def predict(self, base, latents=None, members=None):
        base = np.asarray(base, dtype=np.float64)
        scale = _softplus(latents["z_a"][..., 0])
        length = _softplus(latents["z_l"][..., 0])
        x, xd, th, thd = cartpole.split_obs(base[..., : cartpole.STATE_DIM])
        force = scale * cartpole.MAX_FORCE * np.clip(base[..., cartpole.STATE_DIM], -1.0, 1.0)
        nxt = cartpole.observe(*cartpole.integrate(x, xd, th, thd, force, length, substeps=self.substeps))
        mean = nxt - base[..., : cartpole.STATE_DIM]
        return mean, np.full_like(mean, self.log_var)


class ParametricReward:
    """``-(softplus(z_x) - tip)^2`` with the tip position using ``softplus(z_l)``."""

    size = 1
    latent_names = ("z_l", "z_x")

    def __init__(self, noise_std: float):
        self.log_var = 2.0 * np.log(noise_std)

    def predict(self, base, latents=None, members=None):
        base = np.asarray(base, dtype=np.float64)
        nxt = base[..., cartpole.STATE_DIM + cartpole.ACTION_DIM :]
        length = _softplus(latents["z_l"][..., 0])
        goal = _softplus(latents["z_x"][..., 0])
        mean = -((goal - (nxt[..., 0] + length * nxt[..., 3])) ** 2)[..., None]
        return mean, np.full_like(mean, self.log_var)


@dataclass
class ToyModel:
    dynamics: ParametricDynamics
    reward: ParametricReward


def toy_loss(posterior: TaskPosterior, data: TaskData, rng, n_samples: int, dyn_noise: float, rew_noise: float):
    """Negative ELBO of the parametric model; reparameterized over ``n_samples`` draws."""
    z = {}
    for name in ("z_a", "z_l", "z_x"):
        eps = rng.standard_normal((n_samples, 1))
        z[name] = posterior.params.leaf(f"{name}.mean") + gc.exp(posterior.params.leaf(f"{name}.log_std")) * eps
    scale, length, goal = (positive_transform(z[n]) for n in ("z_a", "z_l", "z_x"))
    pred = cartpole.predict_graph(data.states, data.actions, scale, length)
    shape = pred.shape
    target = np.broadcast_to(data.next_states, shape)
    nll_d = gc.gaussian_nll(target, pred, np.full(shape, 2.0 * np.log(dyn_noise)))
    tip = length * data.next_states[:, 3] + data.next_states[:, 0]
    rmean = gc.square(goal - tip) * -1.0
    rshape = rmean.shape
    nll_r = gc.gaussian_nll(np.broadcast_to(data.rewards, rshape), rmean, np.full(rshape, 2.0 * np.log(rew_noise)))
    kl = None
    for f in posterior.layout.factors:
        term = gc.diag_gaussian_kl(
            posterior.params.leaf(f"{f.name}.mean"),
            posterior.params.leaf(f"{f.name}.log_std") * 2.0,
            np.zeros(f.dim),
            np.zeros(f.dim),
        )
        kl = term if kl is None else kl + term
    return (nll_d + nll_r) * (1.0 / n_samples) + kl


def infer(posterior: TaskPosterior, data: TaskData, config: ExperimentConfig, rng) -> None:
    for _ in range(config.toy_svi_iterations):
        loss = toy_loss(posterior, data, rng, config.n_samples, config.toy_dyn_noise, config.toy_rew_noise)
        grads = gc.backward(loss, posterior.params)
        gc.adam_step(posterior.params, grads, config.toy_learning_rate)


def distance_to_goal(obs, params: cartpole.CartpoleParams) -> float:
    return float(abs(params.goal_x - cartpole.tip_x(obs, params.pole_length)))


@dataclass
class ToyResult:
    rows: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    # task_id -> episode -> {factor: (mean, std)} at the end of that episode
    posteriors: dict = field(default_factory=dict)
    distances: dict = field(default_factory=dict)  # task_id -> episode -> mean distance
    truths: dict = field(default_factory=dict)  # task_id -> episode -> {factor: true value}

    def positive_means(self, task_id, episode) -> dict:
        return {k: float(_softplus(m[0])) for k, (m, _) in self.posteriors[task_id][episode].items()}


def run_toy_demo(config: ExperimentConfig, out_dir=None) -> ToyResult:
    rngs = rng_streams(config.seed, salt=7)
    cem = CemConfig(
        population=config.population,
        elite_frac=config.elite_frac,
        horizon=config.toy_horizon,
        particles=config.toy_particles,
    ).random_shooting()
    model = ToyModel(ParametricDynamics(config.toy_dyn_noise, config.toy_plan_substeps), ParametricReward(config.toy_rew_noise))
    steps = config.toy_steps
    result = ToyResult()

    for index in range(len(TOY_TASKS)):
        base_task = cartpole_task(index)
        tid = base_task.task_id
        post = TaskPosterior(tid, TOY_LAYOUT)
        result.posteriors[tid], result.distances[tid], result.truths[tid] = {}, {}, {}

        def record(episode, step, dist):
            for name, (m, s) in post.snapshot().items():
                for c in range(m.size):
                    result.trace.append((tid, episode, step, name, c, float(m[c]), float(s[c]), dist))

        record(0, 0, float("nan"))
        result.posteriors[tid][0] = post.snapshot()
        for episode in range(1, config.toy_episodes):
            start = time.perf_counter()
            shift = GOAL_SHIFT if episode >= SWITCH_EPISODE else 0.0
            task = cartpole_task(index, goal_x=TOY_TASKS[index]["goal_x"] + shift)
            params = task.params()
            env = task.make_env()
            env.episode_length = steps
            dists = []

            def on_step(t, ep):
                d = distance_to_goal(ep.records[-1].next_state, params)
                dists.append(d)
                if t % config.toy_infer_every == 0:
                    infer(post, TaskData.from_records(ep.records), config, rngs["train"])
                    record(episode, t, d)

            if episode == 1:
                policy = random_policy(cartpole.ACTION_DIM, rngs["policy"])
            else:
                policy = mpc_policy(model, post, cem, "cartpole", rngs["plan"])
            ep = run_episode(env, tid, policy, steps, on_step)
            result.posteriors[tid][episode] = post.snapshot()
            result.distances[tid][episode] = float(np.mean(dists))
            result.truths[tid][episode] = {k: getattr(params, v) for k, v in TRUE_NAMES.items()}
            result.rows.append(
                MetricsRow(
                    "toy",
                    config.seed,
                    "toy",
                    tid,
                    episode,
                    ep.total_return,
                    ep.steps,
                    time.perf_counter() - start,
                    post.snapshot(),
                )
            )
            log.info("toy task=%s episode=%d mean distance=%.3f", tid, episode, result.distances[tid][episode])

    if out_dir is not None:
        out_dir = Path(out_dir)
        for name in ("metrics_toy.csv", "timing_toy.csv", "toy_trace.csv"):
            (out_dir / name).unlink(missing_ok=True)
        write_metrics(result.rows, out_dir / "metrics_toy.csv", out_dir / "timing_toy.csv")
        write_trace(result.trace, out_dir / "toy_trace.csv")
    return result
