"""Cross-entropy-method MPC with latent-conditioned trajectory sampling (TS-inf)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

TRAIN_DONE_PENALTY = 0.0
TEST_DONE_PENALTY = -100.0


class PlanningModel(Protocol):
    """What the planner needs from a dynamics or reward model."""

    size: int
    latent_names: tuple[str, ...]

    def predict(self, base, latents=None, members=None): ...


@dataclass(frozen=True)
class CemConfig:
    population: int = 512
    elite_frac: float = 0.10
    iterations: int = 5
    horizon: int = 25
    particles: int = 20
    done_penalty: float = TRAIN_DONE_PENALTY
    alpha: float = 0.1
    action_low: tuple[float, ...] = (-1.0,)
    action_high: tuple[float, ...] = (1.0,)
    var_floor: float = 1e-6
    random_search: bool = False

    def __post_init__(self):
        object.__setattr__(self, "action_low", tuple(float(x) for x in self.action_low))
        object.__setattr__(self, "action_high", tuple(float(x) for x in self.action_high))
        if len(self.action_low) != len(self.action_high):
            raise ValueError("action bounds must have equal length")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError("each lower action bound must be below its upper bound")
        if not self.population >= self.n_elites >= 2:
            raise ValueError(
                f"need population >= elites >= 2 (population={self.population}, elites={self.n_elites})"
            )
        if self.horizon < 1 or self.iterations < 1 or self.particles < 1:
            raise ValueError("horizon, iterations and particles must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def n_elites(self) -> int:
        return max(2, int(round(self.elite_frac * self.population)))

    @property
    def action_dim(self) -> int:
        return len(self.action_low)

    @property
    def low(self) -> np.ndarray:
        return np.array(self.action_low)

    @property
    def high(self) -> np.ndarray:
        return np.array(self.action_high)

    def for_test(self) -> "CemConfig":
        return replace(self, done_penalty=TEST_DONE_PENALTY)

    def for_train(self) -> "CemConfig":
        return replace(self, done_penalty=TRAIN_DONE_PENALTY)

    def random_shooting(self) -> "CemConfig":
        return replace(self, iterations=1, alpha=1.0, random_search=True)


@dataclass
class ActionProposal:
    """One independent diagonal Gaussian per step of the horizon."""

    mean: np.ndarray  # (h, da)
    var: np.ndarray  # (h, da)

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise ValueError("proposal mean and variance shapes differ")
        if np.any(self.var <= 0):
            raise ValueError("proposal variances must be positive")

    @classmethod
    def initial(cls, config: CemConfig) -> "ActionProposal":
        mid = 0.5 * (config.low + config.high)
        var = ((config.high - config.low) / 2.0) ** 2
        h = config.horizon
        return cls(np.tile(mid, (h, 1)), np.tile(var, (h, 1)))

    def sample(self, n: int, config: CemConfig, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal((n,) + self.mean.shape)
        return np.clip(self.mean + np.sqrt(self.var) * eps, config.low, config.high)

    def entropy(self) -> float:
        return float(0.5 * np.sum(np.log(2.0 * math.pi * math.e * self.var)))


@dataclass
class PlanOutcome:
    action: np.ndarray
    elite_mean: float
    elite_max: float
    best_return: float
    proposal_entropy: float
    iteration_best: list[float] = field(default_factory=list)


def cem_iterate(
    proposal: ActionProposal,
    candidates: np.ndarray,
    scores: np.ndarray,
    config: CemConfig,
) -> ActionProposal:
    """Refit the proposal to the top-scoring candidates, smoothed by ``alpha``.

    Ties at the elite cutoff go to the lower candidate index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != candidates.shape[0] or scores.shape[0] != config.population:
        raise ValueError(
            f"expected {config.population} scores and candidates, got {scores.shape[0]} / {candidates.shape[0]}"
        )
    clean = np.where(np.isnan(scores), -np.inf, scores)
    if np.all(np.isneginf(clean)):
        log.warning("all candidate scores are -inf; proposal left unchanged")
        return proposal
    elite_idx = np.argsort(-clean, kind="stable")[: config.n_elites]
    elites = candidates[elite_idx]
    a = config.alpha
    mean = a * proposal.mean + (1.0 - a) * elites.mean(axis=0)
    var = a * proposal.var + (1.0 - a) * elites.var(axis=0)
    return ActionProposal(mean, np.maximum(var, config.var_floor))


def never_terminates(states: np.ndarray) -> np.ndarray:
    return np.zeros(states.shape[:-1], dtype=bool)


def _sample_particle_latents(posterior, names: Sequence[str], p: int, rng) -> dict[str, np.ndarray]:
    if posterior is None or not names:
        return {}
    return {n: posterior.sample(n, rng, (p,)) for n in names}


def rollout_particles(
    state: np.ndarray,
    candidates: np.ndarray,
    dynamics: PlanningModel,
    reward: PlanningModel,
    latents: Mapping[str, np.ndarray],
    config: CemConfig,
    rng: np.random.Generator,
    early_termination: Callable[[np.ndarray], np.ndarray] = never_terminates,
) -> tuple[np.ndarray, np.ndarray]:
    """Score every candidate action sequence by its mean sampled particle return.

    Particle ``p`` is bound to ensemble member ``p % M`` and latent draw
    ``latents[f][p]`` for the whole rollout. Returns ``(scores, terminated)``:
    a candidate with any terminated particle scores ``done_penalty``.
    """
    c, h, da = candidates.shape
    m = dynamics.size
    p = config.particles
    if p % m:
        raise ValueError(f"particle count {p} must be divisible by ensemble size {m}")
    per = p // m
    n = c * per
    # rows for member j: candidate i, slot q -> row i*per + q; particle index q*m + j
    particle_of = (np.arange(per)[None, :] * m + np.arange(m)[:, None])  # (m, per)
    particle_rows = np.tile(particle_of, (1, c))  # (m, n)

    def member_latents(names):
        return {nm: latents[nm][particle_rows] for nm in names}

    z_dyn = member_latents(dynamics.latent_names)
    z_rew = member_latents(reward.latent_names)

    states = np.broadcast_to(np.asarray(state, dtype=np.float64), (m, n, len(state))).copy()
    alive = np.ones((m, n), dtype=bool)
    terminated = np.zeros((m, n), dtype=bool)
    returns = np.zeros((m, n))
    acts = np.repeat(candidates, per, axis=0)  # (n, h, da)
    for t in range(h):
        a_t = np.broadcast_to(acts[:, t, :], (m, n, da))
        base = np.concatenate([states, a_t], axis=-1)
        mean, lv = dynamics.predict(base, z_dyn)
        nxt = states + mean + np.exp(0.5 * lv) * rng.standard_normal(mean.shape)
        rbase = np.concatenate([states, a_t, nxt], axis=-1)
        rmean, rlv = reward.predict(rbase, z_rew)
        r = (rmean + np.exp(0.5 * rlv) * rng.standard_normal(rmean.shape))[..., 0]
        bad = ~np.isfinite(nxt).all(axis=-1) | ~np.isfinite(r)
        ended = (bad | early_termination(np.where(np.isfinite(nxt), nxt, 0.0))) & alive
        returns += np.where(alive & ~bad, r, 0.0)
        terminated |= ended
        alive &= ~ended
        states = np.where(alive[..., None], nxt, states)
        if not alive.any():
            break
    ret = returns.reshape(m, c, per).transpose(1, 0, 2).reshape(c, p)
    term = terminated.reshape(m, c, per).transpose(1, 0, 2).reshape(c, p).any(axis=1)
    scores = ret.mean(axis=1)
    scores = np.where(term, config.done_penalty, scores)
    return scores, term


def plan_action(
    state: np.ndarray,
    dynamics: PlanningModel,
    reward: PlanningModel,
    posterior,
    config: CemConfig,
    rng: np.random.Generator,
    early_termination: Callable[[np.ndarray], np.ndarray] = never_terminates,
) -> tuple[np.ndarray, PlanOutcome]:
    """Choose the next action by CEM over ``config.horizon`` steps.

    Returns the first action of the final proposal mean (or, in random-search
    mode, of the best sampled sequence). Does not mutate its inputs.
    """
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise ValueError("plan_action: state must be finite")
    names = tuple(dict.fromkeys(tuple(dynamics.latent_names) + tuple(reward.latent_names)))
    proposal = ActionProposal.initial(config)
    best_seq, best_score = None, -np.inf
    history = []
    scores = elites = None
    for _ in range(config.iterations):
        cands = proposal.sample(config.population, config, rng)
        z = _sample_particle_latents(posterior, names, config.particles, rng)
        scores, _ = rollout_particles(state, cands, dynamics, reward, z, config, rng, early_termination)
        i = int(np.argmax(np.where(np.isnan(scores), -np.inf, scores)))
        if scores[i] > best_score or best_seq is None:
            best_seq, best_score = cands[i], float(scores[i])
        history.append(best_score)
        elites = np.sort(scores)[::-1][: config.n_elites]
        proposal = cem_iterate(proposal, cands, scores, config)
    if config.random_search:
        action = best_seq[0]
    else:
        action = proposal.mean[0]
    action = np.clip(action, config.low, config.high)
    outcome = PlanOutcome(
        action=action.copy(),
        elite_mean=float(np.mean(elites)),
        elite_max=float(np.max(elites)),
        best_return=best_score,
        proposal_entropy=proposal.entropy(),
        iteration_best=history,
    )
    return action, outcome
