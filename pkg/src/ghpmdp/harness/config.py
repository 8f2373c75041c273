"""Experiment configuration: a dataclass plus a flat ``key = value`` file format.

Lines look like ``horizon = 25``. ``#`` starts a comment. Tuples are written
comma-separated (``dyn_hidden = 256,256,256``); an empty tuple is ``()``.
Unknown keys are rejected so typos surface immediately.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from ..envs import cartpole, pointrobot
from ..latent import LatentLayout
from ..objective import TrainConfig
from ..planner import CemConfig

MODES = ("joint_lv", "structured_lv", "generalist", "specialist")


@dataclass(frozen=True)
class ExperimentConfig:
    # run identity
    family: str = "pointrobot"
    mode: str = "structured_lv"
    seed: int = 0
    out: str = "runs"

    # latent layout
    joint_latent_dim: int = 8
    dynamics_latent_dim: int = 4
    reward_latent_dim: int = 4

    # models
    ensemble_size: int = 5
    dyn_hidden: tuple = (256, 256, 256)
    rew_hidden: tuple = (32,)

    # optimization
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    n_samples: int = 2
    posterior_lr_multiplier: float = 1.0
    learn: bool = True

    # data collection; episode_length 0 means the family default
    train_rounds: int = 3
    train_cadence: str = "round"
    episode_length: int = 0
    holdout_direction: int = 1

    # planner
    population: int = 512
    elite_frac: float = 0.1
    cem_iterations: int = 5
    horizon: int = 25
    particles: int = 20
    alpha: float = 0.1

    # test-time adaptation
    eval_episodes: int = 5
    svi_every: int = 10
    svi_iterations: int = 100
    svi_lr_multiplier: float = 5.0

    # toy inference demo
    toy_episodes: int = 5
    toy_steps: int = 200
    toy_infer_every: int = 50
    toy_svi_iterations: int = 300
    toy_learning_rate: float = 0.05
    toy_dyn_noise: float = 0.01
    toy_rew_noise: float = 0.01
    toy_plan_substeps: int = 4
    toy_horizon: int = 15
    toy_particles: int = 4

    def __post_init__(self):
        if self.family not in ("cartpole", "pointrobot"):
            raise ValueError(f"family must be cartpole or pointrobot, got {self.family!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.train_cadence not in ("round", "episode"):
            raise ValueError("train_cadence must be 'round' or 'episode'")
        if self.train_rounds < 1:
            raise ValueError("train_rounds must be at least 1 (round 0 is the random policy)")
        if self.particles % self.ensemble_size:
            raise ValueError("particles must be divisible by ensemble_size")

    # --- derived views ---------------------------------------------------

    @property
    def is_latent(self) -> bool:
        return self.mode in ("joint_lv", "structured_lv")

    @property
    def steps_per_episode(self) -> int:
        if self.episode_length > 0:
            return self.episode_length
        return cartpole.EPISODE_LENGTH if self.family == "cartpole" else pointrobot.EPISODE_LENGTH

    @property
    def state_dim(self) -> int:
        return cartpole.STATE_DIM if self.family == "cartpole" else pointrobot.STATE_DIM

    @property
    def action_dim(self) -> int:
        return cartpole.ACTION_DIM if self.family == "cartpole" else pointrobot.ACTION_DIM

    def layout(self) -> LatentLayout | None:
        """Latent layout for the mode; latent-free modes have none."""
        if self.mode == "joint_lv":
            return LatentLayout.joint(self.joint_latent_dim)
        if self.mode == "structured_lv":
            return LatentLayout.structured(
                {"z_d": (self.dynamics_latent_dim, "dynamics"), "z_r": (self.reward_latent_dim, "reward")}
            )
        return None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            self.epochs, self.batch_size, self.learning_rate, self.n_samples, self.posterior_lr_multiplier
        )

    def cem_config(self) -> CemConfig:
        """Training-time planner (done penalty 0)."""
        return CemConfig(
            population=self.population,
            elite_frac=self.elite_frac,
            iterations=self.cem_iterations,
            horizon=self.horizon,
            particles=self.particles,
            alpha=self.alpha,
            action_low=(-1.0,) * self.action_dim,
            action_high=(1.0,) * self.action_dim,
        ).for_train()

    # --- serialization ---------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **overrides)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value) if value else "()"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        if text in ("()", ""):
            return ()
        return tuple(int(v) for v in text.split(","))
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = ExperimentConfig() if base is None else base
    defaults = {f.name: getattr(base, f.name) for f in fields(base)}
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise KeyError(f"line {lineno}: unknown config key {key!r}")
        try:
            overrides[key] = _parse(value, defaults[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    return replace(base, **overrides)


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(config.to_text())


def config_schema() -> list[tuple[str, str, str]]:
    """``(key, type, default)`` for every field, used by the CLI help."""
    out = []
    for f in dataclasses.fields(ExperimentConfig):
        out.append((f.name, type(f.default).__name__, _format(f.default)))
    return out
