"""Latent task variables: factor layouts and per-task diagonal-Gaussian posteriors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gradcore as gc

FACTOR_KINDS = ("dynamics", "agent", "reward")
LAYOUT_MODES = ("joint", "structured")


@dataclass(frozen=True)
class FactorSpec:
    name: str
    dim: int
    kind: str = "dynamics"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"factor {self.name!r}: dimension must be positive, got {self.dim}")
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"factor {self.name!r}: kind must be one of {FACTOR_KINDS}")


@dataclass(frozen=True)
class LatentLayout:
    """Ordered latent factors and how they are wired into the two models.

    In joint mode the single factor conditions both dynamics and reward. In
    structured mode dynamics- and agent-kind factors feed the dynamics model and
    reward-kind factors feed the reward model.
    """

    factors: tuple[FactorSpec, ...]
    mode: str = "structured"

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if self.mode not in LAYOUT_MODES:
            raise ValueError(f"layout mode must be one of {LAYOUT_MODES}, got {self.mode!r}")
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate factor names in {names}")
        if self.mode == "joint" and len(self.factors) != 1:
            raise ValueError("joint layout needs exactly one factor")
        if self.mode == "structured" and len(self.factors) < 2:
            raise ValueError("structured layout needs at least two factors")

    @classmethod
    def joint(cls, dim: int = 8, name: str = "z") -> "LatentLayout":
        return cls((FactorSpec(name, dim, "dynamics"),), "joint")

    @classmethod
    def structured(cls, dims: dict[str, tuple[int, str]] | None = None) -> "LatentLayout":
        if dims is None:
            dims = {"z_d": (4, "dynamics"), "z_r": (4, "reward")}
        return cls(tuple(FactorSpec(n, d, k) for n, (d, k) in dims.items()), "structured")

    @property
    def total_dim(self) -> int:
        return int(np.sum([f.dim for f in self.factors]))

    def factor(self, name: str) -> FactorSpec:
        for f in self.factors:
            if f.name == name:
                return f
        raise KeyError(f"unknown latent factor {name!r}; layout has {[f.name for f in self.factors]}")

    def dynamics_factors(self) -> tuple[str, ...]:
        if self.mode == "joint":
            return (self.factors[0].name,)
        return tuple(f.name for f in self.factors if f.kind in ("dynamics", "agent"))

    def reward_factors(self) -> tuple[str, ...]:
        if self.mode == "joint":
            return (self.factors[0].name,)
        return tuple(f.name for f in self.factors if f.kind == "reward")


class TaskPosterior:
    """q(z) for one task: a mean and log-std per factor, held in a ParamStore."""

    def __init__(self, task_id, layout: LatentLayout):
        self.task_id = task_id
        self.layout = layout
        self.params = gc.ParamStore(f"posterior/{task_id}")
        for f in layout.factors:
            self.params.add(f"{f.name}.mean", np.zeros(f.dim))
            self.params.add(f"{f.name}.log_std", np.zeros(f.dim))

    def mean(self, factor: str) -> np.ndarray:
        self.layout.factor(factor)
        return self.params[f"{factor}.mean"].copy()

    def std(self, factor: str) -> np.ndarray:
        self.layout.factor(factor)
        return np.exp(self.params[f"{factor}.log_std"])

    def snapshot(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {f.name: (self.mean(f.name), self.std(f.name)) for f in self.layout.factors}

    def sample(self, factor: str, rng: np.random.Generator, shape: Sequence[int] = ()) -> np.ndarray:
        """Plain (non-differentiable) draw of shape ``shape + (dim,)``."""
        spec = self.layout.factor(factor)
        eps = rng.standard_normal(tuple(shape) + (spec.dim,))
        return self.params[f"{factor}.mean"] + np.exp(self.params[f"{factor}.log_std"]) * eps


def sample_reparam(
    posterior: TaskPosterior,
    factor: str,
    rng: np.random.Generator | None = None,
    shape: Sequence[int] = (),
    eps: np.ndarray | None = None,
) -> gc.Node:
    """Reparameterized draw ``mean + exp(log_std) * eps``; gradients reach both."""
    spec = posterior.layout.factor(factor)
    if eps is None:
        if rng is None:
            raise ValueError("sample_reparam needs either rng or eps")
        eps = rng.standard_normal(tuple(shape) + (spec.dim,))
    mu = posterior.params.leaf(f"{factor}.mean")
    log_std = posterior.params.leaf(f"{factor}.log_std")
    return mu + gc.exp(log_std) * eps


def kl_per_factor(posterior: TaskPosterior) -> dict[str, gc.Node]:
    out = {}
    for f in posterior.layout.factors:
        mu = posterior.params.leaf(f"{f.name}.mean")
        log_var = posterior.params.leaf(f"{f.name}.log_std") * 2.0
        out[f.name] = gc.diag_gaussian_kl(mu, log_var, np.zeros(f.dim), np.zeros(f.dim))
    return out


def kl_to_prior(posterior: TaskPosterior) -> gc.Node:
    """Sum over factors of KL(q || N(0, I))."""
    total = None
    for node in kl_per_factor(posterior).values():
        total = node if total is None else total + node
    return total


def reset_to_prior(posterior: TaskPosterior) -> TaskPosterior:
    for key in posterior.params:
        posterior.params.values[key][...] = 0.0
    posterior.params.reset_moments()
    return posterior


def positive_transform(z):
    """Softplus map from an unconstrained latent to a positive parameter."""
    return gc.softplus(z)


def inverse_positive_transform(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))
