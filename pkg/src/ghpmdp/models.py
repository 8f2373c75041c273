"""Gaussian-head networks and probabilistic ensembles for dynamics and reward.

Parameters of all ensemble members live in one ParamStore with a leading
member axis (weights ``(M, fan_in, fan_out)``), so every member is evaluated
and trained in a single batched matmul while keeping its own independent
slice of parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from . import gradcore as gc

LV_MIN = -10.0
LV_MAX = 0.5
STD_FLOOR = 1e-6


def _np_swish(x):
    # x * sigmoid(x), computed in place on a scratch buffer
    t = np.multiply(x, 0.5)
    np.tanh(t, out=t)
    t += 1.0
    t *= 0.5
    t *= x
    return t


def _np_softplus(x):
    return np.logaddexp(0.0, x)


def bound_log_var(raw, lv_min: float = LV_MIN, lv_max: float = LV_MAX):
    """Soft clamp into (lv_min, lv_max); works on arrays and graph nodes."""
    if isinstance(raw, gc.Node):
        lv = lv_max - gc.softplus(lv_max - raw)
        return lv_min + gc.softplus(lv - lv_min)
    lv = lv_max - _np_softplus(lv_max - raw)
    return lv_min + _np_softplus(lv - lv_min)


def unbound_log_var(lv, lv_min: float = LV_MIN, lv_max: float = LV_MAX):
    """Raw pre-activation that :func:`bound_log_var` maps to ``lv``."""
    lv = np.asarray(lv, dtype=np.float64)
    inner = lv_min + np.log(np.expm1(lv - lv_min))
    return lv_max - np.log(np.expm1(lv_max - inner))


class Normalizer:
    """Per-dimension running mean/std of network inputs."""

    def __init__(self, dim: int):
        self.dim = dim
        self.mean = np.zeros(dim)
        self.std = np.ones(dim)
        self._m2 = np.zeros(dim)
        self.count = 0

    def reset(self) -> None:
        self.mean[...] = 0.0
        self.std[...] = 1.0
        self._m2[...] = 0.0
        self.count = 0

    def update(self, data: np.ndarray) -> "Normalizer":
        data = np.asarray(data, dtype=np.float64).reshape(-1, self.dim)
        n = data.shape[0]
        if n == 0:
            raise ValueError("cannot fit a normalizer on an empty dataset")
        batch_mean = data.mean(axis=0)
        batch_m2 = ((data - batch_mean) ** 2).sum(axis=0)
        total = self.count + n
        delta = batch_mean - self.mean
        self.mean = self.mean + delta * n / total
        self._m2 = self._m2 + batch_m2 + delta**2 * self.count * n / total
        self.count = total
        self.std = np.maximum(np.sqrt(self._m2 / total), STD_FLOOR)
        return self

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def state(self) -> dict[str, np.ndarray]:
        return {
            "mean": self.mean.copy(),
            "std": self.std.copy(),
            "m2": self._m2.copy(),
            "count": np.array([float(self.count)]),
        }

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        self.mean = np.array(state["mean"], dtype=np.float64)
        self.std = np.array(state["std"], dtype=np.float64)
        self._m2 = np.array(state["m2"], dtype=np.float64)
        self.count = int(state["count"][0])


def fit_normalizer(normalizer: Normalizer, dataset: np.ndarray) -> Normalizer:
    """Reset ``normalizer`` and absorb every row of ``dataset``."""
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.size == 0:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    normalizer.reset()
    return normalizer.update(dataset)


@dataclass
class InputSpec:
    """Which observed quantities and latent factors a network consumes."""

    base: tuple[str, ...]
    base_dim: int
    latents: tuple[tuple[str, int], ...] = ()

    @property
    def latent_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.latents)

    @property
    def latent_dim(self) -> int:
        return int(sum(d for _, d in self.latents))

    @property
    def in_dim(self) -> int:
        return self.base_dim + self.latent_dim


class GaussianHeadNet:
    """MLP emitting a mean and a bounded log-variance, stacked over members."""

    def __init__(
        self,
        spec: InputSpec,
        out_dim: int,
        hidden: Sequence[int],
        members: int = 1,
        rng: np.random.Generator | None = None,
        name: str = "net",
        lv_min: float = LV_MIN,
        lv_max: float = LV_MAX,
    ):
        if members < 1:
            raise ValueError("need at least one member")
        rng = np.random.default_rng() if rng is None else rng
        self.spec = spec
        self.out_dim = out_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.members = members
        self.lv_min, self.lv_max = lv_min, lv_max
        self.normalizer = Normalizer(spec.base_dim)
        self.params = gc.ParamStore(name)
        widths = (spec.in_dim,) + self.hidden + (2 * out_dim,)
        self.n_layers = len(widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if i == self.n_layers - 1:
                w = np.zeros((members, fan_in, fan_out))
            else:
                lim = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-lim, lim, size=(members, fan_in, fan_out))
            self.params.add(f"W{i}", w)
            self.params.add(f"b{i}", np.zeros((members, 1, fan_out)))

    @property
    def name(self) -> str:
        return self.params.name

    def _check(self, base: np.ndarray, latents) -> None:
        if base.shape[-1] != self.spec.base_dim:
            raise gc.ShapeError(
                f"{self.name}: expected base input dim {self.spec.base_dim} "
                f"({'+'.join(self.spec.base)}), got {base.shape[-1]}"
            )
        for lname, ldim in self.spec.latents:
            if latents is None or lname not in latents:
                raise gc.ShapeError(f"{self.name}: missing latent factor {lname!r}")
            z = latents[lname]
            zshape = z.shape if not isinstance(z, gc.Node) else z.value.shape
            if zshape[-1] != ldim:
                raise gc.ShapeError(f"{self.name}: latent {lname!r} has dim {zshape[-1]}, expected {ldim}")

    def predict(self, base, latents: Mapping[str, np.ndarray] | None = None, members=None):
        """Graph-free forward pass.

        ``base`` is ``(N, d)`` (shared by all members) or ``(K, N, d)``;
        latents are broadcastable to ``(K, N, d_f)``. Returns ``(mean, log_var)``
        of shape ``(K, N, out_dim)``.
        """
        base = np.asarray(base, dtype=np.float64)
        self._check(base, latents)
        x = self.normalizer.normalize(base)
        sel = slice(None) if members is None else members
        ws = [self.params[f"W{i}"][sel] for i in range(self.n_layers)]
        bs = [self.params[f"b{i}"][sel] for i in range(self.n_layers)]
        k = ws[0].shape[0]
        if self.spec.latents:
            lead = np.broadcast_shapes(
                x.shape[:-1] if x.ndim == 3 else (k,) + x.shape[:-1],
                *[np.shape(latents[n])[:-1] for n in self.spec.latent_names],
            )
            parts = [np.broadcast_to(x, lead + (x.shape[-1],))]
            for n, d in self.spec.latents:
                parts.append(np.broadcast_to(latents[n], lead + (d,)))
            x = np.concatenate(parts, axis=-1)
        h = x
        for i in range(self.n_layers - 1):
            h = _np_swish(np.matmul(h, ws[i]) + bs[i])
        out = np.matmul(h, ws[-1]) + bs[-1]
        mean = out[..., : self.out_dim]
        return mean, bound_log_var(out[..., self.out_dim :], self.lv_min, self.lv_max)

    def forward(self, base, latents: Mapping[str, gc.Node] | None = None, trainable: bool = True):
        """Recorded forward pass; ``base`` is ``(K, N, d)``, latents ``(K, N, d_f)`` nodes."""
        base = np.asarray(base, dtype=np.float64)
        self._check(base, latents)
        if base.ndim == 2:
            base = np.broadcast_to(base, (self.members,) + base.shape)
        x = gc.constant(self.normalizer.normalize(base))
        if self.spec.latents:
            x = gc.concat([x] + [latents[n] for n in self.spec.latent_names], axis=-1)
        get = self.params.leaf if trainable else (lambda key: gc.constant(self.params[key]))
        h = x
        for i in range(self.n_layers):
            h = gc.affine(h, get(f"W{i}"), get(f"b{i}"))
            if i < self.n_layers - 1:
                h = gc.swish(h)
        mean = h[..., : self.out_dim]
        return mean, bound_log_var(h[..., self.out_dim :], self.lv_min, self.lv_max)


class MemberView:
    """One ensemble member, viewed through the stacked parameter store."""

    def __init__(self, net: GaussianHeadNet, index: int):
        if not 0 <= index < net.members:
            raise IndexError(f"member {index} out of range for ensemble of {net.members}")
        self.net = net
        self.index = index

    @property
    def spec(self) -> InputSpec:
        return self.net.spec

    def predict(self, base, latents=None):
        mean, lv = self.net.predict(base, latents, members=[self.index])
        return mean[0], lv[0]


@dataclass
class ProbabilisticEnsemble:
    """M Gaussian-head members whose predictive density is their uniform mixture."""

    net: GaussianHeadNet
    role: str = "dynamics"

    def __post_init__(self):
        if self.role not in ("dynamics", "reward"):
            raise ValueError(f"role must be 'dynamics' or 'reward', got {self.role!r}")

    @classmethod
    def build(
        cls,
        role: str,
        state_dim: int,
        action_dim: int,
        latents: Sequence[tuple[str, int]] = (),
        hidden: Sequence[int] | None = None,
        members: int = 5,
        rng: np.random.Generator | None = None,
        name: str | None = None,
    ) -> "ProbabilisticEnsemble":
        if role == "dynamics":
            spec = InputSpec(("state", "action"), state_dim + action_dim, tuple(latents))
            out_dim = state_dim
            hidden = (256, 256, 256) if hidden is None else hidden
        else:
            spec = InputSpec(("state", "action", "next_state"), 2 * state_dim + action_dim, tuple(latents))
            out_dim = 1
            hidden = (32,) if hidden is None else hidden
        net = GaussianHeadNet(spec, out_dim, hidden, members, rng, name or role)
        return cls(net, role)

    @property
    def size(self) -> int:
        return self.net.members

    @property
    def params(self) -> gc.ParamStore:
        return self.net.params

    @property
    def normalizer(self) -> Normalizer:
        return self.net.normalizer

    @property
    def latent_names(self) -> tuple[str, ...]:
        return self.net.spec.latent_names

    def member(self, index: int) -> MemberView:
        return MemberView(self.net, index)

    def predict(self, base, latents=None, members=None):
        return self.net.predict(base, latents, members)

    def member_distance(self, i: int, j: int) -> float:
        total = 0.0
        for key in self.params:
            total += float(np.sum((self.params[key][i] - self.params[key][j]) ** 2))
        return float(np.sqrt(total))


# --- operations -------------------------------------------------------------


def _row(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _latent_rows(z, n: int):
    if z is None:
        return None
    return {k: np.broadcast_to(_row(v), (n, _row(v).shape[-1])) for k, v in z.items()}


def dyn_forward(member: MemberView, s, a, z: Mapping[str, np.ndarray] | None = None):
    """Mean state change and log-variance for states ``s`` and actions ``a``."""
    s, a = _row(s), _row(a)
    if s.shape[0] != a.shape[0]:
        raise gc.ShapeError(f"dyn_forward: {s.shape[0]} states but {a.shape[0]} actions")
    return member.predict(np.concatenate([s, a], axis=-1), _latent_rows(z, s.shape[0]))


def reward_forward(member: MemberView, s, a, s_next, z: Mapping[str, np.ndarray] | None = None):
    s, a, s_next = _row(s), _row(a), _row(s_next)
    if not s.shape[0] == a.shape[0] == s_next.shape[0]:
        raise gc.ShapeError("reward_forward: row counts of s, a, s_next differ")
    return member.predict(np.concatenate([s, a, s_next], axis=-1), _latent_rows(z, s.shape[0]))


def member_log_probs(ensemble: ProbabilisticEnsemble, base, target, latents=None) -> np.ndarray:
    """Per-member Gaussian log densities, shape ``(M, N)``."""
    mean, lv = ensemble.predict(base, latents)
    target = np.asarray(target, dtype=np.float64)
    if target.shape[-1] != mean.shape[-1]:
        raise gc.ShapeError(f"target dim {target.shape[-1]} != model output dim {mean.shape[-1]}")
    diff = target - mean
    return -0.5 * np.sum(diff * diff * np.exp(-lv) + lv + gc.LOG_2PI, axis=-1)


def mixture_log_prob(ensemble: ProbabilisticEnsemble, base, target, latents=None) -> np.ndarray:
    """log of (1/M) sum_m p_m(target | base), one value per row."""
    lp = member_log_probs(ensemble, base, target, latents)
    return logsumexp(lp, axis=0) - np.log(lp.shape[0])


def dyn_sample(member: MemberView, s, a, z, rng: np.random.Generator) -> np.ndarray:
    """Draw a next state ``s + mean + sigma * eps``."""
    s = _row(s)
    mean, lv = dyn_forward(member, s, a, z)
    return s + mean + np.exp(0.5 * lv) * rng.standard_normal(mean.shape)


@dataclass
class WorldModel:
    """Dynamics and reward ensembles that share one latent layout."""

    dynamics: ProbabilisticEnsemble
    reward: ProbabilisticEnsemble
    latent_names: tuple[str, ...] = field(default=())

    @property
    def stores(self) -> list[gc.ParamStore]:
        return [self.dynamics.params, self.reward.params]

    def checksum(self) -> str:
        return self.dynamics.params.checksum() + self.reward.params.checksum()
