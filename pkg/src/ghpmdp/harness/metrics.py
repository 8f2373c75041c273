"""Per-episode metrics, posterior traces and bootstrap summaries.

``metrics.csv`` columns (fixed order)::

    mode, seed, phase, task_id, episode, episode_return, steps, posterior_mean, posterior_std

``posterior_mean`` / ``posterior_std`` hold ``factor:v0 v1 ...`` groups joined
by ``;`` (empty for latent-free models). Wall-clock time goes to a sidecar
``timing.csv`` so the metrics file itself is reproducible byte for byte.

``summary.csv`` columns::

    mode, phase, episode, n_seeds, mean, ci_low, ci_high
"""

from __future__ import annotations

import csv
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

METRICS_COLUMNS = (
    "mode",
    "seed",
    "phase",
    "task_id",
    "episode",
    "episode_return",
    "steps",
    "posterior_mean",
    "posterior_std",
)
TIMING_COLUMNS = ("mode", "seed", "phase", "task_id", "episode", "wall_clock")
SUMMARY_COLUMNS = ("mode", "phase", "episode", "n_seeds", "mean", "ci_low", "ci_high")
TRACE_COLUMNS = ("task_id", "episode", "step", "factor", "coordinate", "mean", "std", "distance_to_goal")
PHASES = ("train", "weak", "strong", "toy")

BOOTSTRAP_RESAMPLES = 10_000
BOOTSTRAP_SEED = 12345


@dataclass
class MetricsRow:
    mode: str
    seed: int
    phase: str
    task_id: str
    episode: int
    episode_return: float
    steps: int
    wall_clock: float = 0.0
    posterior: dict = field(default_factory=dict)  # factor -> (mean, std)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")

    def key(self) -> tuple:
        return (self.mode, self.seed, self.phase, self.task_id, self.episode)


def _fmt(x: float) -> str:
    return repr(float(x))


def _fmt_posterior(posterior: dict, which: int) -> str:
    groups = []
    for name in sorted(posterior):
        vals = np.atleast_1d(posterior[name][which])
        groups.append(f"{name}:" + " ".join(_fmt(v) for v in vals))
    return ";".join(groups)


def parse_posterior(text: str) -> dict[str, np.ndarray]:
    out = {}
    for group in filter(None, text.split(";")):
        name, vals = group.split(":", 1)
        out[name] = np.array([float(v) for v in vals.split()])
    return out


def _append_csv(path: Path, header: Sequence[str], lines: Iterable[Sequence[str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(header)
        w.writerows(lines)


def write_metrics(rows: Sequence[MetricsRow], path, timing_path=None) -> None:
    """Append rows to ``path`` (header written on first use) and timings to the sidecar."""
    if not rows:
        raise ValueError("write_metrics needs at least one row")
    path = Path(path)
    seen = set()
    for r in rows:
        if r.key() in seen:
            raise ValueError(f"duplicate metrics row for {r.key()}")
        seen.add(r.key())
    _append_csv(
        path,
        METRICS_COLUMNS,
        (
            (
                r.mode,
                str(r.seed),
                r.phase,
                str(r.task_id),
                str(r.episode),
                _fmt(r.episode_return),
                str(r.steps),
                _fmt_posterior(r.posterior, 0),
                _fmt_posterior(r.posterior, 1),
            )
            for r in rows
        ),
    )
    timing_path = path.with_name("timing.csv") if timing_path is None else Path(timing_path)
    _append_csv(
        timing_path,
        TIMING_COLUMNS,
        ((r.mode, str(r.seed), r.phase, str(r.task_id), str(r.episode), f"{r.wall_clock:.3f}") for r in rows),
    )


def read_metrics(path) -> list[MetricsRow]:
    rows = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            means = parse_posterior(rec["posterior_mean"])
            stds = parse_posterior(rec["posterior_std"])
            rows.append(
                MetricsRow(
                    mode=rec["mode"],
                    seed=int(rec["seed"]),
                    phase=rec["phase"],
                    task_id=rec["task_id"],
                    episode=int(rec["episode"]),
                    episode_return=float(rec["episode_return"]),
                    steps=int(rec["steps"]),
                    posterior={k: (means[k], stds[k]) for k in means},
                )
            )
    return rows


def write_trace(rows: Iterable[tuple], path) -> None:
    """Posterior trace rows ``(task_id, episode, step, factor, coordinate, mean, std, distance)``."""
    _append_csv(
        Path(path),
        TRACE_COLUMNS,
        ((str(t), str(e), str(s), f, str(c), _fmt(m), _fmt(sd), _fmt(d)) for t, e, s, f, c, m, sd, d in rows),
    )


def bootstrap_ci(
    values,
    confidence: float = 0.95,
    n_resamples: int = BOOTSTRAP_RESAMPLES,
    seed: int = BOOTSTRAP_SEED,
) -> tuple[float, float, float]:
    """Mean and percentile bootstrap interval of the mean."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("bootstrap_ci needs at least one value")
    mean = float(values.mean())
    if values.size == 1 or np.all(values == values[0]):
        return mean, mean, mean
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = stats.bootstrap(
            (values,),
            np.mean,
            confidence_level=confidence,
            n_resamples=n_resamples,
            method="percentile",
            random_state=np.random.default_rng(seed),
        )
    return mean, float(res.confidence_interval.low), float(res.confidence_interval.high)


def summarize_rows(rows: Sequence[MetricsRow]) -> list[tuple]:
    """Per (mode, phase, episode): average over tasks within each seed, then bootstrap over seeds."""
    per_seed: dict[tuple, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        per_seed[(r.mode, r.phase, r.episode)][r.seed].append(r.episode_return)
    out = []
    for key in sorted(per_seed, key=lambda k: (k[0], PHASES.index(k[1]), k[2])):
        seeds = per_seed[key]
        vals = [float(np.mean(seeds[s])) for s in sorted(seeds)]
        mean, lo, hi = bootstrap_ci(vals)
        out.append(key + (len(vals), mean, lo, hi))
    return out


def summarize(metrics_paths: Sequence, out_path) -> list[tuple]:
    """Write ``summary.csv`` from one or more metrics files; rerunning gives the same file."""
    rows = []
    for p in metrics_paths:
        rows.extend(read_metrics(p))
    if not rows:
        raise ValueError("no metrics rows to summarize")
    table = summarize_rows(rows)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for mode, phase, ep, n, mean, lo, hi in table:
            w.writerow((mode, phase, ep, n, _fmt(mean), _fmt(lo), _fmt(hi)))
    return table
