"""Synthetic mixture-of-Gaussians tasks and in-context sequences.

A task is one isotropic Gaussian mixture; a training row is an i.i.d.
sequence drawn from a freshly sampled task.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class TaskPrior:
    num_components: int = 3
    dim: int = 2
    mean_box: tuple[float, float] = (-4.0, 4.0)
    cov_scale_range: tuple[float, float] = (0.3, 1.0)
    weights_mode: str = "uniform"

    def __post_init__(self):
        if self.num_components < 1:
            raise ValueError(f"num_components must be >= 1, got {self.num_components}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        lo, hi = self.mean_box
        if not lo < hi:
            raise ValueError(f"mean_box lower bound must be < upper bound, got {self.mean_box}")
        slo, shi = self.cov_scale_range
        if not 0 < slo <= shi:
            raise ValueError(f"cov_scale_range must be strictly positive and ordered, got {self.cov_scale_range}")
        if self.weights_mode != "uniform":
            raise ValueError(f"only uniform mixing weights are supported, got {self.weights_mode!r}")


@dataclass(frozen=True, eq=False)
class GaussianMixtureTask:
    """Isotropic mixture: component ``k`` is ``Normal(means[k], cov_scales[k]**2 I)``."""

    means: np.ndarray
    cov_scales: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        scales = np.atleast_1d(np.asarray(self.cov_scales, dtype=np.float64))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        k = means.shape[0]
        if scales.shape != (k,) or weights.shape != (k,):
            raise ValueError(
                f"inconsistent mixture shapes: means {means.shape}, cov_scales {scales.shape}, weights {weights.shape}"
            )
        if np.any(scales <= 0):
            raise ValueError("cov_scales must be positive")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must lie on the simplex, got {weights}")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "cov_scales", scales)
        object.__setattr__(self, "weights", weights)

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def __eq__(self, other):
        if not isinstance(other, GaussianMixtureTask):
            return NotImplemented
        return (
            np.array_equal(self.means, other.means)
            and np.array_equal(self.cov_scales, other.cov_scales)
            and np.array_equal(self.weights, other.weights)
        )


@dataclass(frozen=True, eq=False)
class SequenceBatch:
    values: np.ndarray
    task_ids: list = field(default_factory=list)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ValueError(f"values must be [batch, seq_len, dim], got shape {values.shape}")
        if values.shape[1] < 1:
            raise ValueError("seq_len must be >= 1")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
        task_ids = list(self.task_ids) if self.task_ids else list(range(values.shape[0]))
        if len(task_ids) != values.shape[0]:
            raise ValueError(f"got {len(task_ids)} task ids for {values.shape[0]} rows")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "task_ids", task_ids)

    @property
    def shape(self):
        return self.values.shape


def as_generator(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def child_generators(seed, n: int) -> list[np.random.Generator]:
    """``n`` independent generators derived from ``seed`` without mutating it."""
    if isinstance(seed, np.random.Generator):
        return seed.spawn(n)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [
        np.random.default_rng(np.random.SeedSequence(ss.entropy, spawn_key=(*ss.spawn_key, i)))
        for i in range(n)
    ]


def sample_task(prior: TaskPrior, seed=None) -> GaussianMixtureTask:
    rng = as_generator(seed)
    k, d = prior.num_components, prior.dim
    means = rng.uniform(prior.mean_box[0], prior.mean_box[1], size=(k, d))
    scales = rng.uniform(prior.cov_scale_range[0], prior.cov_scale_range[1], size=k)
    return GaussianMixtureTask(means, scales, np.full(k, 1.0 / k))


def sample_sequence(task: GaussianMixtureTask, seq_len: int, seed=None) -> np.ndarray:
    """Draw ``seq_len`` i.i.d. points from ``task``; returns ``[seq_len, dim]``."""
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    rng = as_generator(seed)
    comps = rng.choice(task.num_components, size=seq_len, p=task.weights)
    noise = rng.standard_normal((seq_len, task.dim))
    return task.means[comps] + task.cov_scales[comps, None] * noise


def make_batch(prior: TaskPrior, batch: int, seq_len: int, seed=None):
    """One fresh task per row. Returns ``(SequenceBatch, tasks)``.

    Row ``i`` uses the ``i``-th child generator of ``seed`` for both its task
    and its sequence.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    tasks, rows = [], []
    for rng in child_generators(seed, batch):
        task = sample_task(prior, rng)
        tasks.append(task)
        rows.append(sample_sequence(task, seq_len, rng))
    return SequenceBatch(np.stack(rows), list(range(batch))), tasks


def component_log_densities(task: GaussianMixtureTask, x) -> np.ndarray:
    """``log w_k + log Normal(x; mu_k, s_k^2 I)`` with a trailing component axis."""
    x = np.asarray(x, dtype=np.float64)
    d = task.dim
    sq = np.sum((x[..., None, :] - task.means) ** 2, axis=-1)
    s2 = task.cov_scales ** 2
    log_norm = -0.5 * d * math.log(2 * math.pi) - d * np.log(task.cov_scales)
    with np.errstate(divide="ignore"):
        log_w = np.log(task.weights)
    return log_w + log_norm - 0.5 * sq / s2


def true_log_density(task: GaussianMixtureTask, x) -> np.ndarray:
    """Exact mixture log density at ``x`` (shape ``[..., dim]``)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != task.dim:
        raise ValueError(f"point dimension {x.shape[-1]} does not match task dim {task.dim}")
    return logsumexp(component_log_densities(task, x), axis=-1)


# -- serialization -----------------------------------------------------------


def format_task(task: GaussianMixtureTask) -> str:
    fields = [str(task.num_components), str(task.dim)]
    fields += [repr(float(v)) for v in task.means.ravel()]
    fields += [repr(float(v)) for v in task.cov_scales]
    fields += [repr(float(v)) for v in task.weights]
    return " ".join(fields)


def parse_task(line: str) -> GaussianMixtureTask:
    parts = line.split()
    if len(parts) < 2:
        raise ValueError(f"task record too short: {line!r}")
    k, d = int(parts[0]), int(parts[1])
    expected = 2 + k * d + 2 * k
    if len(parts) != expected:
        raise ValueError(f"task record with K={k}, d={d} needs {expected} fields, got {len(parts)}")
    vals = np.array([float(p) for p in parts[2:]])
    return GaussianMixtureTask(vals[: k * d].reshape(k, d), vals[k * d : k * d + k], vals[k * d + k :])


def save_tasks(tasks, path) -> None:
    Path(path).write_text("".join(format_task(t) + "\n" for t in tasks))


def load_tasks(path) -> list[GaussianMixtureTask]:
    tasks = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            tasks.append(parse_task(line))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return tasks


def write_batch_csv(batch: SequenceBatch, path) -> None:
    dim = batch.values.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "seq_idx"] + [f"x{i}" for i in range(dim)])
        for tid, row in zip(batch.task_ids, batch.values):
            for n, point in enumerate(row):
                w.writerow([tid, n] + [repr(float(v)) for v in point])
