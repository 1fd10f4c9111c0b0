"""Energy landscapes on 2-D grids and their agreement with the true task density."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.special import logsumexp
from scipy.stats import rankdata

from .datagen import GaussianMixtureTask, true_log_density
from .sampler import LangevinConfig, sample_initial


@dataclass(frozen=True)
class GridSpec:
    """Cell-centred rectangular grid; point ``(i, j)`` is the centre of cell ``(i, j)``."""

    x_bounds: tuple[float, float] = (-6.0, 6.0)
    y_bounds: tuple[float, float] = (-6.0, 6.0)
    resolution: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if min(self.resolution) < 2:
            raise ValueError(f"resolution must be >= 2 per axis, got {self.resolution}")
        for b in (self.x_bounds, self.y_bounds):
            if not b[0] < b[1]:
                raise ValueError(f"bounds must be increasing, got {b}")

    @property
    def cell_area(self) -> float:
        (x0, x1), (y0, y1) = self.x_bounds, self.y_bounds
        nx, ny = self.resolution
        return (x1 - x0) / nx * (y1 - y0) / ny

    def axes(self):
        nx, ny = self.resolution
        (x0, x1), (y0, y1) = self.x_bounds, self.y_bounds
        xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
        ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
        return xs, ys

    def points(self) -> np.ndarray:
        """Grid points ``[nx, ny, 2]``."""
        xs, ys = self.axes()
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)


@dataclass(frozen=True, eq=False)
class EnergyGrid:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != tuple(self.spec.resolution):
            raise ValueError(f"values shape {values.shape} != resolution {self.spec.resolution}")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def x_bounds(self):
        return self.spec.x_bounds

    @property
    def y_bounds(self):
        return self.spec.y_bounds

    @property
    def resolution(self):
        return self.spec.resolution


@dataclass
class SharpeningReport:
    context_lengths: list[int]
    spearman_rho: list[float]
    task_id: int | str = 0

    def __post_init__(self):
        if len(self.context_lengths) != len(self.spearman_rho):
            raise ValueError("context_lengths and spearman_rho must have equal length")


class UndefinedCorrelationError(ValueError):
    """Rank correlation is undefined because one input has constant ranks."""


def energy_landscape(model, context, grid_spec: GridSpec = GridSpec()) -> EnergyGrid:
    """Energy of every grid point placed right after ``context`` ``[N, 2]``."""
    context = model.as_tensor(context).reshape(-1, model.input_dim)
    if context.shape[0] + 1 > model.max_seq_len:
        raise ValueError(
            f"context length {context.shape[0]} too long: N + 1 must be <= max_seq_len={model.max_seq_len}"
        )
    pts = grid_spec.points()
    with torch.no_grad():
        e = model.conditional_energy(context, model.as_tensor(pts.reshape(-1, 2)))
    return EnergyGrid(grid_spec, e.double().numpy().reshape(pts.shape[:2]))


def grid_log_partition(grid: EnergyGrid) -> float:
    """Midpoint-rule estimate of ``log integral exp(-E)`` over the grid box."""
    return float(logsumexp(-grid.values) + math.log(grid.spec.cell_area))


def grid_log_density(grid: EnergyGrid) -> np.ndarray:
    return -grid.values - grid_log_partition(grid)


def spearman_rho(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 3:
        raise ValueError(f"need at least 3 points, got {a.size}")
    ra = rankdata(a) - (a.size + 1) / 2
    rb = rankdata(b) - (b.size + 1) / 2
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0:
        raise UndefinedCorrelationError("rank variance is zero; correlation undefined")
    return float(np.clip((ra @ rb) / denom, -1.0, 1.0))


def landscape_agreement(model, task: GaussianMixtureTask, context, grid_spec: GridSpec = GridSpec()) -> float:
    """Rank agreement between the learned energy and ``-log p_task`` on the grid."""
    grid = energy_landscape(model, context, grid_spec)
    return spearman_rho(grid.values, -true_log_density(task, grid_spec.points()))


def sharpening_curve(model, task, full_context, lengths, grid_spec: GridSpec = GridSpec(), task_id=0):
    lengths = [int(n) for n in lengths]
    if lengths != sorted(lengths):
        raise ValueError(f"lengths must be ascending, got {lengths}")
    full_context = np.asarray(full_context)
    if lengths and lengths[-1] > full_context.shape[0]:
        raise ValueError(f"length {lengths[-1]} exceeds available context {full_context.shape[0]}")
    rhos = [landscape_agreement(model, task, full_context[:n], grid_spec) for n in lengths]
    return SharpeningReport(lengths, rhos, task_id)


def sample_quality_stats(model_samples, task, num_reference: int = 1000, seed: int = 0,
                         init: LangevinConfig = LangevinConfig()):
    """Mean log-density gain of samples over init draws, with its standard error."""
    samples = np.asarray(model_samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ValueError(f"model_samples must be [M >= 1, dim], got {samples.shape}")
    ref = sample_initial(init, (num_reference, task.dim), seed).numpy()
    ls, lr = true_log_density(task, samples), true_log_density(task, ref)
    gain = ls.mean() - lr.mean()
    var = (ls.var(ddof=1) / ls.size if ls.size > 1 else 0.0) + (lr.var(ddof=1) / lr.size if lr.size > 1 else 0.0)
    return float(gain), math.sqrt(var)


def sample_quality(model_samples, task, num_reference: int = 1000, seed: int = 0,
                   init: LangevinConfig = LangevinConfig()) -> float:
    return sample_quality_stats(model_samples, task, num_reference, seed, init)[0]


# -- exports -----------------------------------------------------------------


def write_grid_csv(grid: EnergyGrid, path) -> None:
    pts = grid.spec.points()
    nx, ny = grid.resolution
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "energy"])
        for i in range(nx):
            for j in range(ny):
                w.writerow([repr(float(pts[i, j, 0])), repr(float(pts[i, j, 1])), repr(float(grid.values[i, j]))])


def write_grid_pgm(grid: EnergyGrid, path) -> None:
    """8-bit binary PGM, min-max normalised; image rows run from high y to low y."""
    v = grid.values
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    img = np.round(255 * scaled).astype(np.uint8).T[::-1]
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "context_length", "spearman_rho"])
        for rep in reports:
            for n, rho in zip(rep.context_lengths, rep.spearman_rho):
                w.writerow([rep.task_id, n, repr(float(rho))])
