"""Langevin sampling of confabulated points from an in-context energy.

Noise for chain ``(b, c, n)`` at step ``t`` is drawn from a counter-based
stream keyed by ``(seed, t, b, c, n)``, so results do not depend on how
chains are batched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from .rng import counter_normal, counter_uniform

_INIT_TAG = 1
_NOISE_TAG = 2


@dataclass(frozen=True)
class LangevinConfig:
    step_size: float = 3.16
    noise_scale: float = 0.01
    num_steps: int = 15
    init_box: tuple[float, float] = (-6.0, 6.0)
    clamp_box: tuple[float, float] = (-10.0, 10.0)
    grad_clip: float | None = None

    def __post_init__(self):
        if self.step_size < 0:
            raise ValueError(f"step_size must be >= 0, got {self.step_size}")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        (ilo, ihi), (clo, chi) = self.init_box, self.clamp_box
        if not (clo <= ilo < ihi <= chi):
            raise ValueError(f"init_box {self.init_box} must lie inside clamp_box {self.clamp_box}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")


class NonFiniteGradientError(FloatingPointError):
    """Raised when a Langevin step sees a non-finite energy gradient."""

    def __init__(self, message, index=None, step=None):
        super().__init__(message)
        self.index = index
        self.step = step


def sample_initial(config: LangevinConfig, shape, seed: int = 0, dtype=torch.float64) -> torch.Tensor:
    """I.i.d. uniform draws on ``init_box``; element ``i`` depends only on ``(seed, i)``."""
    lo, hi = config.init_box
    u = counter_uniform(seed, _INIT_TAG, tuple(shape))
    return torch.as_tensor(lo + (hi - lo) * u, dtype=dtype)


def langevin_step(x: torch.Tensor, grad: torch.Tensor, config: LangevinConfig, seed: int = 0, step: int = 0):
    """One update ``clamp(x - step_size * grad + noise)``.

    Noise for element ``i`` is keyed by ``(seed, step, i)``.
    """
    if x.shape != grad.shape:
        raise ValueError(f"x shape {tuple(x.shape)} != grad shape {tuple(grad.shape)}")
    bad = ~torch.isfinite(grad)
    if bad.any():
        idx = tuple(int(i) for i in bad.nonzero()[0])
        raise NonFiniteGradientError(f"non-finite energy gradient at index {idx}, step {step}", idx, step)
    if config.grad_clip is not None:
        norm = grad.norm(dim=-1, keepdim=True)
        grad = grad * torch.clamp(config.grad_clip / norm.clamp_min(1e-300), max=1.0)
    out = x - config.step_size * grad
    if config.noise_scale > 0:
        noise = counter_normal(seed, _NOISE_TAG, tuple(x.shape), prefix=(step,))
        out = out + config.noise_scale * torch.as_tensor(noise, dtype=x.dtype)
    return out.clamp(*config.clamp_box)


def _run_chains(energy_fn, x, config, seed, trajectory=False):
    states = [x] if trajectory else None
    for t in range(config.num_steps):
        x = x.detach().requires_grad_(True)
        (g,) = torch.autograd.grad(energy_fn(x).sum(), x)
        x = langevin_step(x.detach(), g, config, seed, t)
        if trajectory:
            states.append(x)
    return (x, torch.stack(states)) if trajectory else x


def sample_negatives(model, real, num_confab: int, config: LangevinConfig, seed: int = 0) -> torch.Tensor:
    """Confabulated points ``[B, num_confab, L, D]`` for a real batch ``[B, L, D]``.

    Chain ``(b, c, n)`` starts from a uniform draw and descends the energy of
    position ``n`` with ``real[b, :n]`` as fixed context. The result carries
    no autograd history.
    """
    if num_confab < 1:
        raise ValueError(f"num_confab must be >= 1, got {num_confab}")
    real = model.as_tensor(real).detach()
    B, L, D = real.shape
    x = sample_initial(config, (B, num_confab, L, D), seed, dtype=real.dtype)
    energy_fn = model.confab_energy_fn(real)
    try:
        x = _run_chains(energy_fn, x, config, seed)
    except NonFiniteGradientError as exc:
        b, c, n = exc.index[:3]
        raise NonFiniteGradientError(
            f"non-finite energy gradient in chain (b={b}, c={c}, n={n}) at step t={exc.step}", exc.index, exc.step
        ) from None
    return x.detach()


def sample_conditional(model, context, num_samples: int, config: LangevinConfig, seed: int = 0,
                       return_trajectory: bool = False):
    """Draw ``num_samples`` points from the energy conditioned on ``context`` ``[N, D]``.

    With ``return_trajectory`` also returns all states ``[T + 1, num_samples, D]``.
    """
    context = model.as_tensor(context).detach()
    if context.ndim != 2:
        raise ValueError(f"context must be [N, dim], got shape {tuple(context.shape)}")
    N, D = context.shape
    if N + 1 > model.max_seq_len:
        raise ValueError(f"context length {N} too long: N + 1 must be <= max_seq_len={model.max_seq_len}")
    x = sample_initial(config, (num_samples, D), seed, dtype=context.dtype)
    return _run_chains(lambda pts: model.conditional_energy(context, pts), x, config, seed, return_trajectory)


def write_samples_csv(path, samples, trajectory=None) -> None:
    """Final states as ``chain,x0,x1,...``; with a trajectory, ``chain,step,x0,...``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if trajectory is None:
            samples = np.asarray(samples)
            w.writerow(["chain"] + [f"x{i}" for i in range(samples.shape[1])])
            for c, row in enumerate(samples):
                w.writerow([c] + [repr(float(v)) for v in row])
        else:
            traj = np.asarray(trajectory)
            w.writerow(["chain", "step"] + [f"x{i}" for i in range(traj.shape[2])])
            for c in range(traj.shape[1]):
                for t in range(traj.shape[0]):
                    w.writerow([c, t] + [repr(float(v)) for v in traj[t, c]])
