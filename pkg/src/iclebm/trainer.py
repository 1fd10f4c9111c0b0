"""Contrastive-divergence training of the in-context energy model."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datagen import SequenceBatch, TaskPrior, make_batch
from .model import EnergyModel, ModelConfig, init_params, save_checkpoint
from .rng import derive_seed
from .sampler import LangevinConfig, NonFiniteGradientError, sample_negatives

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "loss", "mean_real_energy", "mean_confab_energy", "energy_gap", "grad_norm", "wall_ms")
MAX_CONSECUTIVE_FAILURES = 10


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    seq_len: int = 32
    num_steps: int = 20_000
    num_confab: int = 1
    learning_rate: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    grad_clip_norm: float = 1.0
    energy_reg: float = 0.1
    seed: int = 0
    langevin: LangevinConfig = field(default_factory=LangevinConfig)
    checkpoint_every: int = 500
    log_every: int = 1

    def __post_init__(self):
        for name in ("batch_size", "seq_len", "num_confab", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_steps < 0:
            raise ValueError(f"num_steps must be >= 0, got {self.num_steps}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.grad_clip_norm <= 0:
            raise ValueError(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")
        if self.energy_reg < 0:
            raise ValueError(f"energy_reg must be >= 0, got {self.energy_reg}")


@dataclass
class TrainMetrics:
    step: int
    loss: float
    mean_real_energy: float
    mean_confab_energy: float
    energy_gap: float
    grad_norm: float
    wall_ms: float

    def row(self) -> list:
        return [self.step] + [repr(float(getattr(self, f))) for f in METRIC_FIELDS[1:]]


class StepFailed(FloatingPointError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"step {step}: {reason}")
        self.step = step


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Path):
        super().__init__(message)
        self.checkpoint = checkpoint


def cd_loss(real_energies, confab_energies, energy_reg: float = 0.0) -> torch.Tensor:
    """``mean(E+ - E-) + energy_reg * (mean(E+^2) + mean(E-^2))``.

    ``real_energies`` is ``[B, L]``, ``confab_energies`` is ``[B, C, L]``; the
    difference is averaged over every (batch, chain, position) triple.
    """
    real = torch.as_tensor(real_energies, dtype=torch.float64) if not torch.is_tensor(real_energies) else real_energies
    confab = (
        torch.as_tensor(confab_energies, dtype=real.dtype) if not torch.is_tensor(confab_energies) else confab_energies
    )
    if not (torch.isfinite(real).all() and torch.isfinite(confab).all()):
        raise ValueError("cd_loss received non-finite energies")
    real_b = real.unsqueeze(-2) if confab.ndim == real.ndim + 1 else real
    loss = (real_b - confab).mean()
    if energy_reg:
        loss = loss + energy_reg * ((real ** 2).mean() + (confab ** 2).mean())
    return loss


class Trainer:
    """Owns the model, its Adam state and the step counter."""

    def __init__(self, model: EnergyModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.step = 0
        self.optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.adam_betas)

    def compute_loss(self, real: torch.Tensor, negatives: torch.Tensor):
        real_e = self.model.forward_energies(real)
        confab_e = self.model.confab_energies(real, negatives)
        return cd_loss(real_e, confab_e, self.config.energy_reg), real_e, confab_e

    def negatives(self, real: torch.Tensor, seed: int) -> torch.Tensor:
        return sample_negatives(self.model, real, self.config.num_confab, self.config.langevin, seed)

    def training_step(self, batch, seed: int | None = None) -> TrainMetrics:
        """Run one CD update on ``batch`` and advance the step counter.

        On a non-finite loss or gradient, raises :class:`StepFailed` and
        leaves the parameters untouched.
        """
        t0 = time.perf_counter()
        values = batch.values if isinstance(batch, SequenceBatch) else batch
        real = self.model.as_tensor(values)
        if seed is None:
            seed = derive_seed(self.config.seed, 2, self.step)
        step = self.step
        self.step += 1
        try:
            neg = self.negatives(real, seed)
            loss, real_e, confab_e = self.compute_loss(real, neg)
        except (NonFiniteGradientError, ValueError) as exc:
            raise StepFailed(step, str(exc)) from None

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        params = [p for p in self.model.parameters() if p.grad is not None]
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, self.config.grad_clip_norm))
        if not math.isfinite(grad_norm):
            self.optimizer.zero_grad(set_to_none=True)
            raise StepFailed(step, f"non-finite gradient norm {grad_norm}")
        self.optimizer.step()

        mean_real = float(real_e.detach().mean())
        mean_confab = float(confab_e.detach().mean())
        return TrainMetrics(
            step=step,
            loss=float(loss.detach()),
            mean_real_energy=mean_real,
            mean_confab_energy=mean_confab,
            energy_gap=mean_real - mean_confab,
            grad_norm=grad_norm,
            wall_ms=1000.0 * (time.perf_counter() - t0),
        )


def batch_seed(seed: int, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 1, step])


def train(prior: TaskPrior, model_config: ModelConfig, config: TrainConfig, out_dir, model=None,
          progress=None) -> Path:
    """Train on fresh tasks every step; returns the final checkpoint path.

    Writes ``metrics.csv`` and ``checkpoints/step_XXXXXXX.ckpt`` under ``out_dir``.
    """
    if prior.dim != model_config.input_dim:
        raise ValueError(f"prior.dim={prior.dim} does not match model.input_dim={model_config.input_dim}")
    if config.seq_len > model_config.max_seq_len:
        raise ValueError(f"train.seq_len={config.seq_len} exceeds model.max_seq_len={model_config.max_seq_len}")
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = init_params(model_config, derive_seed(config.seed, 0))
    trainer = Trainer(model, config)

    def checkpoint(step):
        path = ckpt_dir / f"step_{step:07d}.ckpt"
        save_checkpoint(model, path)
        return path

    last = checkpoint(0)
    failures = 0
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for step in range(config.num_steps):
            batch, _ = make_batch(prior, config.batch_size, config.seq_len, batch_seed(config.seed, step))
            try:
                metrics = trainer.training_step(batch, derive_seed(config.seed, 2, step))
            except StepFailed as exc:
                failures += 1
                log.warning("%s", exc)
                if failures >= MAX_CONSECUTIVE_FAILURES:
                    fh.flush()
                    last = checkpoint(step)
                    raise TrainingAborted(
                        f"aborted after {failures} consecutive failed steps (last: {exc})", last
                    ) from None
                continue
            failures = 0
            if step % config.log_every == 0 or step == config.num_steps - 1:
                writer.writerow(metrics.row())
                fh.flush()
            if progress is not None:
                progress(metrics)
            if (step + 1) % config.checkpoint_every == 0 or step == config.num_steps - 1:
                last = checkpoint(step + 1)
    return last


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
