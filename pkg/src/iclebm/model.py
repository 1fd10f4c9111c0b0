"""Causal transformer that emits one scalar energy per sequence position.

``energies[b, n]`` is the energy of ``x[b, n]`` conditioned on ``x[b, :n]``.
Besides the plain causal pass, the model offers a two-stream pass for
confabulated points: a negative token placed at position ``n`` attends to the
cached keys/values of the real prefix ``x[:n]`` and to itself. This gives the
same result as splicing the negative into a copy of the real sequence and
running a full forward, but evaluates every (chain, position) pair at once.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    num_heads: int = 8
    d_model: int = 128
    d_ff: int | None = None
    input_dim: int = 2
    max_seq_len: int = 64
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in ("num_layers", "num_heads", "d_model", "d_ff", "input_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


class EnergyModel(nn.Module):
    """Interface shared by the transformer and analytic test energies.

    Subclasses must implement :meth:`forward_energies`. The remaining methods
    have generic (slow) defaults built on it.
    """

    input_dim: int = 2
    max_seq_len: int = 1 << 30

    @property
    def dtype(self) -> torch.dtype:
        for p in self.parameters():
            return p.dtype
        return torch.float64

    def as_tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(x, dtype=self.dtype)

    def forward_energies(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x):
        return self.forward_energies(x)

    def confab_energies(self, real: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
        """Energy of ``neg[b, c, n]`` placed after the real prefix ``real[b, :n]``.

        ``real`` is ``[B, L, D]``, ``neg`` is ``[B, C, L, D]``; returns ``[B, C, L]``.
        """
        B, C, L, D = neg.shape
        out = []
        for n in range(L):
            seq = real[:, None, : n + 1, :].expand(B, C, n + 1, D).clone()
            seq[:, :, n, :] = neg[:, :, n, :]
            out.append(self.forward_energies(seq.reshape(B * C, n + 1, D))[:, n].reshape(B, C))
        return torch.stack(out, dim=-1)

    def confab_energy_fn(self, real: torch.Tensor):
        """Return ``f(neg) -> [B, C, L]`` with the real prefix held fixed."""
        real = real.detach()
        return lambda neg: self.confab_energies(real, neg)

    def conditional_energy(self, context: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        """Energy of each of ``points`` ``[M, D]`` appended to ``context`` ``[N, D]``."""
        M, D = points.shape
        N = context.shape[0]
        seq = torch.cat([context[None].expand(M, N, D), points[:, None, :]], dim=1)
        return self.forward_energies(seq)[:, N]


class _Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.num_heads = cfg.num_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc_in = nn.Linear(d, cfg.d_ff)
        self.fc_out = nn.Linear(cfg.d_ff, d)

    def _mlp(self, h):
        return h + self.fc_out(F.gelu(self.fc_in(self.ln2(h))))

    def forward_real(self, h):
        """Causal self-attention over ``h`` ``[B, L, d]``; also returns per-head k, v."""
        B, L, d = h.shape
        H = self.num_heads
        q, k, v = self.qkv(self.ln1(h)).view(B, L, 3, H, d // H).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // H)
        future = torch.ones(L, L, dtype=torch.bool, device=h.device).triu(1)
        att = scores.masked_fill(future, float("-inf")).softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, L, d)
        return self._mlp(h + self.proj(out)), k, v

    def forward_neg(self, h, k_ctx, v_ctx, positions):
        """Negative tokens ``h`` ``[B, Q, d]``; token ``q`` sits at ``positions[q]``.

        Each token sees context keys at indices strictly below its position,
        plus its own key. ``k_ctx``/``v_ctx`` are ``[B or 1, H, Lc, hd]``.
        """
        B, Q, d = h.shape
        H = self.num_heads
        hd = d // H
        q, k, v = self.qkv(self.ln1(h)).view(B, Q, 3, H, hd).permute(2, 0, 3, 1, 4)
        scale = 1.0 / math.sqrt(hd)
        s_ctx = (q @ k_ctx.transpose(-1, -2)) * scale
        hidden = torch.arange(k_ctx.shape[2], device=h.device)[None, :] >= positions[:, None]
        s_ctx = s_ctx.masked_fill(hidden, float("-inf"))
        s_self = (q * k).sum(-1, keepdim=True) * scale
        att = torch.cat([s_ctx, s_self], dim=-1).softmax(dim=-1)
        out = att[..., :-1] @ v_ctx + att[..., -1:] * v
        out = out.transpose(1, 2).reshape(B, Q, d)
        return self._mlp(h + self.proj(out))


class EnergyTransformer(EnergyModel):
    """Pre-layernorm decoder-only transformer with a linear scalar energy head.

    Canonical parameter order (used by checkpoints) is ``named_parameters()``
    order: ``input_proj``, ``pos_emb``, ``blocks.{i}.{ln1,qkv,proj,ln2,fc_in,fc_out}``,
    ``ln_f``, ``head``.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.input_dim = config.input_dim
        self.max_seq_len = config.max_seq_len
        self.input_proj = nn.Linear(config.input_dim, config.d_model)
        self.pos_emb = nn.Parameter(torch.zeros(config.max_seq_len, config.d_model))
        self.blocks = nn.ModuleList(_Block(config) for _ in range(config.num_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, 1)
        self.to(config.torch_dtype)

    def _embed(self, x, positions):
        return self.input_proj(x) + self.pos_emb[positions]

    def _energy(self, h):
        return self.head(self.ln_f(h)).squeeze(-1)

    def _real_pass(self, x):
        L = x.shape[-2]
        h = self._embed(x, torch.arange(L, device=x.device))
        cache = []
        for block in self.blocks:
            h, k, v = block.forward_real(h)
            cache.append((k, v))
        return h, cache

    def _neg_pass(self, neg, cache, positions):
        """Energies of ``neg`` ``[B, C, P, D]`` placed at ``positions`` ``[P]`` -> ``[B, C, P]``."""
        B, C, P, D = neg.shape
        flat_pos = positions.repeat(C)
        h = self._embed(neg.reshape(B, C * P, D), flat_pos)
        for block, (k, v) in zip(self.blocks, cache):
            h = block.forward_neg(h, k, v, flat_pos)
        return self._energy(h).reshape(B, C, P)

    def forward_energies(self, x):
        h, _ = self._real_pass(x)
        return self._energy(h)

    def confab_energies(self, real, neg):
        _, cache = self._real_pass(real)
        return self._neg_pass(neg, cache, torch.arange(neg.shape[2], device=neg.device))

    def confab_energy_fn(self, real):
        with torch.no_grad():
            _, cache = self._real_pass(real.detach())
        positions = torch.arange(real.shape[1], device=real.device)
        return lambda neg: self._neg_pass(neg, cache, positions)

    def conditional_energy(self, context, points, chunk_size: int = 4096):
        N, D = context.shape
        with torch.no_grad():
            _, cache = self._real_pass(context[None])
        pos = torch.tensor([N], device=points.device)
        out = [
            self._neg_pass(points[i : i + chunk_size][None, :, None, :], cache, pos).reshape(-1)
            for i in range(0, points.shape[0], chunk_size)
        ]
        return torch.cat(out)


def init_params(config: ModelConfig, seed: int = 0) -> EnergyTransformer:
    """Build a transformer with truncated-normal(0, 0.02) weights."""
    model = EnergyTransformer(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if ".ln" in name or name.startswith("ln_f"):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _check_values(model: EnergyModel, values) -> torch.Tensor:
    x = model.as_tensor(values)
    if x.ndim != 3:
        raise ValueError(f"expected values of shape [batch, seq_len, dim], got {tuple(x.shape)}")
    if x.shape[2] != model.input_dim:
        raise ValueError(f"dim axis has size {x.shape[2]}, model expects input_dim={model.input_dim}")
    if not 1 <= x.shape[1] <= model.max_seq_len:
        raise ValueError(f"seq_len axis has size {x.shape[1]}, must be in [1, {model.max_seq_len}]")
    return x


def forward_energies(model: EnergyModel, values) -> torch.Tensor:
    """Per-position energies ``[batch, seq_len]`` for ``values`` ``[batch, seq_len, dim]``."""
    return model.forward_energies(_check_values(model, values))


def input_gradient(model: EnergyModel, values, position: int) -> torch.Tensor:
    """d energies[:, position] / d values[:, position], shape ``[batch, dim]``.

    ``position`` is 0-based. Parameters receive no gradient.
    """
    x = _check_values(model, values).detach().clone().requires_grad_(True)
    if not 0 <= position < x.shape[1]:
        raise IndexError(f"position {position} out of range for seq_len {x.shape[1]}")
    e = model.forward_energies(x)[:, position].sum()
    (g,) = torch.autograd.grad(e, x, allow_unused=True)
    if g is None:
        return torch.zeros(x.shape[0], x.shape[2], dtype=x.dtype)
    return g[:, position]


def parameter_gradient(model: EnergyModel, values, cotangent) -> dict[str, torch.Tensor]:
    """Gradient of ``sum(cotangent * energies)`` for every named parameter."""
    x = _check_values(model, values)
    ct = model.as_tensor(cotangent)
    if tuple(ct.shape) != tuple(x.shape[:2]):
        raise ValueError(f"cotangent shape {tuple(ct.shape)} does not match energies {tuple(x.shape[:2])}")
    names, params = zip(*model.named_parameters())
    out = (ct * model.forward_energies(x)).sum()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


# -- checkpoints --------------------------------------------------------------

MAGIC = b"ICLEBM"
FORMAT_VERSION = 1
_CONFIG_FIELDS = ("num_layers", "num_heads", "d_model", "d_ff", "input_dim", "max_seq_len")
_DTYPE_CODES = {"float64": 0, "float32": 1}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    """Bad magic bytes or unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    """Stored arrays disagree with the stored config."""


def save_checkpoint(model: EnergyTransformer, path) -> None:
    cfg = model.config
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(struct.pack("<7I", *(getattr(cfg, f) for f in _CONFIG_FIELDS), _DTYPE_CODES[cfg.dtype]))
    named = list(model.named_parameters())
    parts.append(struct.pack("<I", len(named)))
    np_dtype = "<f8" if cfg.dtype == "float64" else "<f4"
    for name, p in named:
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        parts.append(p.detach().cpu().numpy().astype(np_dtype).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path) -> EnergyTransformer:
    import numpy as np

    r = _Reader(Path(path).read_bytes())
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (magic {magic!r})")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {version}, expected {FORMAT_VERSION}")
    *cfg_vals, dtype_code = r.u32(7)
    dtype = {v: k for k, v in _DTYPE_CODES.items()}.get(dtype_code)
    if dtype is None:
        raise CheckpointVersionError(f"{path}: unknown dtype code {dtype_code}")
    try:
        config = ModelConfig(**dict(zip(_CONFIG_FIELDS, cfg_vals)), dtype=dtype)
    except ValueError as exc:
        raise CheckpointShapeError(f"{path}: invalid stored config: {exc}") from None
    model = EnergyTransformer(config)
    expected = dict(model.named_parameters())
    count = r.u32()
    if count != len(expected):
        raise CheckpointShapeError(f"{path}: {count} arrays stored, config implies {len(expected)}")
    np_dtype = np.dtype("<f8" if dtype == "float64" else "<f4")
    with torch.no_grad():
        for _ in range(count):
            name = r.take(r.u32()).decode()
            ndim = r.u32()
            shape = tuple(r.u32(ndim)) if ndim > 1 else ((r.u32(),) if ndim == 1 else ())
            if name not in expected:
                raise CheckpointShapeError(f"{path}: unexpected array {name!r}")
            if shape != tuple(expected[name].shape):
                raise CheckpointShapeError(
                    f"{path}: array {name!r} has shape {shape}, config implies {tuple(expected[name].shape)}"
                )
            data = np.frombuffer(r.take(np_dtype.itemsize * math.prod(shape)), dtype=np_dtype)
            expected[name].copy_(torch.from_numpy(data.reshape(shape).copy()))
    if r.pos != len(r.buf):
        raise CheckpointShapeError(f"{path}: {len(r.buf) - r.pos} trailing bytes after parameter arrays")
    return model


def config_dict(config: ModelConfig) -> dict:
    return {f.name: getattr(config, f.name) for f in fields(config)}
