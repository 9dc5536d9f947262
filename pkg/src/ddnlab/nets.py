"""Shared network building blocks and parameter plumbing.

All models are small hand-rolled transformer stacks so every parameter lives
in a flat, JSON-serializable layout: checkpoints store layer shapes and
row-major float32 arrays printed at 9 significant digits, which round-trips
binary32 exactly.
"""

from __future__ import annotations

import json
import math
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        # query: (B, Tq, D), memory: (B, Tk, D)
        b, tq, _ = query.shape
        tk = memory.shape[1]
        q = self.q_proj(query).view(b, tq, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(memory).view(b, tk, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(memory).view(b, tk, self.n_heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, self.dim)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int = 2):
        super().__init__()
        self.fc1 = nn.Linear(dim, expansion * dim)
        self.fc2 = nn.Linear(expansion * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention layer."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ff(self.norm2(x))


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention decoder block: query attends over memory."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_m = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        query = query + self.attn(self.norm_q(query), self.norm_m(memory))
        return query + self.ff(self.norm2(query))


# ---------------------------------------------------------------------------
# Checkpoints

def _format_value(v: float) -> float:
    return float(f"{v:.9g}")


def params_to_dict(module: nn.Module) -> dict:
    params = {}
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        params[name] = {
            "shape": list(arr.shape),
            "data": [_format_value(v) for v in arr.reshape(-1).tolist()],
        }
    return params


def params_from_dict(module: nn.Module, params: dict) -> None:
    state = module.state_dict()
    if set(state) != set(params):
        missing = sorted(set(state) ^ set(params))
        raise ValueError(f"checkpoint parameter names mismatch: {missing}")
    new_state = {}
    for name, entry in params.items():
        shape = tuple(entry["shape"])
        if tuple(state[name].shape) != shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{tuple(state[name].shape)} vs {shape}")
        arr = np.array(entry["data"], dtype=np.float32).reshape(shape)
        new_state[name] = torch.from_numpy(arr).to(state[name].dtype)
    module.load_state_dict(new_state)


def save_checkpoint(path: str, module: nn.Module, meta: dict,
                    extra_modules: dict[str, nn.Module] | None = None) -> None:
    payload = {"meta": meta, "params": params_to_dict(module)}
    if extra_modules:
        payload["extra"] = {name: params_to_dict(m)
                            for name, m in extra_modules.items()}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path: str, module: nn.Module,
                    extra_modules: dict[str, nn.Module] | None = None) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    params_from_dict(module, payload["params"])
    if extra_modules:
        for name, m in extra_modules.items():
            params_from_dict(m, payload["extra"][name])
    return payload["meta"]


# ---------------------------------------------------------------------------
# Gradient checking

def flat_params(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def max_grad_rel_err(module: nn.Module, loss_fn: Callable[[], torch.Tensor],
                     rng: np.random.Generator, n_coords: int = 30,
                     h: float = 1e-5) -> float:
    """Compare analytic gradients of loss_fn against central finite
    differences on a random subset of parameter coordinates.

    The module must already be in float64 and loss_fn must be deterministic.
    Near-zero coordinate pairs (|analytic| and |fd| both < 1e-8) are treated
    as agreeing.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    grads = torch.cat([p.grad.reshape(-1) for p in params]).clone()

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    coords = rng.choice(total, size=min(n_coords, total), replace=False)

    def locate(flat_idx: int):
        for p, size in zip(params, sizes):
            if flat_idx < size:
                return p, flat_idx
            flat_idx -= size
        raise IndexError(flat_idx)

    worst = 0.0
    with torch.no_grad():
        for flat_idx in sorted(int(c) for c in coords):
            p, local = locate(flat_idx)
            view = p.reshape(-1)
            orig = view[local].item()
            view[local] = orig + h
            up = loss_fn().item()
            view[local] = orig - h
            down = loss_fn().item()
            view[local] = orig
            fd = (up - down) / (2 * h)
            analytic = grads[flat_idx].item()
            denom = max(abs(analytic), abs(fd))
            if denom < 1e-8:
                continue
            worst = max(worst, abs(analytic - fd) / denom)
    return worst
