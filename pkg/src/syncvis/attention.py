"""Pre-norm attention and feed-forward blocks used by the decoder."""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                allowed: torch.Tensor | None = None) -> torch.Tensor:
        """query: B x Q x D, key/value: B x S x D, allowed: B x Q x S bool (True = attend)."""
        B, Q, D = query.shape
        S = key.shape[1]
        h, d = self.num_heads, self.head_dim
        q = self.q_proj(query).view(B, Q, h, d).transpose(1, 2)
        k = self.k_proj(key).view(B, S, h, d).transpose(1, 2)
        v = self.v_proj(value).view(B, S, h, d).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d)
        if allowed is not None:
            scores = scores.masked_fill(~allowed.unsqueeze(1), float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Q, D)
        return self.out_proj(out)


def drop_empty_rows(allowed: torch.Tensor) -> torch.Tensor:
    """Queries whose mask selects nothing attend everywhere instead."""
    empty = ~allowed.any(dim=-1, keepdim=True)
    return allowed | empty


class CrossAttentionBlock(nn.Module):
    """x + MHA(LN(x), memory + pos, memory)."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)

    def forward(self, x, memory, pos=None, allowed=None):
        key = memory if pos is None else memory + pos
        if allowed is not None:
            allowed = drop_empty_rows(allowed)
        return x + self.attn(self.norm(x), key, memory, allowed)


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)

    def forward(self, x):
        y = self.norm(x)
        return x + self.attn(y, y, y)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim if out is None else out)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class FFNBlock(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.mlp = MLP(dim, hidden)

    def forward(self, x):
        return x + self.mlp(self.norm(x))


def zero_output_projections(module: nn.Module) -> None:
    """Zero every block's output layer so each residual block is the identity."""
    for m in module.modules():
        if isinstance(m, MultiHeadAttention):
            nn.init.zeros_(m.out_proj.weight)
            nn.init.zeros_(m.out_proj.bias)
        elif isinstance(m, FFNBlock):
            nn.init.zeros_(m.mlp.fc2.weight)
            nn.init.zeros_(m.mlp.fc2.bias)
