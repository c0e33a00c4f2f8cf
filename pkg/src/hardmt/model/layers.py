"""Transformer building blocks with stable parameter names.

Sub-layer modules are named ``self_attn``, ``cross_attn`` and ``feed_forward``
so freezing can be expressed by name.  All blocks are pre-norm.
"""

from __future__ import annotations

import math

import torch
from torch import nn


def sinusoid_table(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe.to(dtype)


def padding_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """True at padded positions."""
    return torch.arange(max_len, device=lengths.device)[None] >= lengths[:, None]


class Attention(nn.Module):
    """Pre-norm multi-head attention sub-layer (norm + projections)."""

    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.norm = nn.LayerNorm(d_model)
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)
        self.last_weights = None

    def _split(self, x):
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, x, memory=None, key_pad=None, causal=False, keep_weights=False):
        h = self.norm(x)
        kv = h if memory is None else memory
        q, k, v = self._split(self.q(h)), self._split(self.k(kv)), self._split(self.v(kv))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if key_pad is not None:
            scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        if causal:
            Lq, Lk = scores.shape[-2:]
            future = torch.ones(Lq, Lk, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        w = scores.softmax(-1)
        if keep_weights:
            self.last_weights = w
        out = (self.drop(w) @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.drop(self.o(out))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.w1 = nn.Linear(d_model, d_ff)
        self.w2 = nn.Linear(d_ff, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        # GELU keeps the network smooth, which finite-difference checks rely on
        return self.drop(self.w2(self.drop(nn.functional.gelu(self.w1(self.norm(x))))))


class EncoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, dropout):
        super().__init__()
        self.self_attn = Attention(d_model, n_heads, dropout)
        self.feed_forward = FeedForward(d_model, d_ff, dropout)

    def forward(self, x, pad, keep_weights=False):
        x = x + self.self_attn(x, key_pad=pad, keep_weights=keep_weights)
        return x + self.feed_forward(x)


class DecoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, dropout):
        super().__init__()
        self.self_attn = Attention(d_model, n_heads, dropout)
        self.cross_attn = Attention(d_model, n_heads, dropout)
        self.feed_forward = FeedForward(d_model, d_ff, dropout)

    def forward(self, y, y_pad, memory, mem_pad):
        y = y + self.self_attn(y, key_pad=y_pad, causal=True)
        y = y + self.cross_attn(y, memory=memory, key_pad=mem_pad)
        return y + self.feed_forward(y)


class Downsample(nn.Module):
    """Stride-2 depthwise convolution over time; output length ceil(T / 2)."""

    def __init__(self, d_model: int):
        super().__init__()
        self.conv = nn.Conv1d(d_model, d_model, kernel_size=3, stride=2, padding=1, groups=d_model)

    def forward(self, x, lengths):
        x = x.masked_fill(padding_mask(lengths, x.shape[1])[..., None], 0.0)
        y = self.conv(x.transpose(1, 2)).transpose(1, 2)
        return y, (lengths + 1) // 2
