"""Shared network building blocks.

Sequence tensors are ``(batch, time, channels)`` with a boolean ``mask`` of
shape ``(batch, time)`` (True = valid) unless noted otherwise.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


def sequence_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    if max_len is None:
        max_len = int(lengths.max())
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def sinusoid_encoding(length: int, channels: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, channels, 2, dtype=torch.float64) * (-math.log(10000.0) / channels))
    pe = torch.zeros(length, channels, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : channels // 2]
    return pe.to(dtype)


class FFTBlock(nn.Module):
    """Feed-forward Transformer block: self-attention then a conv feed-forward.

    Post-norm residual layout as in FastSpeech.
    """

    def __init__(self, hidden: int, heads: int, filter_size: int, kernel_size: int, dropout: float = 0.0):
        super().__init__()
        self.attn = nn.MultiheadAttention(hidden, heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(hidden)
        self.conv1 = nn.Conv1d(hidden, filter_size, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(filter_size, hidden, 1)
        self.norm2 = nn.LayerNorm(hidden)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask.unsqueeze(-1).to(x.dtype)
        y, _ = self.attn(x, x, x, key_padding_mask=~mask, need_weights=False)
        x = self.norm1(x + self.dropout(y)) * m
        y = self.conv1((x * m).transpose(1, 2))
        y = self.conv2(F.relu(y) * m.transpose(1, 2)).transpose(1, 2)
        return self.norm2(x + self.dropout(y)) * m


class FFTStack(nn.Module):
    """Sinusoidal positions followed by ``n_blocks`` FFT blocks."""

    def __init__(self, n_blocks: int, hidden: int, heads: int, filter_size: int, kernel_size: int,
                 dropout: float = 0.0):
        super().__init__()
        self.hidden = hidden
        self.blocks = nn.ModuleList(
            FFTBlock(hidden, heads, filter_size, kernel_size, dropout) for _ in range(n_blocks)
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + sinusoid_encoding(x.shape[1], self.hidden, x.dtype).to(x.device)
        x = x * mask.unsqueeze(-1).to(x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        return x


class ConvStack(nn.Module):
    """Plain 1-D conv + ReLU + LayerNorm layers with a residual path."""

    def __init__(self, n_layers: int, hidden: int, kernel_size: int, dropout: float = 0.0):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv1d(hidden, hidden, kernel_size, padding=kernel_size // 2) for _ in range(n_layers)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(hidden) for _ in range(n_layers))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask.unsqueeze(-1).to(x.dtype)
        for conv, norm in zip(self.convs, self.norms):
            y = conv((x * m).transpose(1, 2)).transpose(1, 2)
            x = norm(x + self.dropout(F.relu(y)))
        return x * m


class WaveNet(nn.Module):
    """Non-causal dilated conv stack with gated activations and skip sums.

    Operates on channel-first tensors ``(batch, channels, time)`` with a
    float mask of shape ``(batch, 1, time)``.
    """

    def __init__(self, hidden: int, kernel_size: int, n_layers: int, dilation_rate: int = 1):
        super().__init__()
        self.hidden = hidden
        self.in_layers = nn.ModuleList()
        self.res_skip = nn.ModuleList()
        for i in range(n_layers):
            dilation = dilation_rate ** i
            pad = (kernel_size * dilation - dilation) // 2
            self.in_layers.append(nn.Conv1d(hidden, 2 * hidden, kernel_size, dilation=dilation, padding=pad))
            out = 2 * hidden if i < n_layers - 1 else hidden
            self.res_skip.append(nn.Conv1d(hidden, out, 1))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        skip = torch.zeros_like(x)
        for i, (conv, rs) in enumerate(zip(self.in_layers, self.res_skip)):
            h = conv(x)
            acts = torch.tanh(h[:, : self.hidden]) * torch.sigmoid(h[:, self.hidden:])
            out = rs(acts)
            if i < len(self.in_layers) - 1:
                x = (x + out[:, : self.hidden]) * mask
                skip = skip + out[:, self.hidden:]
            else:
                skip = skip + out
        return skip * mask
