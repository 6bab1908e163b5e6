"""Shared building blocks: residual conv blocks and windowed self-attention."""

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv3x3(in_ch, out_ch, stride=1):
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest integer, ties away from zero (torch.round ties to even)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


class ConvResBlock(nn.Module):
    """Two 3x3 convs with a residual connection. SiLU keeps the block smooth,
    which matters for finite-difference gradient checks."""

    def __init__(self, dim):
        super().__init__()
        self.conv1 = conv3x3(dim, dim)
        self.conv2 = conv3x3(dim, dim)
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.conv2(self.act(self.conv1(self.act(x))))
        return x + h


class WindowAttention(nn.Module):
    """Multi-head self-attention within non-overlapping square windows."""

    def __init__(self, dim, window, num_heads):
        super().__init__()
        self.window = window
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        # x: (num_windows*B, tokens, dim)
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class WindowAttnBlock(nn.Module):
    """Pre-norm windowed attention + MLP, operating on (B, C, H, W) maps.

    Feature maps whose sides are not multiples of the window are zero-padded
    for the attention and cropped back afterwards.
    """

    def __init__(self, dim, window=4, num_heads=4, mlp_ratio=2.0):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def _partition(self, x):
        # (B, H, W, C) -> (B*nWin, win*win, C)
        b, h, w, c = x.shape
        win = self.window
        x = x.view(b, h // win, win, w // win, win, c)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, c)

    def _merge(self, wins, b, h, w):
        win = self.window
        c = wins.shape[-1]
        x = wins.view(b, h // win, w // win, win, win, c)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)

    def forward(self, x):
        b, c, h, w = x.shape
        win = self.window
        pad_h = (-h) % win
        pad_w = (-w) % win
        y = x.permute(0, 2, 3, 1)  # (B, H, W, C)
        if pad_h or pad_w:
            y = F.pad(y, (0, 0, 0, pad_w, 0, pad_h))
        hp, wp = y.shape[1], y.shape[2]

        wins = self._partition(self.norm1(y))
        y = y + self._merge(self.attn(wins), b, hp, wp)
        y = y + self.mlp(self.norm2(y))

        if pad_h or pad_w:
            y = y[:, :h, :w, :]
        return y.permute(0, 3, 1, 2)


def build_blocks(kind, dim, depth, window=4):
    """Stack of `depth` feature blocks of the requested kind."""
    if kind == "conv":
        blocks = [ConvResBlock(dim) for _ in range(depth)]
    elif kind == "window_attn":
        heads = max(1, dim // 8)
        blocks = [WindowAttnBlock(dim, window=window, num_heads=heads) for _ in range(depth)]
    else:
        raise ValueError(f"unknown block kind: {kind!r}")
    return nn.Sequential(*blocks)


class Downsample(nn.Module):
    """Stride-2 conv downsampling with a channel change."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    """Nearest-neighbour 2x upsampling followed by a 3x3 conv."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = conv3x3(in_ch, out_ch)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
