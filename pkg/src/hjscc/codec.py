"""Per-level JSCC encoder/decoder.

The encoder turns a level's representation (plus its prior parameters and the
running top-down state) into an equal-shaped symbol feature r_l, modulated by
the per-position length maps so the encoding adapts to the allocated
bandwidth. The decoder inverts received symbols back to a representation the
top-down path can consume, reading only the unmasked prefix of each position.
"""

from typing import Optional

import torch
import torch.nn as nn

from .config import ModelConfig
from .layers import build_blocks, conv3x3


def prefix_mask(lengths: torch.Tensor, channels: int, dtype=None) -> torch.Tensor:
    """Per-position prefix mask: mask[b, c, i, j] = 1 iff c < lengths[b, i, j].

    lengths: integer tensor (B, H, W) with values in [0, channels].
    """
    if lengths.dim() != 3:
        raise ValueError(f"lengths must be (B, H, W), got shape {tuple(lengths.shape)}")
    if lengths.min() < 0 or lengths.max() > channels:
        raise ValueError(
            f"lengths must lie in [0, {channels}], got range "
            f"[{int(lengths.min())}, {int(lengths.max())}]"
        )
    idx = torch.arange(channels, device=lengths.device).view(1, channels, 1, 1)
    mask = idx < lengths.unsqueeze(1)
    return mask.to(dtype or torch.float32)


class RateAttention(nn.Module):
    """Feature-wise affine modulation driven by the length maps.

    The real and merged per-position lengths, normalized by the level's
    channel count, predict a per-position scale and shift. The output
    projection starts at zero, so the module is an exact identity until
    training moves it.
    """

    def __init__(self, dim: int, max_length: int):
        super().__init__()
        self.max_length = max_length
        hidden = max(dim // 2, 8)
        self.net = nn.Sequential(
            conv3x3(2, hidden),
            nn.SiLU(),
            conv3x3(hidden, 2 * dim),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, feats, real_lengths, merged_lengths):
        if real_lengths.shape != merged_lengths.shape:
            raise ValueError("length maps must share a shape")
        if real_lengths.shape[-2:] != feats.shape[-2:]:
            raise ValueError(
                f"length maps {tuple(real_lengths.shape)} not aligned with "
                f"features {tuple(feats.shape)}"
            )
        maps = torch.stack([real_lengths, merged_lengths], dim=1)
        maps = maps.to(feats.dtype) / self.max_length
        scale, shift = self.net(maps).chunk(2, dim=1)
        return feats * (1 + scale) + shift


class LayerEncoder(nn.Module):
    """mu_l plus prior parameters to the pre-mask symbol feature r_l."""

    def __init__(self, cfg: ModelConfig, level: int):
        super().__init__()
        c = cfg.latent_channels[level]
        w = cfg.widths[level]
        self.channels = c
        self.conv_in = conv3x3(3 * c, w)
        self.ctx_proj = conv3x3(w, w)
        self.blocks = build_blocks(cfg.codec_block, w, cfg.block_depth, cfg.window)
        self.rate_attn = RateAttention(w, c) if cfg.rate_attention else None
        self.conv_out = conv3x3(w, c)

    def forward(
        self,
        mu: torch.Tensor,
        prior_info: torch.Tensor,
        real_lengths: torch.Tensor,
        merged_lengths: torch.Tensor,
        context: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        if mu.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {mu.shape[1]}")
        if prior_info.shape[1] != 2 * self.channels or prior_info.shape[-2:] != mu.shape[-2:]:
            raise ValueError(
                f"prior_info shape {tuple(prior_info.shape)} not aligned with "
                f"mu {tuple(mu.shape)}"
            )
        h = self.conv_in(torch.cat([mu, prior_info], dim=1))
        if context is not None:
            if context.shape[-2:] != mu.shape[-2:]:
                raise ValueError("context not spatially aligned with mu")
            h = h + self.ctx_proj(context)
        h = self.blocks(h)
        if self.rate_attn is not None:
            h = self.rate_attn(h, real_lengths, merged_lengths)
        return self.conv_out(h)


class LayerDecoder(nn.Module):
    """Received symbols back to a representation estimate mu_tilde_l.

    Positions beyond each per-position length are zeroed before any network
    sees them; whatever the channel slot held there never influences the
    output. The normalized length map rides along as an input channel so the
    decoder knows how much of each vector is real.
    """

    def __init__(self, cfg: ModelConfig, level: int):
        super().__init__()
        c = cfg.latent_channels[level]
        w = cfg.widths[level]
        self.channels = c
        self.conv_in = conv3x3(c + 1, w)
        self.ctx_proj = conv3x3(w, w)
        self.blocks = build_blocks(cfg.codec_block, w, cfg.block_depth, cfg.window)
        self.conv_out = conv3x3(w, c)

    def forward(
        self,
        s_tilde: torch.Tensor,
        lengths: torch.Tensor,
        context: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        if s_tilde.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {s_tilde.shape[1]}")
        if lengths.shape != (s_tilde.shape[0],) + s_tilde.shape[-2:]:
            raise ValueError(
                f"lengths shape {tuple(lengths.shape)} not aligned with symbols "
                f"{tuple(s_tilde.shape)}"
            )
        mask = prefix_mask(lengths, self.channels, dtype=s_tilde.dtype)
        s = s_tilde * mask
        lmap = lengths.to(s.dtype).unsqueeze(1) / self.channels
        h = self.conv_in(torch.cat([s, lmap], dim=1))
        if context is not None:
            if context.shape[-2:] != s.shape[-2:]:
                raise ValueError("context not spatially aligned with symbols")
            h = h + self.ctx_proj(context)
        h = self.blocks(h)
        return self.conv_out(h)
