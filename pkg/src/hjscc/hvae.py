"""Hierarchical VAE backbone.

A bottom-up path extracts a feature pyramid; a top-down path, seeded by a
trainable bias, autoregressively emits per-level prior parameters
(mu_hat_l, sigma_hat_l), posterior representations mu_l, and latent samples
z_l, coarse to fine. The same top-down machinery reconstructs the image from
any per-level latent sequence (posterior samples or received latents), so
transmitter and receiver share it.

Posterior: unit-width uniform around mu_l. Prior: Gaussian convolved with a
unit uniform, i.e. the probability mass of the unit bin centred on z under
N(mu_hat, sigma_hat^2).
"""

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import torch
import torch.nn as nn

from .config import ModelConfig
from .layers import ConvResBlock, Downsample, Upsample, build_blocks, conv3x3, round_half_away

SIGMA_FLOOR = 1e-6
P_FLOOR = 2.0 ** -64

POSTERIOR = "posterior"
PRIOR_ONLY = "prior-only"


@dataclass
class LatentLevel:
    """One hierarchy level: representation, prior parameters, sample."""

    mu: Optional[torch.Tensor]      # (B, C_l, H_l, W_l); None in prior-only mode
    prior_mean: torch.Tensor        # mu_hat, same shape
    prior_std: torch.Tensor         # sigma_hat, same shape, > 0
    z: torch.Tensor                 # latent injected into the state


@dataclass
class LatentStack:
    """Coarse-to-fine list of LatentLevel, plus the final top-down state."""

    levels: List[LatentLevel]
    final_state: Optional[torch.Tensor] = None

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


class RateBreakdown(NamedTuple):
    total: torch.Tensor               # (B,) nats
    per_level: List[torch.Tensor]     # each (B,)
    element_maps: List[torch.Tensor]  # each (B, C_l, H_l, W_l), -log p per element


def validate_image(x: torch.Tensor, coarsest_factor: int) -> None:
    """Check the (B, 3, H, W) image contract: range and divisibility."""
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) image, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % coarsest_factor or w % coarsest_factor:
        raise ValueError(
            f"image sides ({h}, {w}) must be divisible by the coarsest "
            f"downsampling factor {coarsest_factor}"
        )
    if x.min() < 0 or x.max() > 1:
        raise ValueError("image values must lie in [0, 1]")


def posterior_sample(mu: torch.Tensor, phase: str, rng=None) -> torch.Tensor:
    """Sample the unit-width uniform posterior around mu.

    train: mu + u, u ~ U(-1/2, 1/2) i.i.d.; eval: round to the nearest
    integer, ties away from zero.
    """
    if phase == "train":
        u = torch.rand(mu.shape, generator=rng, dtype=mu.dtype, device=mu.device)
        # torch.rand covers [0, 1); remap the (measure ~2^-24) exact zeros so
        # the noise support stays strictly inside (-1/2, 1/2).
        u = torch.where(u == 0, torch.full_like(u, 0.5), u)
        return mu + (u - 0.5)
    if phase == "eval":
        return round_half_away(mu)
    raise ValueError(f"phase must be 'train' or 'eval', got {phase!r}")


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    # erfc form keeps precision deep in the tails
    return 0.5 * torch.erfc(-x * (2 ** -0.5))


def prior_likelihood(z, mu_hat, sigma_hat) -> torch.Tensor:
    """Unit-bin mass of N(mu_hat, sigma_hat^2) centred on z, floored at P_FLOOR.

    p = Phi((z - mu_hat + 1/2) / sigma_hat) - Phi((z - mu_hat - 1/2) / sigma_hat).
    """
    z = torch.as_tensor(z)
    mu_hat = torch.as_tensor(mu_hat, dtype=z.dtype)
    sigma_hat = torch.as_tensor(sigma_hat, dtype=z.dtype)
    if (sigma_hat <= 0).any():
        raise ValueError("sigma_hat must be strictly positive")
    v = torch.abs(z - mu_hat)
    upper = _std_normal_cdf((0.5 - v) / sigma_hat)
    lower = _std_normal_cdf((-0.5 - v) / sigma_hat)
    return torch.clamp(upper - lower, min=P_FLOOR)


def neg_log_prior(z, mu_hat, sigma_hat) -> torch.Tensor:
    """Element-wise -log p(z | mu_hat, sigma_hat) in nats, bounded by the floor."""
    return -torch.log(prior_likelihood(z, mu_hat, sigma_hat))


def rate_nats(stack: LatentStack) -> RateBreakdown:
    """Per-level and total rate Sum_i -log p(z_i), plus the per-element maps
    that drive rate matching. Shapes keep the batch dimension."""
    maps = []
    per_level = []
    total = None
    for level in stack:
        m = neg_log_prior(level.z, level.prior_mean, level.prior_std)
        maps.append(m)
        r = m.sum(dim=(1, 2, 3))
        per_level.append(r)
        total = r if total is None else total + r
    return RateBreakdown(total=total, per_level=per_level, element_maps=maps)


class BottomUp(nn.Module):
    """Feature pyramid extractor: one output per hierarchy level, coarse-first."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        factors = cfg.downsample_factors
        self.coarsest = factors[0]
        n_stages = int(math.log2(factors[0]))
        factor_to_level = {f: i for i, f in enumerate(factors)}

        # Width at cumulative factor 2^s: the width of the level at that
        # resolution if one exists, else the width of the next coarser level.
        def width_at(stage):
            f = 2 ** stage
            if f in factor_to_level:
                return cfg.widths[factor_to_level[f]]
            coarser = [i for i, lf in enumerate(factors) if lf > f]
            return cfg.widths[coarser[-1]]

        self.stem = conv3x3(3, width_at(1))
        stages = []
        self.level_at_stage = []
        prev = width_at(1)
        for s in range(1, n_stages + 1):
            w = width_at(s)
            stages.append(
                nn.Sequential(
                    Downsample(prev, w) if s > 1 else nn.Identity(),
                    build_blocks(cfg.backbone_block, w, cfg.block_depth, cfg.window),
                )
            )
            self.level_at_stage.append(factor_to_level.get(2 ** s))
            prev = w
        # stage 1 downsamples via the stem conv's follow-up below
        self.first_down = Downsample(width_at(1), width_at(1))
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        validate_image(x, self.coarsest)
        h = self.first_down(self.stem(x))
        features = [None] * len(self.cfg.downsample_factors)
        for stage, level in zip(self.stages, self.level_at_stage):
            h = stage(h)
            if level is not None:
                features[level] = h
        return features


class TopDown(nn.Module):
    """Autoregressive latent generation and image synthesis, coarse to fine.

    At level l the prior head reads the running state h (a function of the
    already injected latents only), the posterior head additionally reads the
    bottom-up feature, and the chosen latent is embedded back into h before
    the state is upsampled to the next level.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        L = cfg.num_levels
        w = cfg.widths
        c = cfg.latent_channels
        self.bias = nn.Parameter(torch.zeros(1, w[0], cfg.bias_hw, cfg.bias_hw))
        self.refine = nn.ModuleList(
            build_blocks(cfg.backbone_block, w[l], cfg.block_depth, cfg.window) for l in range(L)
        )
        self.prior_head = nn.ModuleList(conv3x3(w[l], 2 * c[l]) for l in range(L))
        self.post_head = nn.ModuleList(
            nn.Sequential(conv3x3(w[l] * 2, w[l]), nn.SiLU(), conv3x3(w[l], c[l]))
            for l in range(L)
        )
        self.embed = nn.ModuleList(conv3x3(c[l], w[l]) for l in range(L))
        self.up = nn.ModuleList(Upsample(w[l], w[l + 1]) for l in range(L - 1))

        n_tail = int(math.log2(cfg.downsample_factors[-1]))
        tail = []
        for _ in range(n_tail):
            tail.append(Upsample(w[-1], w[-1]))
            tail.append(ConvResBlock(w[-1]))
        tail.append(conv3x3(w[-1], 3))
        self.image_head = nn.Sequential(*tail)

    def start_state(self, batch: int, coarse_hw, dtype=None, device=None) -> torch.Tensor:
        """Initial state: the trainable bias, resized to the coarsest grid."""
        bias = self.bias.to(dtype=dtype) if dtype is not None else self.bias
        h0, w0 = coarse_hw
        if (h0, w0) != tuple(self.bias.shape[-2:]):
            bias = nn.functional.interpolate(
                bias, size=(h0, w0), mode="bilinear", align_corners=False
            )
        return bias.expand(batch, -1, -1, -1)

    def level_prior(self, level: int, h: torch.Tensor):
        """(mu_hat, sigma_hat) from the refined state; sigma is softplus-floored."""
        params = self.prior_head[level](h)
        mu_hat, sigma_raw = params.chunk(2, dim=1)
        sigma_hat = nn.functional.softplus(sigma_raw) + SIGMA_FLOOR
        return mu_hat, sigma_hat

    def level_posterior(self, level: int, h: torch.Tensor, feature: torch.Tensor):
        if h.shape[-2:] != feature.shape[-2:]:
            raise ValueError(
                f"level {level}: state {tuple(h.shape)} and feature "
                f"{tuple(feature.shape)} are not spatially aligned"
            )
        return self.post_head[level](torch.cat([h, feature], dim=1))

    def inject(self, level: int, h: torch.Tensor, latent: torch.Tensor) -> torch.Tensor:
        """Embed the level's latent into the state and move to the next grid."""
        h = h + self.embed[level](latent)
        if level < self.cfg.num_levels - 1:
            h = self.up[level](h)
        return h

    def refine_state(self, level: int, h: torch.Tensor) -> torch.Tensor:
        return self.refine[level](h)

    def synthesize(self, h: torch.Tensor) -> torch.Tensor:
        """Image from the final state, clamped to [0, 1]."""
        return torch.clamp(torch.sigmoid(self.image_head(h)), 0.0, 1.0)

    def coarse_grid(self, image_hw) -> tuple:
        f = self.cfg.downsample_factors[0]
        return (image_hw[0] // f, image_hw[1] // f)


class HVAE(nn.Module):
    """Bottom-up + top-down pair exposing the backbone operations."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.bottom_up = BottomUp(cfg)
        self.top_down = TopDown(cfg)

    def top_down_generate(
        self,
        features: Optional[List[torch.Tensor]] = None,
        mode: str = POSTERIOR,
        phase: str = "train",
        rng=None,
        z_overrides: Optional[List[Optional[torch.Tensor]]] = None,
    ) -> LatentStack:
        """Run the top-down pass and return the full latent stack.

        posterior mode consumes bottom-up features; prior-only mode runs from
        the bias alone, injecting z_overrides where given and the rounded
        prior mean otherwise.
        """
        cfg = self.cfg
        if mode == POSTERIOR:
            if features is None:
                raise ValueError("posterior mode requires bottom-up features")
            batch = features[0].shape[0]
            coarse_hw = features[0].shape[-2:]
            ref = features[0]
        elif mode == PRIOR_ONLY:
            if z_overrides is None or z_overrides[0] is None:
                raise ValueError("prior-only mode needs z_overrides[0] to size the grid")
            batch = z_overrides[0].shape[0]
            coarse_hw = z_overrides[0].shape[-2:]
            ref = z_overrides[0]
        else:
            raise ValueError(f"unknown mode {mode!r}")

        h = self.top_down.start_state(batch, coarse_hw, dtype=ref.dtype, device=ref.device)
        levels = []
        for l in range(cfg.num_levels):
            h = self.top_down.refine_state(l, h)
            mu_hat, sigma_hat = self.top_down.level_prior(l, h)
            mu = None
            if mode == POSTERIOR:
                mu = self.top_down.level_posterior(l, h, features[l])
            if z_overrides is not None and z_overrides[l] is not None:
                z = z_overrides[l]
            elif mode == POSTERIOR:
                z = posterior_sample(mu, phase, rng=rng)
            else:
                z = round_half_away(mu_hat)
            levels.append(LatentLevel(mu=mu, prior_mean=mu_hat, prior_std=sigma_hat, z=z))
            h = self.top_down.inject(l, h, z)
        return LatentStack(levels, final_state=h)

    def decode_image(self, latents: List[torch.Tensor]) -> torch.Tensor:
        """Reconstruct from one latent array per level (posterior samples or
        received representations)."""
        cfg = self.cfg
        if len(latents) != cfg.num_levels:
            raise ValueError(f"expected {cfg.num_levels} latent arrays, got {len(latents)}")
        h0, w0 = latents[0].shape[-2:]
        for l, z in enumerate(latents):
            scale = cfg.downsample_factors[0] // cfg.downsample_factors[l]
            expect = (cfg.latent_channels[l], h0 * scale, w0 * scale)
            if tuple(z.shape[-3:]) != expect:
                raise ValueError(f"level {l} latent has shape {tuple(z.shape[-3:])}, expected {expect}")
        batch = latents[0].shape[0]
        h = self.top_down.start_state(
            batch, (h0, w0), dtype=latents[0].dtype, device=latents[0].device
        )
        for l in range(cfg.num_levels):
            h = self.top_down.refine_state(l, h)
            h = self.top_down.inject(l, h, latents[l])
        return self.top_down.synthesize(h)

    def forward(self, x: torch.Tensor, phase: str = "train", rng=None):
        """Compression-branch pass: stack plus reconstruction from z."""
        features = self.bottom_up(x)
        stack = self.top_down_generate(features, mode=POSTERIOR, phase=phase, rng=rng)
        x_hat = self.top_down.synthesize(stack.final_state)
        return stack, x_hat
