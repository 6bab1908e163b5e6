"""End-to-end transmission passes and loss assembly.

Two variants share the backbone and codecs. The feedback-free pass encodes
every level against the transmitter's own latent state and decodes against a
parallel receiver state; the feedback pass runs the levels as sequential
phases, feeding each phase's received symbols back so the next phase is
generated conditioned on what the receiver actually holds.

Distortion terms are mean squared error on the 0..255 intensity scale, which
puts the default loss weights and the symbol-length scale on compatible
footing. PSNR stays on the [0,1] convention.
"""

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import torch
import torch.nn.functional as F

from . import channel as chan
from . import rate_match as rm
from .codec import LayerDecoder, LayerEncoder, prefix_mask
from .config import ModelConfig, RateConfig
from .hvae import HVAE, neg_log_prior, posterior_sample

MSE_SCALE = 255.0 ** 2
PSNR_CAP_DB = 100.0


class PlanTensors(NamedTuple):
    """Torch mirror of one level's rate plan, batched."""

    real: torch.Tensor       # (B, H, W) float64, alpha * per-position entropy
    merged: torch.Tensor     # (B, H, W) float64, patch means
    quantized: torch.Tensor  # (B, H, W) int64, ceiling-quantized lengths
    masks: torch.Tensor      # (B, C, H, W), prefix masks in the feature dtype


def plan_tensors(neg_log_p: torch.Tensor, alpha: float, option_set: torch.Tensor,
                 patch, out_dtype=torch.float32) -> PlanTensors:
    """Length maps, quantized lengths, and masks from a batched entropy map.

    Computed in float64 so the quantization boundaries agree exactly with the
    reference numpy implementation on identical inputs. No gradient flows
    through the plan.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    nlp = neg_log_p.detach().to(torch.float64)
    b, _, h, w = nlp.shape
    real = alpha * nlp.sum(dim=1)

    ph, pw = patch
    pooled = F.avg_pool2d(real.unsqueeze(1), kernel_size=(ph, pw), stride=(ph, pw),
                          ceil_mode=True, count_include_pad=False)
    q_idx = torch.searchsorted(option_set, pooled.reshape(-1).contiguous())
    q_idx = torch.clamp(q_idx, max=option_set.numel() - 1)
    q_pooled = option_set[q_idx].reshape(pooled.shape)

    def expand(t):
        t = t.repeat_interleave(ph, dim=-2).repeat_interleave(pw, dim=-1)
        return t[..., :h, :w]

    merged = expand(pooled).squeeze(1)
    quantized = expand(q_pooled).squeeze(1).to(torch.int64)
    channels = neg_log_p.shape[1]
    masks = prefix_mask(quantized, channels, dtype=out_dtype)
    return PlanTensors(real=real, merged=merged, quantized=quantized, masks=masks)


def normalize_per_image(r: torch.Tensor, mask: torch.Tensor, power: float) -> torch.Tensor:
    """Batched per-image power normalization over the unmasked reals.

    Each image's unmasked entries are scaled to mean square `power`; images
    with nothing unmasked (or all-zero symbols) pass through. Agrees with the
    single-image channel op on every batch element.
    """
    m = mask.to(r.dtype)
    masked = r * m
    energy = (masked * masked).sum(dim=(1, 2, 3))
    n = m.sum(dim=(1, 2, 3))
    ok = (n > 0) & (energy > 0)
    safe = torch.where(energy > 0, energy, torch.ones_like(energy))
    scale = torch.where(ok, torch.sqrt(power * n / safe), torch.ones_like(energy))
    return masked * scale.view(-1, 1, 1, 1)


def mse_255(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-image MSE on the 0..255 scale for (..., 3, H, W) inputs."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return ((x - y) ** 2).mean(dim=(-3, -2, -1)) * MSE_SCALE


def psnr(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """10*log10(1/MSE) for [0,1] images, capped at 100 dB when MSE is zero.

    Reduces over the trailing (3, H, W) dims; batched input gives one value
    per image.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = ((x - y) ** 2).mean(dim=(-3, -2, -1))
    cap = torch.full_like(mse, PSNR_CAP_DB)
    return torch.where(mse > 0, -10.0 * torch.log10(torch.clamp(mse, min=1e-30)), cap)


def loss_no_feedback(rate_nats, d_compress, d_transmit, lam: float, alpha: float):
    """total = alpha * rate + lam * (d_compress + d_transmit)."""
    for name, v in (("rate_nats", rate_nats), ("d_compress", d_compress),
                    ("d_transmit", d_transmit)):
        if float(torch.as_tensor(v).detach().min()) < 0:
            raise ValueError(f"{name} must be non-negative")
    if lam < 0 or alpha < 0:
        raise ValueError("lam and alpha must be non-negative")
    return alpha * rate_nats + lam * (d_compress + d_transmit)


def loss_feedback(rate_nats_substitution, d_transmit, lam: float, beta: float = 1.0):
    """total = rate + lam * d_transmit.

    The prior scale beta only shifts the rate by an additive constant
    (-log beta per level), so it is dropped from the optimized total and
    applied only where rates are reported.
    """
    return rate_nats_substitution + lam * d_transmit


@dataclass
class LossBreakdown:
    """The optimized objective and its pieces, batch-mean tensors in-graph."""

    rate_term: torch.Tensor
    d_compress: torch.Tensor
    d_transmit: torch.Tensor
    total: torch.Tensor
    lam: float
    alpha: float
    beta: float = 1.0


@dataclass
class SymbolFrame:
    """One level's channel-facing arrays, kept only on request."""

    r: torch.Tensor
    s: torch.Tensor
    s_tilde: torch.Tensor
    mask: torch.Tensor
    lengths: torch.Tensor


@dataclass
class TransmissionReport:
    """Per-image transmission accounting (detached).

    Bandwidth is counted in complex symbols: unmasked reals / 2 payload plus
    the side-information symbols needed to carry the quantized length indices.
    CBR fields divide by this tensor's own 3*H*W; callers holding a padded
    image recompute against the original extent from the raw counts.
    """

    snr_db: object
    alpha: float
    lam: float
    feedback: bool
    beta: float
    psnr_db: torch.Tensor          # (B,)
    rate_nats: torch.Tensor        # (B,) reported rate (beta applied)
    d_compress: torch.Tensor       # (B,) 0..255-scale MSE
    d_transmit: torch.Tensor       # (B,)
    loss_total: torch.Tensor       # (B,)
    payload_complex: torch.Tensor  # (B,)
    side_info_symbols: float
    source_n: int
    symbol_frames: Optional[List[SymbolFrame]] = None
    level_payload_reals: List[torch.Tensor] = field(default_factory=list)

    @property
    def cbr_payload(self) -> torch.Tensor:
        return self.payload_complex / self.source_n

    @property
    def cbr_side(self) -> float:
        return self.side_info_symbols / self.source_n

    @property
    def cbr_total(self) -> torch.Tensor:
        return self.cbr_payload + self.cbr_side


class HJSCCModel(torch.nn.Module):
    """Hierarchical backbone plus per-level JSCC codecs."""

    def __init__(self, model_cfg: ModelConfig, rate_cfg: Optional[RateConfig] = None):
        super().__init__()
        self.cfg = model_cfg
        self.rate_cfg = rate_cfg or RateConfig()
        self.hvae = HVAE(model_cfg)
        levels = range(model_cfg.num_levels)
        self.encoders = torch.nn.ModuleList(LayerEncoder(model_cfg, l) for l in levels)
        self.decoders = torch.nn.ModuleList(LayerDecoder(model_cfg, l) for l in levels)
        self.option_sets = [
            torch.tensor(rm.default_option_set(c), dtype=torch.float64)
            for c in model_cfg.latent_channels
        ]
        self.side_bits = [
            self.rate_cfg.n_q if self.rate_cfg.n_q else rm.side_info_bits_for(opts.numpy())
            for opts in self.option_sets
        ]

    def side_info_rate(self, spec: chan.ChannelSpec) -> float:
        if self.rate_cfg.bits_per_symbol:
            return self.rate_cfg.bits_per_symbol
        return chan.capacity_bits_per_symbol(spec.snr_db)

    def _side_symbols(self, level_hw, spec: chan.ChannelSpec) -> float:
        bits = self.side_info_rate(spec)
        total = 0.0
        for l, hw in enumerate(level_hw):
            groups = rm.num_groups(hw, self.rate_cfg.patch)
            total += rm.side_info_overhead(groups, self.side_bits[l], bits)
        return total

    def forward_no_feedback(
        self,
        x: torch.Tensor,
        spec: chan.ChannelSpec,
        alpha: float,
        lam: float,
        phase: str = "train",
        rng=None,
        post_channel_hook=None,
        keep_symbols: bool = False,
    ):
        """Full pass: returns (x_hat, x_hat_H, LossBreakdown, TransmissionReport)."""
        td = self.hvae.top_down
        features = self.hvae.bottom_up(x)
        b = x.shape[0]
        coarse = td.coarse_grid(x.shape[-2:])
        h_tx = td.start_state(b, coarse, dtype=x.dtype, device=x.device)
        h_rx = h_tx

        rate = x.new_zeros(b)
        payload_reals = x.new_zeros(b)
        level_hw = []
        level_payloads = []
        frames = [] if keep_symbols else None
        for l in range(self.cfg.num_levels):
            h_tx = td.refine_state(l, h_tx)
            h_rx = td.refine_state(l, h_rx)
            mu_hat, sigma_hat = td.level_prior(l, h_tx)
            mu = td.level_posterior(l, h_tx, features[l])
            z = posterior_sample(mu, phase, rng=rng)
            nlp = neg_log_prior(z, mu_hat, sigma_hat)
            rate = rate + nlp.sum(dim=(1, 2, 3))

            plan = plan_tensors(nlp, alpha, self.option_sets[l],
                                self.rate_cfg.patch, out_dtype=x.dtype)
            prior_info = torch.cat([mu_hat, sigma_hat], dim=1)
            r = self.encoders[l](mu, prior_info, plan.real.to(x.dtype),
                                 plan.merged.to(x.dtype), context=h_tx)
            s = normalize_per_image(r, plan.masks, spec.power)
            s_tilde = chan.awgn_transmit(s, plan.masks, spec.sigma_sq, rng=rng)
            if post_channel_hook is not None:
                s_tilde = post_channel_hook(l, s_tilde, plan.masks)
            mu_tilde = self.decoders[l](s_tilde, plan.quantized, context=h_rx)

            h_tx = td.inject(l, h_tx, z)
            h_rx = td.inject(l, h_rx, mu_tilde)

            lvl_payload = plan.masks.sum(dim=(1, 2, 3))
            payload_reals = payload_reals + lvl_payload
            level_payloads.append(lvl_payload.detach())
            level_hw.append(tuple(mu.shape[-2:]))
            if keep_symbols:
                frames.append(SymbolFrame(r=r, s=s, s_tilde=s_tilde,
                                          mask=plan.masks, lengths=plan.quantized))

        x_hat = td.synthesize(h_tx)
        x_hat_h = td.synthesize(h_rx)

        d1 = mse_255(x, x_hat)
        d2 = mse_255(x, x_hat_h)
        breakdown = LossBreakdown(
            rate_term=rate.mean(),
            d_compress=d1.mean(),
            d_transmit=d2.mean(),
            total=loss_no_feedback(rate.mean(), d1.mean(), d2.mean(), lam, alpha),
            lam=lam, alpha=alpha,
        )
        report = self._report(
            x, x_hat_h, spec, alpha, lam, False, 1.0, rate, d1, d2,
            payload_reals, level_hw, level_payloads, frames,
        )
        return x_hat, x_hat_h, breakdown, report

    def forward_feedback(
        self,
        x: torch.Tensor,
        spec: chan.ChannelSpec,
        alpha: float,
        lam: float,
        beta: float = 1.0,
        phase: str = "train",
        rng=None,
        condition_on_feedback: bool = True,
        post_channel_hook=None,
        keep_symbols: bool = False,
    ):
        """Sequential-phase pass: returns (x_hat_H, LossBreakdown, TransmissionReport).

        Phase l encodes against a transmitter state built from the fed-back
        received symbols of phases < l (decoded by the transmitter's replica
        of the receiver stack), so its prior is the substitution prior
        conditioned on what was actually received. condition_on_feedback=False
        reverts the transmitter state to the plain latent path.
        """
        td = self.hvae.top_down
        features = self.hvae.bottom_up(x)
        b = x.shape[0]
        coarse = td.coarse_grid(x.shape[-2:])
        h_tx = td.start_state(b, coarse, dtype=x.dtype, device=x.device)
        h_rx = h_tx

        rate = x.new_zeros(b)
        payload_reals = x.new_zeros(b)
        level_hw = []
        level_payloads = []
        frames = [] if keep_symbols else None
        for l in range(self.cfg.num_levels):
            h_tx = td.refine_state(l, h_tx)
            h_rx = td.refine_state(l, h_rx)
            mu_hat, sigma_hat = td.level_prior(l, h_tx)
            mu = td.level_posterior(l, h_tx, features[l])
            z = posterior_sample(mu, phase, rng=rng)
            nlp = neg_log_prior(z, mu_hat, sigma_hat)
            rate = rate + nlp.sum(dim=(1, 2, 3))

            plan = plan_tensors(nlp, alpha, self.option_sets[l],
                                self.rate_cfg.patch, out_dtype=x.dtype)
            prior_info = torch.cat([mu_hat, sigma_hat], dim=1)
            r = self.encoders[l](mu, prior_info, plan.real.to(x.dtype),
                                 plan.merged.to(x.dtype), context=h_tx)
            s = normalize_per_image(r, plan.masks, spec.power)
            s_tilde = chan.awgn_transmit(s, plan.masks, spec.sigma_sq, rng=rng)
            if post_channel_hook is not None:
                s_tilde = post_channel_hook(l, s_tilde, plan.masks)
            mu_tilde = self.decoders[l](s_tilde, plan.quantized, context=h_rx)
            h_rx = td.inject(l, h_rx, mu_tilde)

            if condition_on_feedback:
                s_fb = chan.feedback_link(s_tilde, spec.feedback_snr_db, rng=rng,
                                          power=spec.power, mask=plan.masks)
                mu_fb = self.decoders[l](s_fb, plan.quantized, context=h_tx)
                h_tx = td.inject(l, h_tx, mu_fb)
            else:
                h_tx = td.inject(l, h_tx, z)

            lvl_payload = plan.masks.sum(dim=(1, 2, 3))
            payload_reals = payload_reals + lvl_payload
            level_payloads.append(lvl_payload.detach())
            level_hw.append(tuple(mu.shape[-2:]))
            if keep_symbols:
                frames.append(SymbolFrame(r=r, s=s, s_tilde=s_tilde,
                                          mask=plan.masks, lengths=plan.quantized))

        x_hat_h = td.synthesize(h_rx)
        d2 = mse_255(x, x_hat_h)
        zero = torch.zeros((), dtype=x.dtype)
        breakdown = LossBreakdown(
            rate_term=rate.mean(),
            d_compress=zero,
            d_transmit=d2.mean(),
            total=loss_feedback(rate.mean(), d2.mean(), lam, beta),
            lam=lam, alpha=alpha, beta=beta,
        )
        report = self._report(
            x, x_hat_h, spec, alpha, lam, True, beta, rate,
            torch.zeros_like(d2), d2, payload_reals, level_hw, level_payloads, frames,
        )
        return x_hat_h, breakdown, report

    def _report(self, x, x_hat_h, spec, alpha, lam, feedback, beta, rate,
                d1, d2, payload_reals, level_hw, level_payloads, frames):
        side = self._side_symbols(level_hw, spec)
        rate_rep = rate.detach()
        if feedback and beta != 1.0:
            rate_rep = rate_rep - self.cfg.num_levels * math.log(beta)
        loss_img = (alpha * rate.detach() + lam * (d1.detach() + d2.detach())
                    if not feedback else rate_rep + lam * d2.detach())
        return TransmissionReport(
            snr_db=spec.snr_db, alpha=alpha, lam=lam, feedback=feedback, beta=beta,
            psnr_db=psnr(x, x_hat_h).detach(),
            rate_nats=rate_rep,
            d_compress=d1.detach(), d_transmit=d2.detach(),
            loss_total=loss_img,
            payload_complex=payload_reals.detach() / chan.REALS_PER_SYMBOL,
            side_info_symbols=side,
            source_n=chan.source_dims(x),
            symbol_frames=frames,
            level_payload_reals=level_payloads,
        )
