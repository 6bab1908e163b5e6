"""Physical-layer simulation: power normalization, AWGN, feedback link, CBR.

All tensor ops preserve the input dtype and stay differentiable where it
matters (power normalization sits inside the training graph). Noise is drawn
from an explicit torch.Generator so transmissions are reproducible.
"""

import math
from dataclasses import dataclass
from typing import Union

import torch

NOISELESS = "noiseless"

#: Real dimensions per complex channel symbol. Network outputs are real; two
#: consecutive entries form one complex symbol, so K(complex) = reals / 2.
REALS_PER_SYMBOL = 2


@dataclass
class ChannelSpec:
    """Forward/feedback channel configuration.

    Either link accepts "noiseless" for an exactly zero noise variance.
    """

    snr_db: Union[float, str] = 10.0
    power: float = 1.0
    feedback_snr_db: Union[float, str] = NOISELESS
    pairing: int = REALS_PER_SYMBOL

    def __post_init__(self):
        if self.power <= 0:
            raise ValueError(f"power must be positive, got {self.power}")

    @property
    def sigma_sq(self) -> float:
        if self.snr_db == NOISELESS:
            return 0.0
        return sigma_from_snr(float(self.snr_db), self.power)

    @property
    def feedback_sigma_sq(self) -> float:
        if self.feedback_snr_db == NOISELESS:
            return 0.0
        return sigma_from_snr(float(self.feedback_snr_db), self.power)


def sigma_from_snr(snr_db: float, power: float) -> float:
    """Noise variance from SNR = 10*log10(P / sigma^2)."""
    if power <= 0:
        raise ValueError(f"power must be positive, got {power}")
    return power * 10.0 ** (-snr_db / 10.0)


def power_normalize(s: torch.Tensor, mask: torch.Tensor, power: float):
    """Scale s so the mean square over unmasked real dimensions equals power.

    Masked positions stay exactly zero. Returns (s_norm, degenerate) where
    degenerate flags an all-masked or all-zero input that was passed through
    unchanged.
    """
    if s.shape != mask.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {mask.shape}")
    n = mask.sum()
    if n.item() == 0:
        return s * mask, True
    energy = (s * s * mask).sum()
    if energy.item() == 0.0:
        return s * mask, True
    scale = torch.sqrt(power * n / energy)
    return s * scale * mask, False


def joint_power_scale(symbols_and_masks, power: float):
    """One scale for all levels of one image, from their pooled unmasked energy.

    Returns (scale, degenerate); scale is a 0-dim tensor on the first input's
    dtype/device, 1.0 when degenerate.
    """
    total_energy = None
    total_n = 0.0
    for s, mask in symbols_and_masks:
        e = (s * s * mask).sum()
        total_energy = e if total_energy is None else total_energy + e
        total_n += float(mask.sum().item())
    if total_n == 0 or total_energy is None or total_energy.item() == 0.0:
        one = torch.ones((), dtype=symbols_and_masks[0][0].dtype)
        return one, True
    return torch.sqrt(power * total_n / total_energy), False


def awgn_transmit(s: torch.Tensor, mask: torch.Tensor, sigma_sq: float, rng=None):
    """s_tilde = s + n on unmasked positions, n ~ N(0, sigma_sq) per real dim.

    Masked positions carry no channel use and stay exactly zero.
    """
    if sigma_sq < 0:
        raise ValueError(f"sigma_sq must be non-negative, got {sigma_sq}")
    if s.shape != mask.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {mask.shape}")
    if sigma_sq == 0.0:
        return s * mask
    noise = torch.randn(s.shape, generator=rng, dtype=s.dtype, device=s.device)
    return (s + math.sqrt(sigma_sq) * noise) * mask


def feedback_link(s_tilde: torch.Tensor, feedback_snr_db, rng=None, power: float = 1.0,
                  mask: torch.Tensor = None):
    """Return channel from receiver to transmitter.

    "noiseless" passes the tensor through untouched; otherwise AWGN at the
    feedback SNR (same power convention as the forward link) is added on the
    unmasked positions.
    """
    if feedback_snr_db == NOISELESS:
        return s_tilde
    sigma_sq = sigma_from_snr(float(feedback_snr_db), power)
    if mask is None:
        mask = torch.ones_like(s_tilde)
    return awgn_transmit(s_tilde, mask, sigma_sq, rng=rng)


def source_dims(image: torch.Tensor) -> int:
    """N = 3*H*W for a (..., 3, H, W) image."""
    if image.shape[-3] != 3:
        raise ValueError(f"expected 3-channel image, got shape {tuple(image.shape)}")
    return 3 * image.shape[-2] * image.shape[-1]


def compute_cbr(total_complex_symbols: float, image: torch.Tensor) -> float:
    """Channel bandwidth ratio K / N with N = 3*H*W source dimensions."""
    return float(total_complex_symbols) / source_dims(image)


def capacity_bits_per_symbol(snr_db) -> float:
    """Shannon capacity log2(1 + SNR) of the AWGN link, in bits per complex symbol.

    Used as the default rate at which error-free side information is charged.
    A noiseless link carries side information for free.
    """
    if snr_db == NOISELESS:
        return math.inf
    return math.log2(1.0 + 10.0 ** (float(snr_db) / 10.0))
