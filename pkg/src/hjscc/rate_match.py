"""Entropy-to-bandwidth machinery.

Converts per-element prior information (in nats) into per-position symbol
lengths, merges them over spatial patches, quantizes them to a finite option
set, and builds the prefix masks that gate the channel symbols. Everything
here is deterministic numpy on float64/int arrays; gradients never flow
through a rate plan.
"""

import json
from dataclasses import dataclass, field

import numpy as np


def default_option_set(channels: int) -> np.ndarray:
    """Even-integer length grid {0, 2, ..., C}.

    Even entries keep the two-reals-per-complex-symbol pairing whole.
    """
    if channels <= 0 or channels % 2:
        raise ValueError(f"channels must be positive and even, got {channels}")
    return np.arange(0, channels + 1, 2, dtype=np.int64)


def side_info_bits_for(option_set) -> int:
    """Bits needed to index one option: ceil(log2(|Q|))."""
    n = len(option_set)
    if n < 1:
        raise ValueError("empty option set")
    return max(1, int(np.ceil(np.log2(n))))


def lengths_from_prior(neg_log_p: np.ndarray, alpha: float) -> np.ndarray:
    """Per-position real-valued lengths: alpha * sum over channels of -log p.

    neg_log_p has shape (C, H, W), entries in nats, all >= 0.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    neg_log_p = np.asarray(neg_log_p, dtype=np.float64)
    if neg_log_p.ndim != 3:
        raise ValueError(f"expected (C, H, W) map, got shape {neg_log_p.shape}")
    if np.any(neg_log_p < 0):
        raise ValueError("neg_log_p must be non-negative")
    return alpha * neg_log_p.sum(axis=0)


def group_lengths(real_lengths: np.ndarray, patch) -> np.ndarray:
    """Replace each value by the mean over its spatial patch.

    Right/bottom edge patches that do not fill (p_h, p_w) average over the
    positions they actually cover, so the global sum is preserved.
    """
    real_lengths = np.asarray(real_lengths, dtype=np.float64)
    p_h, p_w = patch
    if p_h < 1 or p_w < 1:
        raise ValueError(f"patch dims must be >= 1, got {patch}")
    h, w = real_lengths.shape
    merged = np.empty_like(real_lengths)
    for i0 in range(0, h, p_h):
        for j0 in range(0, w, p_w):
            block = real_lengths[i0:i0 + p_h, j0:j0 + p_w]
            merged[i0:i0 + p_h, j0:j0 + p_w] = block.mean()
    return merged


def num_groups(shape, patch) -> int:
    """Number of patches covering an (H, W) grid, edge patches included."""
    h, w = shape
    p_h, p_w = patch
    return -(-h // p_h) * (-(-w // p_w))


def quantize_length(k: float, option_set, channels: int) -> int:
    """Smallest option >= k; values above max(Q) clamp to max(Q).

    Rounding up means the allocated bandwidth never falls below the
    entropy-implied target.
    """
    q = np.asarray(option_set, dtype=np.int64)
    if q.size == 0:
        raise ValueError("empty option set")
    if np.any(np.diff(q) <= 0):
        raise ValueError("option set must be strictly ascending")
    if q[-1] > channels:
        raise ValueError(f"option set exceeds channel count {channels}")
    idx = int(np.searchsorted(q, k, side="left"))
    return int(q[min(idx, q.size - 1)])


def quantize_length_map(k_map: np.ndarray, option_set, channels: int) -> np.ndarray:
    """Vectorized quantize_length over an (H, W) map."""
    q = np.asarray(option_set, dtype=np.int64)
    if q.size == 0:
        raise ValueError("empty option set")
    if q[-1] > channels:
        raise ValueError(f"option set exceeds channel count {channels}")
    idx = np.searchsorted(q, np.asarray(k_map, dtype=np.float64), side="left")
    return q[np.minimum(idx, q.size - 1)]


def make_mask(k_hat: int, channels: int) -> np.ndarray:
    """Prefix mask: first k_hat entries one, the rest zero."""
    if not 0 <= k_hat <= channels:
        raise ValueError(f"k_hat={k_hat} outside [0, {channels}]")
    mask = np.zeros(channels, dtype=np.float64)
    mask[:k_hat] = 1.0
    return mask


def masks_from_lengths(lengths: np.ndarray, channels: int) -> np.ndarray:
    """Prefix masks for an (H, W) integer length map, shape (C, H, W)."""
    lengths = np.asarray(lengths)
    if lengths.min() < 0 or lengths.max() > channels:
        raise ValueError("lengths outside [0, C]")
    rng = np.arange(channels, dtype=np.int64).reshape(channels, 1, 1)
    return (rng < lengths[None, :, :]).astype(np.float64)


def apply_mask(r: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Element-wise gate: s = r * mask."""
    r = np.asarray(r)
    mask = np.asarray(mask)
    if r.shape != mask.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {mask.shape}")
    return r * mask


def side_info_overhead(n_groups: int, n_q: int, bits_per_symbol: float) -> float:
    """Channel symbols charged for transmitting one n_q-bit length index per group."""
    if n_groups <= 0 or n_q <= 0:
        raise ValueError("n_groups and n_q must be positive")
    if bits_per_symbol <= 0:
        raise ValueError(f"bits_per_symbol must be positive, got {bits_per_symbol}")
    return n_groups * n_q / bits_per_symbol


@dataclass
class RatePlan:
    """Length bookkeeping for one hierarchy level of one image."""

    real_lengths: np.ndarray        # (H, W) float64, alpha-scaled nats
    merged_lengths: np.ndarray      # (H, W) float64, constant within each patch
    quantized_lengths: np.ndarray   # (H, W) int64, values from option_set
    patch: tuple                    # (p_h, p_w)
    option_set: np.ndarray          # ascending ints, max <= channels
    side_info_bits: int             # bits per group
    channels: int
    n_groups: int = field(init=False)

    def __post_init__(self):
        self.n_groups = num_groups(self.real_lengths.shape, self.patch)

    @property
    def payload_reals(self) -> int:
        """Total unmasked real symbol dimensions at this level."""
        return int(self.quantized_lengths.sum())

    def masks(self) -> np.ndarray:
        return masks_from_lengths(self.quantized_lengths, self.channels)

    def side_info_symbols(self, bits_per_symbol: float) -> float:
        return side_info_overhead(self.n_groups, self.side_info_bits, bits_per_symbol)

    def to_dict(self) -> dict:
        return {
            "patch": list(self.patch),
            "option_set": self.option_set.tolist(),
            "side_info_bits": self.side_info_bits,
            "channels": self.channels,
            "n_groups": self.n_groups,
            "quantized_lengths": self.quantized_lengths.tolist(),
        }


def build_rate_plan(neg_log_p, alpha, option_set, patch, side_info_bits=None) -> RatePlan:
    """Full deterministic plan for one level from its (C, H, W) nats map."""
    neg_log_p = np.asarray(neg_log_p, dtype=np.float64)
    channels = neg_log_p.shape[0]
    option_set = np.asarray(option_set, dtype=np.int64)
    real = lengths_from_prior(neg_log_p, alpha)
    merged = group_lengths(real, patch)
    quantized = quantize_length_map(merged, option_set, channels)
    if side_info_bits is None:
        side_info_bits = side_info_bits_for(option_set)
    return RatePlan(
        real_lengths=real,
        merged_lengths=merged,
        quantized_lengths=quantized,
        patch=tuple(patch),
        option_set=option_set,
        side_info_bits=side_info_bits,
        channels=channels,
    )


def save_plan_sidecar(path, plans) -> None:
    """Debug sidecar: per-level quantized length arrays as JSON."""
    payload = {"levels": [p.to_dict() for p in plans]}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def load_plan_sidecar(path) -> dict:
    with open(path) as f:
        return json.load(f)
