"""Run configuration: nested dataclasses with YAML round-tripping.

A RunConfig plus a seed determines every emitted artifact byte-for-byte.
"""

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .channel import ChannelSpec

OUT_ROOT_ENV = "HJSCC_OUT_ROOT"


@dataclass
class ModelConfig:
    """Hierarchy sizes and block choices, coarse-to-fine everywhere."""

    latent_channels: tuple = (16, 16, 8)
    widths: tuple = (48, 32, 24)
    downsample_factors: tuple = (8, 4, 2)
    backbone_block: str = "conv"
    codec_block: str = "window_attn"
    block_depth: int = 2
    window: int = 4
    bias_hw: int = 4
    rate_attention: bool = True

    def __post_init__(self):
        self.latent_channels = tuple(self.latent_channels)
        self.widths = tuple(self.widths)
        self.downsample_factors = tuple(self.downsample_factors)
        n = len(self.latent_channels)
        if not (len(self.widths) == len(self.downsample_factors) == n and n >= 1):
            raise ValueError("latent_channels, widths, downsample_factors must share length")
        for c in self.latent_channels:
            if c <= 0 or c % 2:
                raise ValueError(f"latent channel counts must be positive and even, got {c}")
        f = self.downsample_factors
        for a, b in zip(f, f[1:]):
            if a != 2 * b:
                raise ValueError(f"downsample factors must halve coarse-to-fine, got {f}")
        if f[-1] < 2 or (f[-1] & (f[-1] - 1)):
            raise ValueError(f"finest downsample factor must be a power of two >= 2, got {f[-1]}")

    @property
    def num_levels(self) -> int:
        return len(self.latent_channels)


@dataclass
class LossConfig:
    """Rate-distortion weighting. Distortion is MSE on the 0-255 intensity
    scale; lam and alpha are calibrated for that convention."""

    lam: float = 64.0
    alpha: float = 16.0
    beta: float = 1.0


@dataclass
class RateConfig:
    """Spatial grouping and length quantization."""

    patch: tuple = (2, 2)
    n_q: int = 0            # 0: derive ceil(log2(|Q|)) per level
    bits_per_symbol: float = 0.0  # 0: charge side info at channel capacity

    def __post_init__(self):
        self.patch = tuple(self.patch)
        if len(self.patch) != 2 or min(self.patch) < 1:
            raise ValueError(f"patch must be two positive ints, got {self.patch}")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    lr_schedule: str = "cosine"  # "cosine" | "constant"
    seed: int = 0
    crop: int = 32
    log_every: int = 25
    ckpt_every: int = 500
    feedback: bool = False


@dataclass
class DataConfig:
    train_dir: str = ""
    eval_dir: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    rate: RateConfig = field(default_factory=RateConfig)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        kwargs = {}
        section_types = {
            "model": ModelConfig,
            "loss": LossConfig,
            "rate": RateConfig,
            "channel": ChannelSpec,
            "train": TrainConfig,
            "data": DataConfig,
        }
        for name, typ in section_types.items():
            if name in raw:
                section = raw.pop(name)
                known = {f.name for f in fields(typ)}
                unknown = set(section) - known
                if unknown:
                    raise ValueError(f"unknown keys in '{name}' config: {sorted(unknown)}")
                kwargs[name] = typ(**section)
        if "out_dir" in raw:
            kwargs["out_dir"] = raw.pop("out_dir")
        if raw:
            raise ValueError(f"unknown top-level config keys: {sorted(raw)}")
        return cls(**kwargs)

    def resolved_out_dir(self) -> Path:
        return resolve_out_path(self.out_dir)


def resolve_out_path(path) -> Path:
    """Re-root a relative output path under $HJSCC_OUT_ROOT when that is set."""
    out = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not out.is_absolute():
        return Path(root) / out
    return out


def load_config(path) -> RunConfig:
    with open(path) as f:
        raw = yaml.safe_load(f)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"config root must be a mapping, got {type(raw).__name__}")
    return RunConfig.from_dict(raw)


def save_config(config: RunConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=True)
