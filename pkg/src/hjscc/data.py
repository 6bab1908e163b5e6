"""Dataset ingestion and synthetic demo images.

Desk-scale datasets are loaded eagerly. Training draws one random crop per
image per epoch in a seeded order; evaluation keeps full images, padded on
the bottom/right to the divisibility the model needs, with the original
extent tracked so metrics ignore the padding.
"""

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}


def list_image_files(dir_path) -> List[Path]:
    d = Path(dir_path)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def load_image(path) -> torch.Tensor:
    """Decode to a (3, H, W) float tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_dir(dir_path) -> List[Tuple[str, torch.Tensor]]:
    """All decodable images in name order; unreadable files are skipped with a
    warning, an empty result is an error."""
    out = []
    for p in list_image_files(dir_path):
        try:
            out.append((p.stem, load_image(p)))
        except Exception as e:  # unreadable or truncated file
            warnings.warn(f"skipping unreadable image {p.name}: {e}")
    if not out:
        raise ValueError(f"no decodable images in {dir_path}")
    return out


def random_crop(img: torch.Tensor, size: int, gen: torch.Generator) -> torch.Tensor:
    """Seeded random crop; images smaller than the crop are edge-padded first."""
    _, h, w = img.shape
    if h < size or w < size:
        img = F.pad(img.unsqueeze(0), (0, max(0, size - w), 0, max(0, size - h)),
                    mode="replicate").squeeze(0)
        _, h, w = img.shape
    top = int(torch.randint(0, h - size + 1, (1,), generator=gen))
    left = int(torch.randint(0, w - size + 1, (1,), generator=gen))
    return img[:, top:top + size, left:left + size]


class TrainSampler:
    """Seeded epoch shuffling, one crop per image per epoch, fixed batch size."""

    def __init__(self, images: List[Tuple[str, torch.Tensor]], crop: int,
                 batch_size: int, seed: int):
        if not images:
            raise ValueError("empty training set")
        self.images = images
        self.crop = crop
        self.batch_size = batch_size
        self.gen = torch.Generator().manual_seed(seed)
        self._queue = []

    def next_batch(self) -> torch.Tensor:
        while len(self._queue) < self.batch_size:
            order = torch.randperm(len(self.images), generator=self.gen)
            self._queue.extend(int(i) for i in order)
        idx = [self._queue.pop(0) for _ in range(self.batch_size)]
        crops = [random_crop(self.images[i][1], self.crop, self.gen) for i in idx]
        return torch.stack(crops)

    def state(self):
        return {"gen": self.gen.get_state(), "queue": list(self._queue)}

    def load_state(self, state):
        self.gen.set_state(state["gen"])
        self._queue = list(state["queue"])


@dataclass
class EvalItem:
    image_id: str
    tensor: torch.Tensor      # (3, H_pad, W_pad), divisible
    orig_hw: Tuple[int, int]  # extent metrics are computed on

    def crop_to_original(self, y: torch.Tensor) -> torch.Tensor:
        h, w = self.orig_hw
        return y[..., :h, :w]


def pad_to_multiple(img: torch.Tensor, factor: int) -> torch.Tensor:
    _, h, w = img.shape
    ph = (-h) % factor
    pw = (-w) % factor
    if ph or pw:
        img = F.pad(img.unsqueeze(0), (0, pw, 0, ph), mode="replicate").squeeze(0)
    return img


def eval_items(dir_path, factor: int) -> List[EvalItem]:
    return [
        EvalItem(image_id=name, tensor=pad_to_multiple(img, factor),
                 orig_hw=(img.shape[-2], img.shape[-1]))
        for name, img in load_dir(dir_path)
    ]


def write_demo_images(dir_path, n: int = 12, size: int = 64, seed: int = 0) -> List[Path]:
    """Synthetic content-diverse PNGs: gradients, textures, and flat shapes,
    so per-image entropy actually varies."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / (size - 1)
    paths = []
    for i in range(n):
        kind = i % 4
        if kind == 0:
            # smooth two-way gradient, low entropy
            a, b = rng.uniform(0.2, 1.0, size=2)
            img = np.stack([a * xx, b * yy, 0.5 * (xx + yy)], axis=-1)
        elif kind == 1:
            # band-limited texture, mid entropy
            fx, fy = rng.uniform(2, 6, size=2)
            base = 0.5 + 0.5 * np.sin(2 * np.pi * (fx * xx + fy * yy))
            img = np.stack([base, np.roll(base, size // 4, 0), base.T], axis=-1)
        elif kind == 2:
            # white noise, high entropy
            img = rng.uniform(0, 1, size=(size, size, 3)).astype(np.float32)
        else:
            # flat squares on a plain field
            img = np.full((size, size, 3), rng.uniform(0.1, 0.9), dtype=np.float32)
            for _ in range(3):
                t, l = rng.integers(0, size // 2, size=2)
                s = int(rng.integers(size // 8, size // 2))
                img[t:t + s, l:l + s] = rng.uniform(0, 1, size=3)
        arr = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
        p = d / f"demo_{i:03d}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths
