"""Training loop with versioned, resumable checkpoints.

All stochasticity (weight init, crop order, posterior noise, channel noise)
hangs off the config seed, so a run is reproducible and a resumed run
continues the exact RNG streams of the interrupted one.
"""

import csv
import math
from pathlib import Path

import torch

from . import data as data_mod
from .channel import ChannelSpec
from .config import RunConfig
from .pipeline import HJSCCModel

CHECKPOINT_VERSION = 1


class CheckpointVersionError(RuntimeError):
    pass


def build_model(config: RunConfig) -> HJSCCModel:
    return HJSCCModel(config.model, config.rate)


def channel_spec(config: RunConfig) -> ChannelSpec:
    c = config.channel
    return ChannelSpec(snr_db=c.snr_db, power=c.power,
                       feedback_snr_db=c.feedback_snr_db)


def save_checkpoint(path, config: RunConfig, model, optimizer, scheduler,
                    sampler_state, noise_state, step: int, curve=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "step": step,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "scheduler": scheduler.state_dict(),
        "sampler_state": sampler_state,
        "noise_state": noise_state,
        "curve": curve or [],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {version!r} not supported (expected {CHECKPOINT_VERSION})"
        )
    return payload


def restore_model(path):
    """(model.eval(), config) from a checkpoint file."""
    payload = load_checkpoint(path)
    config = RunConfig.from_dict(payload["config"])
    model = build_model(config)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, config


def _write_curve(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss_total", "rate_nats", "d_compress", "d_transmit", "lr"])
        w.writerows(rows)


def train(config: RunConfig, resume_from=None, quiet: bool = False) -> Path:
    """Run (or resume) training; returns the final checkpoint path."""
    tcfg = config.train
    out_dir = config.resolved_out_dir()
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(tcfg.seed)
    model = build_model(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    if tcfg.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=tcfg.steps)
    elif tcfg.lr_schedule == "constant":
        scheduler = torch.optim.lr_scheduler.ConstantLR(optimizer, factor=1.0,
                                                        total_iters=tcfg.steps)
    else:
        raise ValueError(f"unknown lr_schedule {tcfg.lr_schedule!r}")

    images = data_mod.load_dir(config.data.train_dir)
    sampler = data_mod.TrainSampler(images, tcfg.crop, tcfg.batch_size, tcfg.seed)
    noise_gen = torch.Generator().manual_seed(tcfg.seed + 1)

    start_step = 0
    curve = []
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        scheduler.load_state_dict(payload["scheduler"])
        sampler.load_state(payload["sampler_state"])
        noise_gen.set_state(payload["noise_state"])
        start_step = payload["step"]
        curve = list(payload.get("curve") or [])

    spec = channel_spec(config)
    lcfg = config.loss
    model.train()
    for step in range(start_step + 1, tcfg.steps + 1):
        batch = sampler.next_batch()
        optimizer.zero_grad()
        if tcfg.feedback:
            _, breakdown, _ = model.forward_feedback(
                batch, spec, lcfg.alpha, lcfg.lam, beta=lcfg.beta,
                phase="train", rng=noise_gen)
        else:
            _, _, breakdown, _ = model.forward_no_feedback(
                batch, spec, lcfg.alpha, lcfg.lam, phase="train", rng=noise_gen)
        total = breakdown.total
        if not math.isfinite(float(total.detach())):
            dump = out_dir / f"nan_dump_step{step}.pt"
            torch.save({"step": step, "batch": batch,
                        "rate": float(breakdown.rate_term.detach()),
                        "d_compress": float(breakdown.d_compress.detach()),
                        "d_transmit": float(breakdown.d_transmit.detach())}, dump)
            raise RuntimeError(f"non-finite loss at step {step}; batch dumped to {dump}")
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 5.0)
        optimizer.step()
        scheduler.step()

        if step % tcfg.log_every == 0 or step == tcfg.steps:
            row = [step, float(total.detach()), float(breakdown.rate_term.detach()),
                   float(breakdown.d_compress.detach()),
                   float(breakdown.d_transmit.detach()),
                   scheduler.get_last_lr()[0]]
            curve.append(row)
            if not quiet:
                print(f"step {step}: loss {row[1]:.3f} rate {row[2]:.1f} "
                      f"d1 {row[3]:.1f} d2 {row[4]:.1f}", flush=True)
        if step % tcfg.ckpt_every == 0 and step != tcfg.steps:
            save_checkpoint(out_dir / f"ckpt_step{step}.pt", config, model,
                            optimizer, scheduler, sampler.state(),
                            noise_gen.get_state(), step, curve=curve)
            _write_curve(out_dir / "train_curve.csv", curve)

    final = save_checkpoint(out_dir / "ckpt_final.pt", config, model, optimizer,
                            scheduler, sampler.state(), noise_gen.get_state(),
                            tcfg.steps, curve=curve)
    _write_curve(out_dir / "train_curve.csv", curve)
    return final
