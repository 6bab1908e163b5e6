"""Evaluation sweeps over (image, SNR, alpha) cells.

Each cell owns an RNG stream derived from (seed, image id, SNR, alpha), so
rows never depend on sweep order and identical invocations produce identical
bytes. Floats are written with repr, which round-trips exactly; the CBR
bookkeeping (total = payload + side info) therefore survives the CSV.
"""

import csv
import hashlib
import json
from pathlib import Path

import torch

from . import data as data_mod
from .channel import ChannelSpec, source_dims
from .pipeline import psnr as psnr_op
from .train import restore_model

COLUMNS = [
    "image_id", "snr_db", "alpha", "lam", "feedback",
    "cbr_total", "cbr_payload", "cbr_side_info",
    "psnr_db", "rate_nats", "d_compress", "d_transmit", "loss_total",
]


def cell_seed(base: int, image_id: str, snr_db, alpha: float) -> int:
    key = f"{base}|{image_id}|{snr_db}|{alpha}".encode()
    return int.from_bytes(hashlib.blake2s(key, digest_size=8).digest(), "big") >> 1


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in COLUMNS])
    return path


def read_metrics_csv(path):
    rows = []
    with open(path, newline="") as f:
        for raw in csv.DictReader(f):
            row = {}
            for k, v in raw.items():
                if k == "image_id":
                    row[k] = v
                elif k == "feedback":
                    row[k] = int(v)
                else:
                    try:
                        row[k] = float(v)
                    except ValueError:
                        row[k] = v
            rows.append(row)
    return rows


def _mean_row(group):
    out = {"image_id": "mean"}
    for k in ("snr_db", "alpha", "lam", "feedback"):
        out[k] = group[0][k]
    for k in ("cbr_payload", "cbr_side_info", "psnr_db", "rate_nats",
              "d_compress", "d_transmit", "loss_total"):
        out[k] = float(sum(r[k] for r in group) / len(group))
    out["cbr_total"] = out["cbr_payload"] + out["cbr_side_info"]
    return out


def evaluate(ckpt_path, data_dir, snr_list, alpha_list, feedback: bool = False,
             out_dir=None, seed: int = 1234, power=None, feedback_snr_db=None):
    """Sweep a trained model; returns (rows, csv_path, json_path)."""
    model, config = restore_model(ckpt_path)
    lam = config.loss.lam
    beta = config.loss.beta
    if power is None:
        power = config.channel.power
    if feedback_snr_db is None:
        feedback_snr_db = config.channel.feedback_snr_db
    factor = config.model.downsample_factors[0]
    items = data_mod.eval_items(data_dir, factor)

    rows = []
    for snr in snr_list:
        spec = ChannelSpec(snr_db=snr, power=power, feedback_snr_db=feedback_snr_db)
        for alpha in alpha_list:
            group = []
            for item in items:
                rng = torch.Generator().manual_seed(
                    cell_seed(seed, item.image_id, snr, alpha))
                x = item.tensor.unsqueeze(0)
                with torch.no_grad():
                    if feedback:
                        x_hat_h, _, report = model.forward_feedback(
                            x, spec, alpha, lam, beta=beta, phase="eval", rng=rng)
                    else:
                        _, x_hat_h, _, report = model.forward_no_feedback(
                            x, spec, alpha, lam, phase="eval", rng=rng)
                x0 = item.crop_to_original(x)
                y0 = item.crop_to_original(x_hat_h)
                n0 = source_dims(x0)
                payload = float(report.payload_complex[0]) / n0
                side = report.side_info_symbols / n0
                d1 = float(report.d_compress[0])
                d2 = float(report.d_transmit[0])
                rate = float(report.rate_nats[0])
                if feedback:
                    loss_total = rate + lam * d2
                else:
                    loss_total = alpha * rate + lam * (d1 + d2)
                group.append({
                    "image_id": item.image_id,
                    "snr_db": snr, "alpha": float(alpha), "lam": float(lam),
                    "feedback": int(feedback),
                    "cbr_payload": payload, "cbr_side_info": side,
                    "cbr_total": payload + side,
                    "psnr_db": float(psnr_op(x0, y0).reshape(())),
                    "rate_nats": rate, "d_compress": d1, "d_transmit": d2,
                    "loss_total": float(loss_total),
                })
            rows.extend(group)
            rows.append(_mean_row(group))

    out_dir = Path(out_dir) if out_dir is not None else Path(ckpt_path).parent
    csv_path = write_metrics_csv(out_dir / "metrics.csv", rows)
    summary = {
        "columns": COLUMNS,
        "checkpoint": Path(ckpt_path).name,
        "dataset": str(data_dir),
        "snr_db": list(snr_list),
        "alpha": [float(a) for a in alpha_list],
        "lam": float(lam),
        "feedback": bool(feedback),
        "seed": seed,
        "num_images": len(items),
        "mean_rows": [r for r in rows if r["image_id"] == "mean"],
    }
    json_path = out_dir / "metrics.json"
    with open(json_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return rows, csv_path, json_path
