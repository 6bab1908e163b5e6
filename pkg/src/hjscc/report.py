"""Sweep reports: rate-distortion and robustness plots plus a summary JSON.

Rendering is headless and deterministic: fixed figure geometry, pinned PNG
metadata, and sorted group ordering. The only timestamp lives in the summary's
generated_at field.
"""

import json
from datetime import datetime, timezone
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import read_metrics_csv  # noqa: E402

FIG_KW = {"figsize": (6.4, 4.2), "dpi": 120}
PNG_META = {"Software": "hjscc report"}


def _is_number(v) -> bool:
    return isinstance(v, (int, float))


def _mean_rows(rows):
    means = [r for r in rows if r["image_id"] == "mean"]
    if means:
        return means
    # tables without precomputed means: aggregate per-image rows
    groups = {}
    for r in rows:
        key = (r["snr_db"], r["alpha"], r["lam"], r["feedback"])
        groups.setdefault(key, []).append(r)
    out = []
    for key in sorted(groups, key=str):
        g = groups[key]
        m = {"image_id": "mean", "snr_db": key[0], "alpha": key[1],
             "lam": key[2], "feedback": key[3]}
        for col in ("cbr_total", "cbr_payload", "cbr_side_info", "psnr_db",
                    "rate_nats", "loss_total"):
            m[col] = sum(r[col] for r in g) / len(g)
        out.append(m)
    return out


def _collect(means, group_cols, x_col):
    curves = {}
    for r in means:
        key = tuple(r[c] for c in group_cols)
        curves.setdefault(key, []).append((r[x_col], r["psnr_db"]))
    return {k: sorted(v) for k, v in sorted(curves.items(), key=lambda kv: str(kv[0]))}


def _plot(curves, group_cols, xlabel, title, path):
    fig, ax = plt.subplots(**FIG_KW)
    for key, pts in curves.items():
        label = " ".join(f"{c}={k}" for c, k in zip(group_cols, key))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


def sweep_report(csv_paths, out_dir) -> dict:
    """Render PSNR-vs-CBR and PSNR-vs-SNR plots and write summary.json.

    Curves with fewer than two points are skipped with a warning; with no
    input rows at all, nothing is written and the summary only carries
    warnings.
    """
    out_dir = Path(out_dir)
    warnings = []
    rows = []
    for p in csv_paths:
        p = Path(p)
        if not p.is_file():
            warnings.append(f"missing input table: {p}")
            continue
        rows.extend(read_metrics_csv(p))
    if not rows:
        warnings.append("no metric rows found; nothing to plot")
        return {"files": [], "warnings": warnings, "curves": {}, "monotonicity": {}}

    means = _mean_rows(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    summary_curves = {}

    rd_cols = ("snr_db", "lam", "feedback")
    rd = {k: v for k, v in _collect(means, rd_cols, "cbr_total").items()}
    rd_ok = {}
    for key, pts in rd.items():
        if len(pts) < 2:
            warnings.append(f"psnr_vs_cbr curve {key} has {len(pts)} point(s); skipped")
        else:
            rd_ok[key] = pts
    if rd_ok:
        path = out_dir / "psnr_vs_cbr.png"
        _plot(rd_ok, rd_cols, "CBR (channel uses per source dimension)",
              "Rate-distortion", path)
        files.append(path.name)
    summary_curves["psnr_vs_cbr"] = [
        {"group": dict(zip(rd_cols, k)), "points": pts} for k, pts in rd_ok.items()
    ]

    snr_cols = ("alpha", "lam", "feedback")
    numeric = [r for r in means if _is_number(r["snr_db"])]
    if len(numeric) < len(means):
        warnings.append("rows with non-numeric snr_db excluded from psnr_vs_snr")
    sn = _collect(numeric, snr_cols, "snr_db")
    sn_ok = {}
    for key, pts in sn.items():
        if len(pts) < 2:
            warnings.append(f"psnr_vs_snr curve {key} has {len(pts)} point(s); skipped")
        else:
            sn_ok[key] = pts
    if sn_ok:
        path = out_dir / "psnr_vs_snr.png"
        _plot(sn_ok, snr_cols, "SNR (dB)", "Channel robustness", path)
        files.append(path.name)
    summary_curves["psnr_vs_snr"] = [
        {"group": dict(zip(snr_cols, k)), "points": pts} for k, pts in sn_ok.items()
    ]

    monotonicity = []
    for key, pts in sn_ok.items():
        deltas = [round(b[1] - a[1], 12) for a, b in zip(pts, pts[1:])]
        monotonicity.append({
            "group": dict(zip(snr_cols, key)),
            "non_decreasing": all(d >= -1e-9 for d in deltas),
            "psnr_deltas_db": deltas,
        })

    summary = {
        "files": files,
        "warnings": warnings,
        "curves": summary_curves,
        "monotonicity": {"psnr_vs_snr": monotonicity},
        "generated_at": datetime.now(timezone.utc).isoformat(),
    }
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary
