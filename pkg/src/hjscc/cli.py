"""Command-line entry points: train, eval, report, demo-data."""

import argparse
from pathlib import Path

from .config import load_config, resolve_out_path


def _snr_value(v: str):
    if v == "noiseless":
        return v
    return float(v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hjscc",
                                description="hierarchical JSCC image transmission")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True, help="YAML run configuration")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="sweep a checkpoint over SNRs and alphas")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="directory of evaluation images")
    e.add_argument("--snr-db", nargs="+", type=_snr_value, required=True,
                   help="forward-channel SNRs in dB (or 'noiseless')")
    e.add_argument("--alpha", nargs="+", type=float, required=True,
                   help="rate-scale values to sweep")
    e.add_argument("--feedback", action="store_true",
                   help="use the sequential feedback pipeline")
    e.add_argument("--feedback-snr-db", type=_snr_value, default=None,
                   help="feedback-link SNR in dB (default: checkpoint config)")
    e.add_argument("--power", type=float, default=None,
                   help="transmit power constraint (default: checkpoint config)")
    e.add_argument("--out", default=None, help="output directory")
    e.add_argument("--seed", type=int, default=1234)

    r = sub.add_parser("report", help="render plots and a summary from metric tables")
    r.add_argument("--in", dest="inputs", nargs="+", required=True,
                   help="metrics CSV files")
    r.add_argument("--out", required=True, help="output directory")

    d = sub.add_parser("demo-data", help="write synthetic demo images")
    d.add_argument("--out", required=True)
    d.add_argument("--n", type=int, default=12)
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "train":
        from .train import train
        config = load_config(args.config)
        ckpt = train(config, resume_from=args.resume, quiet=args.quiet)
        print(f"final checkpoint: {ckpt}")
        return 0

    if args.command == "eval":
        from .evaluate import evaluate
        out = resolve_out_path(args.out) if args.out else None
        _, csv_path, json_path = evaluate(
            args.ckpt, args.data, args.snr_db, args.alpha,
            feedback=args.feedback, out_dir=out, seed=args.seed,
            power=args.power, feedback_snr_db=args.feedback_snr_db)
        print(f"metrics: {csv_path}")
        print(f"summary: {json_path}")
        return 0

    if args.command == "report":
        from .report import sweep_report
        out = resolve_out_path(args.out)
        summary = sweep_report(args.inputs, out)
        for w in summary["warnings"]:
            print(f"warning: {w}")
        for name in summary["files"]:
            print(f"wrote {Path(out) / name}")
        if summary["files"]:
            print(f"wrote {Path(out) / 'summary.json'}")
        return 0

    if args.command == "demo-data":
        from .data import write_demo_images
        out = resolve_out_path(args.out)
        paths = write_demo_images(out, n=args.n, size=args.size, seed=args.seed)
        print(f"wrote {len(paths)} images to {out}")
        return 0

    return 2


if __name__ == "__main__":
    raise SystemExit(main())
