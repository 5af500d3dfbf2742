"""Command-line front end (``focalseg <subcommand>``).

Exit codes: 0 success, 1 contract failure (bad config, failed check, mismatch),
2 I/O error (missing dataset or checkpoint, refused overwrite).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench, data, gradsuite, model as model_mod
from .losses import LossWeights
from .tensor import ParameterError, set_precision
from .train import CheckpointMismatch, RunConfig, TrainingError, compute_threads, evaluate_checkpoint, train

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible run")
    p.add_argument("--precision", choices=("single", "double"))
    p.add_argument("--out", type=Path, help="output directory or file")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="focalseg", description="Focal-attention U-shaped segmentation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="synthesize a phantom dataset")
    _common(p)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--size", type=int)
    p.add_argument("--sigma", type=float, default=data.DEFAULT_SIGMA)
    p.add_argument("--fractions", type=float, nargs=3, default=data.DEFAULT_FRACTIONS)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("make-labels", help="regenerate boundary heatmaps with a chosen sigma")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--sigma", type=float, default=data.DEFAULT_SIGMA)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--preset", choices=sorted(model_mod.PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--spacing", type=float, nargs="+", help="pixel spacing in mm (one or two values)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the toy model")
    _common(p)
    p.add_argument("--seeds", type=int, default=10)

    p = sub.add_parser("bench-attn", help="focal vs global attention cost benchmark")
    _common(p)
    p.add_argument("--sizes", type=int, nargs="+", default=[14, 28, 56])
    p.add_argument("--reps", type=int, default=20)

    p = sub.add_parser("summary", help="parameter counts of a model preset")
    _common(p)
    p.add_argument("--preset", default="desk", choices=sorted(model_mod.PRESETS))
    return ap


def _load_json(path: Path | None) -> dict:
    return json.loads(path.read_text()) if path else {}


def _out(args, default: str) -> Path:
    return Path(args.out) if args.out else Path(default)


def cmd_make_dataset(args) -> int:
    cfg = _load_json(args.config)
    spec_d = cfg.get("phantom", cfg)
    if args.seed is not None:
        spec_d = {**spec_d, "seed": args.seed}
    if args.size is not None:
        spec_d = {**spec_d, "size": args.size}
    spec = data.PhantomSpec.from_dict(spec_d)
    out = _out(args, "data")
    splits = data.make_dataset(out, spec, args.n, tuple(args.fractions), args.sigma, args.force)
    print(f"wrote {out}: " + ", ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return EXIT_OK


def cmd_make_labels(args) -> int:
    n = data.make_labels(args.data, args.sigma)
    print(f"rewrote {n} heatmaps with sigma={args.sigma}")
    return EXIT_OK


def run_config_from_args(args) -> RunConfig:
    d = _load_json(args.config)
    if args.preset:
        d["model"] = args.preset
    cfg = RunConfig.from_dict(d)
    loss = cfg.loss
    if args.lambda1 is not None or args.lambda2 is not None:
        loss = LossWeights(args.lambda1 if args.lambda1 is not None else loss.lambda1,
                           args.lambda2 if args.lambda2 is not None else loss.lambda2)
    cfg.loss = loss
    for attr, val in (("seed", args.seed), ("epochs", args.epochs), ("batch_size", args.batch_size),
                      ("precision", args.precision)):
        if val is not None:
            setattr(cfg, attr, val)
    if args.deterministic:
        cfg.deterministic = True
    if args.data:
        cfg.data_dir = str(args.data)
    if args.out:
        cfg.out_dir = str(args.out)
    return cfg


def cmd_train(args) -> int:
    cfg = run_config_from_args(args)
    res = train(cfg)
    print(f"best epoch {res.best_epoch} (val DSC {res.best_val_dsc:.4f}); log {res.log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.precision:
        set_precision(args.precision)
    out = _out(args, str(Path(args.checkpoint).with_suffix("")) + f"_{args.split}_metrics.csv")
    spacing = None
    if args.spacing:
        spacing = args.spacing[0] if len(args.spacing) == 1 else tuple(args.spacing)
    with compute_threads(args.deterministic):
        _, agg = evaluate_checkpoint(args.checkpoint, args.data, args.split, out, spacing)
    print(f"{args.split}: n={agg.n} DSC {agg.dsc_mean:.4f} +- {agg.dsc_std:.4f}  "
          f"95HD {agg.hd95_mean:.3f} +- {agg.hd95_std:.3f} px (excluded {agg.hd_excluded}); wrote {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    out = _out(args, "gradcheck.csv")
    reports = gradsuite.run_suite(seeds=range(args.seed or 0, (args.seed or 0) + args.seeds))
    gradsuite.write_report(out, reports)
    failed = [r for r in reports if not r.passed]
    for r in failed:
        print(r.describe())
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed; report {out}")
    return EXIT_OK if not failed else EXIT_CONTRACT


def cmd_bench(args) -> int:
    out = _out(args, "bench_attn.csv")
    diff = bench.degenerate_check(min(args.sizes))
    rows = bench.run_benchmark(args.sizes, reps=args.reps, seed=args.seed or 0)
    bench.write_bench_csv(out, rows)
    for r in rows:
        print(f"size {r.size:3d}: N={r.tokens:5d} focal s={r.focal_attended} {r.focal_ms:8.2f} ms  "
              f"global {r.global_ms:8.2f} ms  ratio {r.ratio:6.2f}")
    print(f"degenerate-config cross-check max |diff| = {diff:.3e}; wrote {out}")
    return EXIT_OK if diff <= 1e-6 else EXIT_CONTRACT


def cmd_summary(args) -> int:
    cfg = model_mod.preset(args.preset)
    m = model_mod.FocalUNETR(cfg, seed=args.seed or 0)
    for name, count in model_mod.summary(m):
        print(f"{name:40s} {count:12,d}")
    print(f"{'total':40s} {m.num_parameters():12,d}")
    return EXIT_OK


COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "make-labels": cmd_make_labels,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench-attn": cmd_bench,
    "summary": cmd_summary,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, FileExistsError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ParameterError, CheckpointMismatch, TrainingError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
