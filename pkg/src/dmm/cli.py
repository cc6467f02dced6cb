"""Command-line entry point: ``dmm {gen,gradcheck,bench,overfit,sfac}``.

Output files (all CSV with a header row) land in ``--out``:

gen        pairs/pairNNN_{rgb,ir,mask}.dmmt, pairs/annotations.csv
gradcheck  gradcheck.csv: check, max_rel_error, coords, ambiguous, status
bench      bench_scan.csv: L, mean_seconds, std, flops
           bench_attention.csv: L, mean_seconds, std
           bench_summary.csv: series, loglog_slope
overfit    overfit_loss.csv: step, det_cls, det_reg, aux_cls, aux_reg, total
           overfit_tpa.csv: step, loss;  checkpoint.npz;  attention/{baseline,mta}/*.dmmt
sfac       sfac.csv: bucket, sfac, targets, images, excluded
           with --compare also sfac_compare.csv and
           sfac_delta.csv: bucket, sfac_a, sfac_b, delta, relative

Exit status is 0 only when every check of the command passes.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .harness import HarnessConfig, HarnessError

SCAN_SLOPE = (0.85, 1.25)
ATTENTION_SLOPE = 1.7
OVERFIT_RATIO = 0.1


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="BLAS thread cap (1 = bit-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmm", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic RGB/IR pairs")
    _common(p)
    p.add_argument("-n", type=int, help="number of pairs")
    p.add_argument("--size", type=int, help="image height and width")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and composite")
    _common(p)

    p = sub.add_parser("bench", help="scan vs dense-attention wall-time scaling")
    _common(p)
    p.add_argument("--lengths", type=int, nargs="+")
    p.add_argument("--trials", type=int)
    p.add_argument("--no-attention", action="store_true")

    p = sub.add_parser("overfit", help="two-phase toy training run")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("sfac", help="attention contrast per target-size bucket")
    _common(p)
    p.add_argument("--attention", required=True, help="directory of <image_id>.dmmt 2-D maps")
    p.add_argument("--annotations", required=True, help="CSV: image_id,cx,cy,w,h,angle_deg,class")
    p.add_argument("--compare", help="second attention directory; report deltas against the first")
    p.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--no-scale", action="store_true", help="skip the [0, 255] min-max scaling")
    return parser


def load_config(args) -> HarnessConfig:
    over = dict(seed=args.seed, precision=args.precision, out=args.out, threads=args.threads)
    if args.command == "gen":
        over.update(n_pairs=args.n, image_size=args.size)
    elif args.command == "bench":
        over.update(
            bench_lengths=tuple(args.lengths) if args.lengths else None,
            bench_trials=args.trials,
            bench_attention=False if args.no_attention else None,
        )
        if args.precision is not None:
            over["bench_precision"] = args.precision
    elif args.command == "overfit":
        over.update(steps=args.steps, lr=args.lr)
    return HarnessConfig.from_ini(args.config, **over)


def _gen(cfg, args) -> int:
    pairs = harness.run_gen(cfg)
    print(f"wrote {len(pairs)} pairs to {cfg.out_dir / 'pairs'}")
    return 0


def _gradcheck(cfg, args) -> int:
    rows = harness.run_gradcheck(cfg)
    for r in rows:
        print(f"{r.name:<22} {r.report.max_rel_error:.3e}  {'pass' if r.passed else 'FAIL'}")
    failed = [r.name for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return 1 if failed else 0


def _bench(cfg, args) -> int:
    res = harness.run_scaling_bench(cfg)
    for i, L in enumerate(res.lengths):
        attn = f"{res.attn_mean[i]:.4f}s" if res.attn_mean else "-"
        print(f"L={L:<7d} scan={res.scan_mean[i]:.4f}s  attention={attn}")
    ok = SCAN_SLOPE[0] <= res.scan_slope <= SCAN_SLOPE[1]
    print(f"scan slope {res.scan_slope:.3f} (want {SCAN_SLOPE[0]}..{SCAN_SLOPE[1]})")
    if res.attn_mean:
        ok = ok and res.attention_slope > ATTENTION_SLOPE
        print(f"attention slope {res.attention_slope:.3f} (want > {ATTENTION_SLOPE})")
    return 0 if ok else 1


def _overfit(cfg, args) -> int:
    res = harness.run_overfit(cfg)
    frozen = res.tpa_before == res.tpa_after
    print(f"total loss {res.initial:.4f} -> {res.final:.4f} ({res.ratio:.1%}) in {len(res.rows) - 1} steps")
    print(f"TPA heads unchanged: {frozen}")
    return 0 if frozen and res.ratio < OVERFIT_RATIO else 1


def _sfac(cfg, args) -> int:
    size = tuple(args.image_size) if args.image_size else None
    first, second = harness.run_sfac_report(
        cfg, args.attention, args.annotations, args.compare, size, scale=not args.no_scale
    )
    print(harness.describe_sfac(first, second))
    return 0


COMMANDS = {"gen": _gen, "gradcheck": _gradcheck, "bench": _bench, "overfit": _overfit, "sfac": _sfac}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        with harness.thread_limit(cfg):
            return COMMANDS[args.command](cfg, args)
    except (HarnessError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
