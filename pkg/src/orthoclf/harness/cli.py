"""argparse front end: weights / train / attack / redundancy / sweep /
feature-stats subcommands. Exit code 0 on success, 1 on any handled error."""

import argparse
import sys

from .. import orthoweights
from . import run as R
from .config import parse_config


def _add_common(sp, config_required=True):
    sp.add_argument("--config", required=config_required, help="INI run config")
    sp.add_argument("--seed", type=int, default=None, help="override [run] seed")
    sp.add_argument("--out", default=None, help="override [run] out directory")
    sp.add_argument("--threads", type=int, default=1, help="attack fan-out workers")


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="orthoclf",
        description="Orthogonal classification layers: build, train, attack.",
    )
    sub = ap.add_subparsers(dest="cmd", required=True)

    wp = sub.add_parser("weights", help="build + verify + save a head weight file")
    wp.add_argument("--t", type=int, default=None, help="recursion depth (dense)")
    wp.add_argument("--k", type=int, required=True, help="number of classes")
    wp.add_argument("--s", type=float, default=10.0, help="column norm")
    wp.add_argument(
        "--kind",
        choices=[orthoweights.KIND_DENSE, orthoweights.KIND_MAXMAHA],
        default=orthoweights.KIND_DENSE,
    )
    wp.add_argument("--p", type=int, default=None, help="feature dim (max-mahalanobis)")
    wp.add_argument("--out", required=True, help="output .ortw path")

    tp = sub.add_parser("train", help="train an encoder against a frozen head")
    _add_common(tp)

    ap_ = sub.add_parser("attack", help="attack a saved checkpoint")
    _add_common(ap_)
    ap_.add_argument("--checkpoint", required=True)

    rp = sub.add_parser("redundancy", help="head-kind accuracy across widths")
    _add_common(rp)

    sp = sub.add_parser("sweep", help="clean/robust accuracy over (s, alpha) grid")
    _add_common(sp)

    fp = sub.add_parser("feature-stats", help="per-class feature distance stats")
    _add_common(fp)
    fp.add_argument("--checkpoint", required=True)
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.cmd == "weights":
            if args.kind == orthoweights.KIND_DENSE and args.t is None:
                raise ValueError("dense_orthogonal needs --t")
            w, report = R.cmd_weights(args.t, args.k, args.s, args.kind, args.out, p=args.p)
            print(f"wrote {args.out}: kind={w.kind} P={w.P} K={w.K} s={w.s}")
            for c in report.checks:
                flag = "ok" if c.passed else "FAIL"
                print(f"  [{flag}] {c.name}: residual {c.residual:.3e} {c.detail}")
            return 0 if report.passed else 1

        cfg = parse_config(args.config, seed=args.seed, out=args.out)
        if args.cmd == "train":
            m = R.cmd_train(cfg, threads=args.threads)
            print(f"trained -> {cfg.out} (config {m['config_hash'][:12]})")
        elif args.cmd == "attack":
            rows = R.cmd_attack(cfg, args.checkpoint, threads=args.threads)
            for label, method, norm, eps, clean, robust in rows:
                print(
                    f"{label}: {method}-{norm} eps={eps} "
                    f"clean={clean:.4f} robust={robust:.4f}"
                )
        elif args.cmd == "redundancy":
            for t, kind, mtr, str_, mte, ste in R.cmd_redundancy(cfg, threads=args.threads):
                print(
                    f"T={t} {kind}: train {mtr:.4f}+-{str_:.4f} "
                    f"test {mte:.4f}+-{ste:.4f}"
                )
        elif args.cmd == "sweep":
            R.cmd_sweep(cfg, threads=args.threads)
            print(f"sweep -> {cfg.out}/sweep.csv")
        elif args.cmd == "feature-stats":
            R.cmd_feature_stats(cfg, args.checkpoint)
            print(f"feature stats -> {cfg.out}")
        return 0
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
