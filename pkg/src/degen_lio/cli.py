"""Command-line entry point: ``degen-lio <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, load_campaign, load_run_config
from .evaluation import EvaluationError, evaluate, read_tum
from .io import DatasetError, generate_dataset, read_dataset, write_dataset

log = logging.getLogger("degen_lio")


def _simulate(args) -> int:
    cfg = load_run_config(args.config)
    out = write_dataset(generate_dataset(cfg), args.out)
    print(f"dataset written to {out}")
    return 0


def _run(args) -> int:
    ds = read_dataset(args.dataset)
    cfg = load_run_config(args.config)
    res = pipeline.run_filter(ds, cfg)
    out = pipeline.write_run(res, cfg, args.out)
    stats = evaluate(res.trajectory, ds.ground_truth)
    print(pipeline.ate_table(stats), end="")
    ms = np.asarray(res.scan_ms)
    if ms.size:
        print(f"scan time ms: median {np.median(ms):.1f}  p90 {np.percentile(ms, 90):.1f}  max {ms.max():.1f}")
    bad = res.invariant_violations()
    print(f"outputs in {out}; invariant violations: {bad}")
    return 0 if bad == 0 else 1


def _campaign(args) -> int:
    spec, base = load_campaign(args.spec)
    res = pipeline.run_campaign(spec, base, args.out)
    print(res.out_dir.joinpath("comparison.txt").read_text(), end="")
    return 0 if res.ok() else 1


def _crlb_cert(args) -> int:
    out = Path(args.out)
    path = out if out.suffix == ".csv" else out / "crlb_certification.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for source in args.source:
        rows += pipeline.run_crlb_cert(args.n, args.seed, source)
    pipeline.write_cert(rows, path)
    failed = [r for r in rows if not r["certified"]]
    for r in failed:
        print(f"FAILED {r['source']} instance {r['instance']} (seed {r['seed']}, scan {r['scan']}) {r['error']}")
    print(f"{len(rows) - len(failed)}/{len(rows)} instances certified; report: {path}")
    return 0 if not failed else 1


def _eval(args) -> int:
    stats = evaluate(read_tum(args.estimate), read_tum(args.ground_truth), args.max_dt)
    print(pipeline.ate_table(stats), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="degen-lio", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("config")
    s.add_argument("out")
    s.set_defaults(func=_simulate)

    s = sub.add_parser("run", help="run the filter on a dataset directory")
    s.add_argument("dataset")
    s.add_argument("config")
    s.add_argument("out")
    s.set_defaults(func=_run)

    s = sub.add_parser("campaign", help="Monte Carlo comparison of fusion modes")
    s.add_argument("spec")
    s.add_argument("out")
    s.set_defaults(func=_campaign)

    s = sub.add_parser("crlb-cert", help="certify the CRLB ordering on random and harvested instances")
    s.add_argument("n", type=int)
    s.add_argument("seed", type=int)
    s.add_argument("out", help="report CSV path or output directory")
    s.add_argument("--source", choices=("synthetic", "harvested"), action="append")
    s.set_defaults(func=_crlb_cert)

    s = sub.add_parser("eval", help="ATE of an estimated TUM trajectory against ground truth")
    s.add_argument("estimate")
    s.add_argument("ground_truth")
    s.add_argument("--max-dt", type=float, default=0.01)
    s.set_defaults(func=_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "source", None) is None and args.command == "crlb-cert":
        args.source = ["synthetic", "harvested"]
    try:
        return args.func(args)
    except (ConfigError, DatasetError, EvaluationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
