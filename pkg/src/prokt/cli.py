"""Command-line entry point: ``prokt <subcommand> [flags]``.

Exit codes: 0 success, 1 run failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .data import save_csv
from .distill import TrainingDiverged, train_plain
from .harness import ConfigError
from .mirror_oracle import constrained_step, monotonicity_suite
from .models import save_checkpoint
from .numerics import derive_rng, kl_divergence

EXIT_OK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2


def _real_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment JSON config")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--out", metavar="DIR", default=os.environ.get("PROKT_OUT_DIR"),
                        help="output directory (default: $PROKT_OUT_DIR, then the config's output_dir)")
    common.add_argument("--method", choices=harness.METHODS)
    common.add_argument("--lambda", dest="lam", type=float, metavar="REAL")
    common.add_argument("--alpha", type=float, metavar="REAL")
    common.add_argument("--temperature", type=float, metavar="REAL")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="prokt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("gen-data", parents=[common], help="write the configured dataset to CSV")
    sub.add_parser("train", parents=[common], help="plain-train the teacher and save RCO checkpoints")
    sub.add_parser("distill", parents=[common], help="run the configured method over all seeds")
    sw = sub.add_parser("sweep", parents=[common], help="ProKT over a grid of lambda values")
    sw.add_argument("--lambda-grid", type=_real_list, required=True, metavar="L1,L2,...")
    orc = sub.add_parser("oracle", parents=[common], help="run the tabular mirror-descent checks")
    orc.add_argument("--seeds", type=int, default=100, help="number of random problems")
    orc.add_argument("--steps", type=int, default=50, help="mirror-descent iterations per problem")
    sub.add_parser("report", parents=[common], help="summarise and re-verify an output directory")
    return p


def _load_spec(args) -> harness.ExperimentSpec:
    if not args.config:
        raise ConfigError("--config PATH is required for this command")
    spec = harness.parse_config(args.config)
    return harness.apply_overrides(spec, seed=args.seed, method=args.method, lam=args.lam,
                                   alpha=args.alpha, temperature=args.temperature,
                                   output_dir=args.out)


def _print_aggregate(report: harness.RunReport):
    agg = report.aggregate
    for key in ("test_acc_s", "train_acc_s", "test_acc_t", "train_acc_t"):
        a = agg[key]
        if a["mean"] is not None:
            print(f"  {key:<12} mean {a['mean']:.4f}  stdev {a['stdev']:.4f}  (n={a['n']})")


def cmd_gen_data(args) -> int:
    spec = _load_spec(args)
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in spec.seeds:
        data = harness.build_dataset(spec.dataset, seed)
        path = out / f"data_seed{seed}.csv"
        save_csv(data, path)
        print(f"wrote {path} ({data.n} rows, d={data.d}, K={data.K})")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _load_spec(args)
    if spec.teacher is None:
        raise ConfigError("train needs a teacher layer spec")
    status = EXIT_OK
    for seed in spec.seeds:
        seed_dir = Path(spec.output_dir) / f"teacher_seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        cfg = replace(spec.config, seed=seed)
        data = harness.build_dataset(spec.dataset, seed)
        try:
            traj = train_plain(spec.teacher, data, cfg, checkpoint_dir=seed_dir / "checkpoints")
        except TrainingDiverged as e:
            print(f"seed {seed}: FAILED ({e})", file=sys.stderr)
            status = EXIT_RUN
            continue
        save_checkpoint(traj.student, seed_dir / "teacher.ckpt")
        harness.emit_curves(traj, seed_dir / "curves.csv")
        harness.emit_metrics(traj, seed_dir / "metrics.jsonl")
        f = traj.final
        print(f"seed {seed}: train acc {f.train_acc_s:.4f}, test acc {f.test_acc_s:.4f}, "
              f"{len(traj.checkpoint_paths)} checkpoints in {seed_dir / 'checkpoints'}")
    return status


def cmd_distill(args) -> int:
    spec = _load_spec(args)
    report = harness.run_experiment(spec)
    print(f"method {spec.method}: {len(report.seeds) - len(report.failed)}/{len(report.seeds)} seeds ok, "
          f"report in {report.out_dir}")
    _print_aggregate(report)
    for s in report.failed:
        print(f"  seed {s.seed} FAILED: {s.error}", file=sys.stderr)
    return EXIT_RUN if report.failed else EXIT_OK


def cmd_sweep(args) -> int:
    spec = _load_spec(args)
    sweep = harness.lambda_sweep(spec, args.lambda_grid)
    print(f"{'lambda':>8} {'student_test':>13} {'teacher_train':>14} {'teacher_test':>13}")
    for r in sweep.rows:
        def fmt(v):
            return "nan" if v is None else f"{v:.4f}"
        print(f"{r['lambda']:>8.3f} {fmt(r['student_test_acc']):>13} {fmt(r['teacher_train_acc']):>14} "
              f"{fmt(r['teacher_test_acc']):>13}")
    return EXIT_RUN if any(r["failed_seeds"] for r in sweep.rows) else EXIT_OK


def cmd_oracle(args) -> int:
    if args.seeds < 1 or args.steps < 1:
        raise ConfigError("--seeds and --steps must be positive")
    base = args.seed or 0
    results = monotonicity_suite(args.seeds, args.steps, base)
    mono_ok = sum(r["ok"] for r in results)
    worst = max(r["worst_increase"] for r in results)
    print(f"tabular monotonicity: {mono_ok}/{len(results)} problems non-increasing "
          f"over {args.steps} iterations (worst step change {worst:.3e})")

    feas_bad = 0
    rng = derive_rng(base, "oracle-feasibility")
    for _ in range(args.seeds * 10):
        K = int(rng.integers(2, 9))
        q = rng.dirichlet(np.ones(K))
        y = int(rng.integers(K))
        eps = float(rng.uniform(1e-4, 1.0))
        p = constrained_step(q, y, eps)
        kl = kl_divergence(q, p)
        if kl > eps + 1e-9 or (p[y] < 1.0 and abs(kl - eps) > 1e-9):
            feas_bad += 1
    n_feas = args.seeds * 10
    print(f"trust-region feasibility: {n_feas - feas_bad}/{n_feas} steps on the KL boundary")
    ok = mono_ok == len(results) and feas_bad == 0
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_RUN


def cmd_report(args) -> int:
    out = Path(args.out or (harness.parse_config(args.config).output_dir if args.config else "runs"))
    if (out / "sweep.json").exists():
        rows = json.loads((out / "sweep.json").read_text())["rows"]
        for r in rows:
            print(json.dumps(r, sort_keys=True))
        return EXIT_OK
    if not (out / "report.json").exists():
        raise ConfigError(f"no report.json in {out}")
    stored, rebuilt = harness.recompute_aggregate(out)
    report = json.loads((out / "report.json").read_text())
    print(f"{out}: method {report['spec']['method']}, seeds {report['spec']['seeds']}")
    for key, a in stored.items():
        if a["mean"] is not None:
            print(f"  {key:<18} mean {a['mean']:.6f}  stdev {a['stdev']:.6f}  (n={a['n']})")
    consistent = all(
        (a["mean"] is None and rebuilt[k]["mean"] is None)
        or (abs(a["mean"] - rebuilt[k]["mean"]) <= 1e-12 and abs(a["stdev"] - rebuilt[k]["stdev"]) <= 1e-12)
        for k, a in stored.items())
    print("aggregates match per-seed metrics" if consistent else "aggregates DO NOT match per-seed metrics")
    return EXIT_OK if consistent else EXIT_RUN


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "distill": cmd_distill,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"prokt: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"prokt: {e}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
