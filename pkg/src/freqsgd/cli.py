"""Command-line entry point: gen-data, train, verify, analyze.

Exit codes: 0 success, 1 usage error (bad arguments, unreadable config),
2 runtime failure (including a verification suite that does not pass).
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .config import load_config_file
from .dataio import read_metrics_csv, read_tokens_csv, write_manifest
from .harness import ExperimentConfig, make_tail_distribution, planted_joint, run_experiment
from .theory import (check_unbiasedness, improvement_ratio, make_paired_instance,
                     make_random_instance, variance_report)
from .tokenspace import distribution_to_csv, joint_to_csv, make_poly_tail


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="freqsgd",
                     description="Frequency-adaptive SGD experiments and diagnostics")
    parser.add_argument("--version", action="version", version=f"freqsgd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="write a synthetic joint distribution")
    p_gen.add_argument("--tail", choices=("exp", "poly", "uniform"), default="poly")
    p_gen.add_argument("--tau", type=float, default=1.0)
    p_gen.add_argument("--nu", type=float, default=2.0)
    p_gen.add_argument("--users", type=int, default=100)
    p_gen.add_argument("--items", type=int, default=100)
    p_gen.add_argument("--dim", type=int, default=8,
                       help="hidden planted-table dimension for the labels")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True, help="output directory")

    p_train = sub.add_parser("train", help="run one training experiment")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None, help="override run.seed")
    p_train.add_argument("--out", default=None, help="override run.out")

    p_verify = sub.add_parser("verify", help="run the exact-oracle verification suite")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--out", default=None, help="directory for report.json")

    p_an = sub.add_parser("analyze", help="summarize a finished run directory")
    p_an.add_argument("run_dir")
    p_an.add_argument("--out", default=None, help="report directory, default run_dir")
    return parser


def cmd_gen_data(args) -> int:
    users = make_tail_distribution(args.tail, args.users, args.tau, args.nu)
    items = make_tail_distribution(args.tail, args.items, args.tau, args.nu)
    joint = planted_joint(users, items, args.dim, args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "joint.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(joint_to_csv(joint))
    for name, dist in (("user_dist.csv", users), ("item_dist.csv", items)):
        with open(os.path.join(args.out, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(distribution_to_csv(dist))
    write_manifest(os.path.join(args.out, "manifest.json"),
                   {"tail": args.tail, "tau": str(args.tau), "nu": str(args.nu),
                    "users": str(args.users), "items": str(args.items),
                    "dim": str(args.dim)}, args.seed)
    print(f"wrote joint.csv with {joint.support_size} cells to {args.out}")
    return 0


def cmd_train(args) -> int:
    raw = load_config_file(args.config)
    if args.seed is not None:
        raw["run.seed"] = str(args.seed)
    if args.out is not None:
        raw["run.out"] = args.out
    config = ExperimentConfig.from_mapping(raw)
    records = run_experiment(config)
    for r in records:
        print(f"epoch {r.epoch:3d}  step {r.step:7d}  "
              f"train_loss {r.train_loss:.6f}  val_auc {r.val_auc:.6f}")
    best = max(r.val_auc for r in records)
    print(f"peak validation AUC {best:.6f} over {len(records)} epochs")
    if config.out_dir:
        print(f"outputs in {config.out_dir}")
    return 0


def cmd_verify(args) -> int:
    checks: list[tuple[str, bool, str]] = []

    def check(name: str, passed: bool, detail: str = ""):
        checks.append((name, bool(passed), detail))

    rng = np.random.default_rng(args.seed)
    worst_dev = 0.0
    report = None
    for _ in range(5):
        theta, joint = make_random_instance(rng)
        worst_dev = max(worst_dev, check_unbiasedness(theta, joint))
        report = variance_report(theta, joint)
        check("variance sandwich (lower <= exact <= upper)",
              report.lower_bound <= report.exact_variance + 1e-12
              and report.exact_variance <= report.upper_bound + 1e-12,
              f"lower={report.lower_bound:.6g} exact={report.exact_variance:.6g} "
              f"upper={report.upper_bound:.6g}")
    check("sparse gradient unbiasedness (exact enumeration)", worst_dev < 1e-10,
          f"max deviation {worst_dev:.3g}")

    theta_p, joint_p = make_paired_instance(rng, 6)
    rep_p = variance_report(theta_p, joint_p)
    check("one-item-per-user collapse: exact variance equals the lower bound",
          abs(rep_p.exact_variance - rep_p.lower_bound) < 1e-10
          and float(np.max(rep_p.per_token_sigma2)) < 1e-12,
          f"gap {abs(rep_p.exact_variance - rep_p.lower_bound):.3g}")

    from .tokenspace import make_uniform
    uni = make_uniform(8)
    gammas = [improvement_ratio(uni, uni, np.ones(16), k) for k in range(16)]
    check("uniform frequencies give unit rate-bound ratio",
          max(abs(g - 1.0) for g in gammas) < 1e-12,
          f"max |gamma-1| = {max(abs(g - 1.0) for g in gammas):.3g}")

    cap_const = 2.0 / (1.0 - math.exp(-1.0))
    grid_ok = True
    detail = []
    for tau in (0.1, 0.5, 1.0, 2.0):
        a = math.exp(-tau)
        for size in (10, 100, 1000):
            coef = (1.0 + a) / (1.0 + a**size)
            holds = coef <= (1.0 + a) / (1.0 - a) and (size < 1.0 / tau or coef <= cap_const)
            grid_ok &= holds
            detail.append(f"tau={tau},S={size}:{coef:.3f}")
    check("geometric-tail rate-bound coefficient within the closed-form constants",
          grid_ok, " ".join(detail[:4]) + " ...")
    poly_ok = True
    for nu in (2.0, 3.0, 4.0):
        for size in (10, 100, 1000):
            dist = make_poly_tail(size, nu)
            n = np.arange(1, size + 1, dtype=np.float64)
            lhs = 2.0 * dist.probs / (2.0 * np.sum(dist.probs**2))
            poly_ok &= bool(np.all(lhs <= 16.0 * n**-nu))
    check("power-tail rate-bound within the 16-factor", poly_ok, "")

    width = max(len(name) for name, _, _ in checks)
    print("verification suite (seed %d)" % args.seed)
    print("-" * (width + 10))
    failures = 0
    for name, passed, detail_s in checks:
        mark = "PASS" if passed else "FAIL"
        failures += not passed
        line = f"[{mark}] {name.ljust(width)}"
        if detail_s:
            line += f"  {detail_s}"
        print(line)
    print("-" * (width + 10))
    print(f"{len(checks) - failures}/{len(checks)} checks passed")

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        payload = report.to_jsonable()
        payload["checks"] = [{"name": n, "passed": p, "detail": d} for n, p, d in checks]
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0 if failures == 0 else 2


def cmd_analyze(args) -> int:
    from . import figures
    run_dir = args.run_dir
    out_dir = args.out or run_dir
    records = read_metrics_csv(os.path.join(run_dir, "metrics.csv"))
    tokens = read_tokens_csv(os.path.join(run_dir, "tokens.csv"))
    os.makedirs(out_dir, exist_ok=True)

    p_hat = np.array([t["p_hat"] for t in tokens])
    acc = np.array([t["accumulator_sum"] for t in tokens])
    pearson_r = None
    if np.ptp(acc) > 0.0 and np.ptp(p_hat) > 0.0:
        from scipy.stats import pearsonr
        pearson_r = float(pearsonr(acc, p_hat)[0])

    denom = math.sqrt(float(np.sum(p_hat**2)))
    gamma = np.sqrt(2.0 * p_hat) / denom if denom > 0 else np.zeros_like(p_hat)
    ranks = np.array([t["rank"] for t in tokens])
    order = np.argsort(ranks)

    payload = {
        "pearson_r": pearson_r,
        "gamma": [float(g) for g in gamma],
        "peak_val_auc": max(r.val_auc for r in records),
        "epochs_run": len(records),
    }
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    figures.render_curves(records, os.path.join(out_dir, "curves.png"))
    figures.render_token_scatter(tokens, os.path.join(out_dir, "tokens.png"))
    figures.render_gamma(ranks[order], gamma[order], os.path.join(out_dir, "gamma.png"))
    print(f"report.json and figures written to {out_dir}")
    return 0


def cli_dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        if args.command == "train":
            try:
                return cmd_train(args)
            except (FileNotFoundError, ValueError) as exc:
                print(f"freqsgd train: {exc}", file=sys.stderr)
                return 1 if isinstance(exc, FileNotFoundError) else 2
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "verify":
            return cmd_verify(args)
        return cmd_analyze(args)
    except Exception as exc:  # runtime failure contract
        print(f"freqsgd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))
