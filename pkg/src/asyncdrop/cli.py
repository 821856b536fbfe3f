"""Command line: ``asyncdrop run|sweep|check|compare``.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 failed check.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, _convert, HOME, parse_config
from .datagen import gen_synthetic
from .errors import AsyncDropError, ConfigError
from .experiment import run_experiment, run_theory
from .masking import mask_moment_stats, theta
from .metrics import compare_runs, format_table, read_metrics
from .theory import indicator_expectation, initial_mse_check, ntk_infty

log = logging.getLogger("asyncdrop")


def _load(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(out_dir=args.out)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    status = run_experiment(cfg)
    print(f"wrote {cfg.out_dir}")
    return status


def _parse_sets(items):
    grid = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=v1,v2,..., got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in HOME:
            raise ConfigError(f"unknown key {key!r}")
        try:
            grid[key] = [_convert(key, v.strip()) for v in raw.split(",")]
        except ValueError:
            raise ConfigError(f"bad value in --set {item!r}") from None
    return grid


def cmd_sweep(args) -> int:
    base = _load(args)
    grid = _parse_sets(args.set)
    keys = list(grid)
    status = 0
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        changes = dict(zip(keys, combo))
        label = "_".join(f"{k}-{v}" for k, v in changes.items()) or "base"
        out = Path(base.out_dir) / f"{i:03d}_{label}"
        cfg = base.replace(**changes)
        status = max(status, run_experiment(cfg, out))
        print(f"wrote {out}")
    return status


def cmd_check(args) -> int:
    """Desk-scale theory checks; exit 3 if any fails."""
    cfg = _load(args)
    rng = np.random.default_rng(cfg.seed)
    results = []

    data = gen_synthetic(16, 2, 4, 2, 1.0, cfg.seed)
    ntk = ntk_infty(data, 2)
    results.append(("lambda0 > 1e-10", ntk.lambda0 > 1e-10, f"{ntk.lambda0:.6g}"))

    worst = 0.0
    for _ in range(5):
        x, x2 = rng.standard_normal((2, 4))
        w = rng.standard_normal((200_000, 4))
        mc = np.mean((w @ x >= 0) & (w @ x2 >= 0))
        worst = max(worst, abs(mc - indicator_expectation(x, x2)))
    results.append(("arc-cosine vs Monte Carlo <= 1e-2", worst <= 1e-2, f"{worst:.3g}"))

    for xi, s in ((0.5, 2), (0.75, 1)):
        st = mask_moment_stats(xi, s, 100_000, rng)
        th = theta(xi, s)
        ok = abs(st.mean_nu - xi) <= 4 * st.mean_se and abs(st.theta_empirical - th) <= 4 * st.theta_se
        results.append((f"mask moments xi={xi} S={s}", ok,
                        f"mean={st.mean_nu:.4f} theta={st.theta_empirical:.4f}"))

    rep = initial_mse_check(data, 2, 64, inits=200, seed=cfg.seed)
    results.append(("initial MSE bound", rep.passed, f"{rep.mean:.4g} <= {rep.allowance:.4g}"))

    theory_cfg = RunConfig(model="cnn", mode="theory", n=16, d_hat=2, p=4, q=2, width=512,
                           keep_rate=0.5, subnetworks=2, max_staleness=4, mask_mode="bernoulli",
                           max_merges=500, seed=cfg.seed)
    _, report, _ = run_theory(theory_cfg)
    results.append(("convergence envelope", report.compliant, report.summary()))

    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 3


def cmd_compare(args) -> int:
    traces = {Path(p).parent.name or p: read_metrics(p) for p in args.metrics}
    rows = compare_runs(traces, args.metric, args.threshold, args.lower_is_better)
    sys.stdout.write(format_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asyncdrop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")

    common(sub.add_parser("run", help="run one configuration"))
    sweep = sub.add_parser("sweep", help="cartesian sweep over config keys")
    common(sweep)
    sweep.add_argument("--set", action="append", metavar="KEY=V1,V2")
    common(sub.add_parser("check", help="theory checks at desk scale"))
    cmp_ = sub.add_parser("compare", help="time/communication to a target metric")
    cmp_.add_argument("metrics", nargs="+", help="metrics.csv files")
    cmp_.add_argument("--metric", default="test_accuracy")
    cmp_.add_argument("--threshold", type=float)
    cmp_.add_argument("--lower-is-better", action="store_true")
    return parser


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "check": cmd_check, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (AsyncDropError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
