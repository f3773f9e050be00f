"""Command line front end: ``derlab run | report | sweep``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import statistics
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .config import dump_toml, load_config
from .errors import ConfigError, DerlabError

log = logging.getLogger("derlab")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SWEEP_KEYS = ("train.lambda_a", "train.lambda_s")
_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 by itself; raising keeps the exit path in one place
    def error(self, message):
        raise UsageError(message)


def _setup_logging():
    name = os.environ.get("DERLAB_LOG", "error").lower()
    logging.basicConfig(level=_LEVELS.get(name, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if name not in _LEVELS:
        log.error("DERLAB_LOG=%s not understood, using 'error'", name)


def _execute(cfg, out_dir):
    """Run one experiment and write results plus the config echo."""
    from .experiment import run_experiment

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = copy.deepcopy(cfg)
    cfg.output = replace(cfg.output, dir=str(out))
    (out / "config.toml").write_text(dump_toml(cfg))
    bundle = run_experiment(cfg, out_dir=out)
    return bundle.summary


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set or ())
    out = args.out or cfg.output.dir or "results"
    summary = _execute(cfg, out)
    print(f"avg {summary['avg']:.4f}  last {summary['last']:.4f}  "
          f"mean_params {summary['mean_params']:.1f}  -> {Path(out) / 'results.json'}")
    return EXIT_OK


def _read_results(paths):
    runs = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            p = p / "results.json"
        try:
            doc = json.loads(p.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read results file {p}: {exc}") from None
        if "config_hash" not in doc or "steps" not in doc:
            raise ConfigError(f"{p} is not a results file")
        runs.append(doc)
    return runs


def _mean_std(values):
    values = list(values)
    mean = statistics.fmean(values)
    return mean, (statistics.stdev(values) if len(values) > 1 else 0.0)


def aggregate(runs) -> dict:
    """Group runs by config hash; per step mean and sample stdev of the
    accuracy, and per group the (mean params, Avg) frontier point."""
    groups = defaultdict(list)
    for r in runs:
        groups[r["config_hash"]].append(r)
    out = {}
    for h, rs in sorted(groups.items()):
        n_steps = min(len(r["steps"]) for r in rs)
        steps = []
        for k in range(n_steps):
            m, s = _mean_std(r["steps"][k]["acc"] for r in rs)
            steps.append({"step": k + 1, "n_classes": rs[0]["steps"][k]["n_classes"],
                          "acc_mean": m, "acc_std": s})
        avg_m, avg_s = _mean_std(r["summary"]["avg"] for r in rs)
        par_m, _ = _mean_std(r["summary"]["mean_params"] for r in rs)
        out[h] = {"runs": len(rs), "steps": steps, "avg_mean": avg_m, "avg_std": avg_s,
                  "mean_params": par_m}
    return out


def cmd_report(args) -> int:
    if not args.files:
        raise UsageError("report needs at least one results file")
    runs = _read_results(args.files)
    hashes = {r["config_hash"] for r in runs}
    if len(hashes) > 1 and not args.force:
        raise ConfigError(f"results come from {len(hashes)} different configs "
                          "(pass --force to report them side by side)")
    agg = aggregate(runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "accuracy_vs_step.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_hash", "runs", "step", "n_classes", "acc_mean", "acc_std"])
        for h, g in agg.items():
            for s in g["steps"]:
                w.writerow([h, g["runs"], s["step"], s["n_classes"], repr(s["acc_mean"]),
                            repr(s["acc_std"])])
    with open(out / "params_vs_avg.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_hash", "runs", "mean_params", "avg_mean", "avg_std"])
        for h, g in agg.items():
            w.writerow([h, g["runs"], repr(g["mean_params"]), repr(g["avg_mean"]),
                        repr(g["avg_std"])])

    for h, g in agg.items():
        print(f"config {h}  runs {g['runs']}  avg {100 * g['avg_mean']:.2f} +/- "
              f"{100 * g['avg_std']:.2f}  params {g['mean_params']:.1f}")
        for s in g["steps"]:
            print(f"  step {s['step']:>2}  classes {s['n_classes']:>4}  "
                  f"acc {100 * s['acc_mean']:6.2f} +/- {100 * s['acc_std']:.2f}")
    return EXIT_OK


def _sweep_one(job):
    cfg, out_dir = job
    return _execute(cfg, out_dir)


def cmd_sweep(args) -> int:
    if args.key not in SWEEP_KEYS:
        raise ConfigError(f"sweep key must be one of {', '.join(SWEEP_KEYS)}", key=args.key)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma separated numbers, got {args.values!r}") from None
    if not values:
        raise UsageError("--values is empty")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")

    field_name = args.key.split(".", 1)[1]
    base = load_config(args.config, args.set or ())
    root = Path(args.out or base.output.dir or "sweep")
    jobs = []
    for v in values:
        cfg = copy.deepcopy(base)
        cfg.train = replace(cfg.train, **{field_name: v})
        jobs.append((cfg, root / f"{field_name}={v:g}"))

    if args.jobs == 1 or len(jobs) == 1:
        summaries = [_sweep_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_sweep_one, jobs))

    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([field_name, "avg", "mean_params", "results"])
        for v, s, (_, d) in zip(values, summaries, jobs):
            w.writerow([repr(v), repr(s["avg"]), repr(s["mean_params"]), str(d / "results.json")])
            print(f"{field_name}={v:g}  avg {s['avg']:.4f}  mean_params {s['mean_params']:.1f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="derlab", description="Class-incremental experiments with expandable "
                                          "representations.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config")
    r.add_argument("--set", action="append", metavar="KEY=VALUE")
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="aggregate results files")
    rep.add_argument("files", nargs="*")
    rep.add_argument("--force", action="store_true")
    rep.add_argument("--out", default=".")
    rep.set_defaults(func=cmd_report)

    sw = sub.add_parser("sweep", help="repeat a run over loss weights")
    sw.add_argument("config")
    sw.add_argument("--key", required=True)
    sw.add_argument("--values", required=True)
    sw.add_argument("--jobs", type=int, default=1)
    sw.add_argument("--set", action="append", metavar="KEY=VALUE")
    sw.add_argument("--out")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("missing command (run, report or sweep)")
        return args.func(args)
    except UsageError as exc:
        print(f"derlab: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"derlab: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DerlabError as exc:
        print(f"derlab: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"derlab: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
