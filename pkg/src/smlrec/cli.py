"""Command-line entry point: ``smlrec <command> [options]``.

Commands: synth, split, train, evaluate, gradcheck, bench, report.
Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import checkpoint, plotting
from .config import ABLATIONS, STRATEGIES, VARIANTS, RunConfig, TrainConfig, config_from_kv, config_to_kv
from .data import (SyntheticSpec, assign_roles, default_roles, filter_inactive, generate_synthetic,
                   load_dataset, parse_interactions, read_kv, save_dataset, split_by_count,
                   split_by_window, write_kv)
from .errors import ConfigError, DataError
from .evaluation import average, metric_names, read_report_tsv, write_reports
from .experiment import (RunResult, load_strategy, run_serving, run_strategy, run_training,
                         training_periods, write_log)
from .gradcheck import run_suite

log = logging.getLogger("smlrec")

OUT_ENV = "SMLREC_OUT"


class UsageError(Exception):
    """Bad arguments or missing inputs (exit code 2)."""


def default_out(name: str) -> str:
    return str(Path(os.environ.get(OUT_ENV, "runs")) / name)


# -- config plumbing --------------------------------------------------------

# flags that map straight onto TrainConfig fields
TRAIN_FLAGS = {
    "seed": int, "d": int, "variant": str, "n1": int, "n2": int, "df": int,
    "lambda1": float, "lambda2": float, "lr_hat": float, "lr_theta": float, "lr_mf": float,
    "step1_epochs": int, "step2_epochs": int, "max_outer": int, "batch_size": int,
    "epochs_full": int, "epochs_finetune": int, "epochs_reservoir": int, "epochs_pretrain": int,
    "reservoir_capacity": int, "pretrain_periods": int, "early_stop_patience": int,
}


def add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    for name, typ in TRAIN_FLAGS.items():
        kw = {"choices": VARIANTS} if name == "variant" else {}
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, **kw)
    p.add_argument("--freeze-negatives", action="store_true", default=None)


def train_config(args) -> TrainConfig:
    """Built-in defaults, then the config file, then ``--set`` pairs, then named flags."""
    kv = {}
    extra = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        for k, v in read_kv(path).items():
            (extra if k in ("strategy", "ablations", "dataset") else kv)[k] = v
    for pair in getattr(args, "set", []) or []:
        if "=" not in pair:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        k, v = pair.split("=", 1)
        kv[k.strip()] = v.strip()
    cfg = config_from_kv(kv)
    flags = {k: getattr(args, k) for k in TRAIN_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "freeze_negatives", None):
        flags["freeze_negatives"] = True
    cfg = cfg.replace(**flags)
    args._file_extra = extra
    return cfg


def _dataset(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"dataset not found: {p}")
    try:
        return load_dataset(p)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None


# -- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_users=args.users, n_items=args.items, periods=args.periods,
                         interactions_per_period=args.per_period, factor_dim=args.factor_dim,
                         drift_rate=args.drift, arrival_rate=args.arrival, seed=args.seed)
    roles = assign_roles(args.periods, args.valid, args.test)
    ds = generate_synthetic(spec, roles)
    out = args.out or default_out("synthetic")
    manifest = save_dataset(ds, out, {"factor_dim": args.factor_dim})
    print(f"wrote {manifest} ({sum(ds.sizes())} interactions, {len(ds)} periods)")
    return 0


def cmd_split(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise UsageError(f"input file not found: {path}")
    log_ = parse_interactions(path)
    if args.min_user or args.min_item:
        log_ = filter_inactive(log_, args.min_user, args.min_item)
    if args.scheme == "count":
        if not args.periods:
            raise UsageError("--scheme count needs --periods")
        n = args.periods
    else:
        cuts = [float(c) for c in args.cuts.split(",") if c.strip()]
        n = None
    roles = None
    if args.valid is not None or args.test is not None:
        roles = lambda n_: assign_roles(n_, args.valid or 0, args.test or 0)  # noqa: E731
    if args.scheme == "count":
        ds = split_by_count(log_, n, roles(n) if roles else default_roles(n, "count"))
    else:
        ds = split_by_window(log_, cuts, args.tz_offset)
        if roles:
            ds.roles = roles(len(ds))
            ds.validate()
    meta = {"source": str(path), "min_user": args.min_user, "min_item": args.min_item}
    out = args.out or default_out("split")
    manifest = save_dataset(ds, out, meta)
    print(f"wrote {manifest} ({sum(ds.sizes())} interactions, {len(ds)} periods)")
    return 0


def _run_config(args, cfg) -> RunConfig:
    extra = getattr(args, "_file_extra", {})
    strategy = args.strategy or extra.get("strategy", "sml")
    ablations = tuple(args.ablation or [])
    if not ablations and extra.get("ablations"):
        ablations = tuple(a for a in extra["ablations"].split(",") if a)
    return RunConfig(train=cfg, strategy=strategy, ablations=ablations, dataset=str(Path(args.data).resolve()),
                     out_dir=str(args.out))


def _write_run_config(path: Path, rc: RunConfig) -> None:
    write_kv(path, {"strategy": rc.strategy, "ablations": ",".join(rc.ablations), "dataset": rc.dataset,
                    **config_to_kv(rc.train)})


def _read_run_config(run_dir: Path) -> RunConfig:
    f = run_dir / "run_config.txt"
    if not f.exists():
        raise UsageError(f"no run_config.txt in {run_dir}; run `train` first")
    kv = read_kv(f)
    strategy = kv.pop("strategy")
    ablations = tuple(a for a in kv.pop("ablations", "").split(",") if a)
    dataset = kv.pop("dataset")
    return RunConfig(train=config_from_kv(kv), strategy=strategy, ablations=ablations, dataset=dataset,
                     out_dir=str(run_dir))


def _method_name(rc: RunConfig) -> str:
    return "-".join([rc.strategy, *rc.ablations])


def _write_costs(path: Path, costs: list[dict], with_wall: bool) -> None:
    cols = ["method", "period", "phase", "examples_touched"] + (["wall_time"] if with_wall else [])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for c in costs:
            w.writerow([f"{c[k]:.6f}" if k == "wall_time" else c[k] for k in cols])


def cmd_train(args) -> int:
    cfg = train_config(args)
    args.out = Path(args.out or default_out("train"))
    rc = _run_config(args, cfg)
    ds = _dataset(args.data)
    eff = rc.effective()
    training_periods(ds, eff)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_run_config(args.out / "run_config.txt", rc)
    result = run_training(ds, eff, rc.strategy, _method_name(rc), checkpoint_dir=args.out / "checkpoints")
    write_log(args.out / "train_log.ndjson", result.records)
    _write_costs(args.out / "train_costs.tsv", result.costs, with_wall=False)
    last = training_periods(ds, eff)[-1]
    print(f"trained {_method_name(rc)} through period {last}; checkpoints in {args.out / 'checkpoints'}")
    return 0


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    rc = _read_run_config(run_dir)
    if args.freeze_transfer:
        if rc.strategy != "sml":
            raise UsageError("--freeze-transfer only applies to --strategy sml runs")
        if "frozen-transfer" not in rc.ablations:
            rc.ablations = (*rc.ablations, "frozen-transfer")
    eff = rc.effective()
    ds = _dataset(rc.dataset)
    last = training_periods(ds, eff)[-1]
    ck = run_dir / "checkpoints" / f"period_{last}.smlc"
    if not ck.exists():
        raise UsageError(f"missing checkpoint {ck}")
    strat = load_strategy(rc.strategy, eff, checkpoint.load(ck))
    method = _method_name(rc)
    out = Path(args.out) if args.out else run_dir / ("eval-frozen" if args.freeze_transfer else "eval")
    out.mkdir(parents=True, exist_ok=True)
    result = run_serving(ds, strat, eff, method, RunResult(method, strategy=strat),
                         checkpoint_dir=out / "checkpoints")
    _emit_reports(out, ds, [result])
    _write_costs(out / "serve_costs.tsv", result.costs, with_wall=False)
    if rc.strategy == "sml":
        write_log(out / "serve_log.ndjson", strat.state.records)
    avg = result.test_average(ds)
    print("\t".join(["method", *metric_names(eff.ks)]))
    print("\t".join([method, *[f"{avg[m]:.4f}" for m in metric_names(eff.ks)]]))
    return 0


def _emit_reports(out: Path, ds, results: list[RunResult]) -> None:
    reports = [r for res in results for r in res.reports]
    averages = {res.method: res.test_average(ds) for res in results}
    write_reports(out, reports, averages)
    rows = [r.record() for r in reports]
    if rows:
        plotting.metric_by_period(rows, out / "recall_by_period.png", "recall@10")


def cmd_gradcheck(args) -> int:
    rows = run_suite(trials=args.trials, tol=args.tol, seed=args.seed, h=args.h, perturb=args.perturb)
    failed = 0
    print("trial\ttensor\tmax_rel_error\tstatus")
    for k, name, rep in rows:
        status = "pass" if rep.passed else "FAIL"
        failed += not rep.passed
        print(f"{k}\t{name}\t{rep.max_rel_error:.3e}\t{status}")
    worst = max(rep.max_rel_error for _, _, rep in rows)
    print(f"# {len(rows) - failed}/{len(rows)} passed, worst relative error {worst:.3e} (tol {args.tol:g})")
    return 1 if failed else 0


def cmd_bench(args) -> int:
    cfg = train_config(args)
    ds = _dataset(args.data)
    out = Path(args.out or default_out("bench"))
    out.mkdir(parents=True, exist_ok=True)
    kinds = [s for s in args.strategies.split(",") if s]
    for k in kinds:
        if k not in STRATEGIES:
            raise UsageError(f"unknown strategy {k!r}")
    costs = []
    for k in kinds:
        res = run_strategy(ds, cfg, k)
        costs.extend(res.costs)
        log.info("%s done", k)
    _write_costs(out / "costs.tsv", costs, with_wall=True)
    plotting.cost_by_period(costs, out / "costs.png")
    if "full" in kinds and "sml" in kinds:
        wall = {(c["method"], c["period"]): c["wall_time"] for c in costs}
        with (out / "ratio.tsv").open("w") as fh:
            fh.write("period\tfull_over_sml\n")
            for p in sorted({c["period"] for c in costs}):
                if ("full", p) in wall and ("sml", p) in wall:
                    fh.write(f"{p}\t{wall['full', p] / max(wall['sml', p], 1e-12):.3f}\n")
    print(Path(out / "costs.tsv").read_text(), end="")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out or default_out("report"))
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    F1s = {}
    for run in args.runs:
        run = Path(run)
        tsvs = sorted(run.glob("**/report.tsv"))
        if not tsvs:
            raise UsageError(f"no report.tsv under {run}; run `evaluate` first")
        for t in tsvs:
            rows.extend(read_report_tsv(t))
        cks = sorted(run.glob("**/checkpoints/period_*.smlc"), key=lambda p: int(p.stem.split("_")[1]))
        if cks:
            tensors = checkpoint.load(cks[-1])
            for g in ("user", "item"):
                if f"{g}.F1" in tensors:
                    F1s[f"{run.name}:{g}"] = tensors[f"{g}.F1"]
    with (out / "runs.tsv").open("w", newline="") as fh:
        cols = list(rows[0].keys())
        w = csv.DictWriter(fh, cols, delimiter="\t", lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    metric = args.metric
    plotting.metric_by_period(rows, out / f"{metric.replace('@', '_at_')}.png", metric)
    if F1s:
        with (out / "filters.tsv").open("w") as fh:
            fh.write("network\tfilter\tprev\tnew\tproduct\n")
            for name in sorted(F1s):
                for j, row in enumerate(F1s[name]):
                    fh.write(f"{name}\t{j}\t" + "\t".join(f"{v:.6f}" for v in row) + "\n")
        plotting.filters(F1s, out / "filters.png")
    by_method: dict[str, list[float]] = {}
    for r in rows:
        by_method.setdefault(r["method"], []).append(float(r[metric]))
    print(f"method\tperiods\tmean_{metric}")
    for m in sorted(by_method):
        print(f"{m}\t{len(by_method[m])}\t{np.mean(by_method[m]):.4f}")
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smlrec", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic drifting-interest dataset")
    s.add_argument("--out")
    s.add_argument("--users", type=int, default=500)
    s.add_argument("--items", type=int, default=300)
    s.add_argument("--periods", type=int, default=15)
    s.add_argument("--per-period", type=int, default=2000)
    s.add_argument("--factor-dim", type=int, default=8)
    s.add_argument("--drift", type=float, default=0.5)
    s.add_argument("--arrival", type=float, default=0.0)
    s.add_argument("--valid", type=int, default=2)
    s.add_argument("--test", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="split a user<TAB>item<TAB>timestamp log into periods")
    s.add_argument("input")
    s.add_argument("--out")
    s.add_argument("--scheme", choices=("count", "window"), default="count")
    s.add_argument("--periods", type=int)
    s.add_argument("--cuts", default="0,10,17", help="time-of-day cut points in hours")
    s.add_argument("--tz-offset", type=float, default=0.0, help="hours added to UTC before windowing")
    s.add_argument("--min-user", type=int, default=0)
    s.add_argument("--min-item", type=int, default=0)
    s.add_argument("--valid", type=int)
    s.add_argument("--test", type=int)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="pretrain, then retrain through the training periods")
    s.add_argument("--data", required=True, help="dataset directory written by synth/split")
    s.add_argument("--out")
    s.add_argument("--strategy", choices=STRATEGIES)
    s.add_argument("--ablation", action="append", choices=ABLATIONS)
    add_train_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="test-then-update over the validation and test periods")
    s.add_argument("--run", required=True, help="output directory of `train`")
    s.add_argument("--out")
    s.add_argument("--freeze-transfer", action="store_true", help="no transfer updates while serving")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference check of the meta-learning gradients")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="per-period retraining cost of each strategy")
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--strategies", default="full,sml")
    add_train_flags(s)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", help="merge evaluation reports, plot them, dump learned filters")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out")
    s.add_argument("--metric", default="recall@10")
    s.set_defaults(func=cmd_report)
    return p


def _limits(threads):
    if not threads:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _limits(args.threads):
            return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"smlrec {args.command}: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"smlrec {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
