"""Command-line entry point.

Commands: generate-data, train, evaluate, ablate, report, plot, validate-layout.
Exit codes: 0 success, 1 configuration error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from pathlib import Path

import torch

from . import data as mdata
from .checkpoint import CheckpointError, load_arrays
from .config import PROFILES, RunConfig, format_key_table
from .encoder import NumericError
from .plotting import plot_eta, plot_losses, plot_table_bars
from .report import Table, ablation_table, load_reports, results_table, terms_label, write_table
from .trainer import (
    ConfigError,
    DomainData,
    evaluate_top1,
    load_checkpoint,
    read_metrics_csv,
    read_report,
    run_ablation,
    train_mtda,
)

log = logging.getLogger("mensa")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
RUNTIME_ERRORS = (NumericError, mdata.DataError, CheckpointError, FileNotFoundError, OSError)


class UsageError(Exception):
    """Raised for problems with the invocation itself (exit code 1)."""


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", action="append", default=[], metavar="FILE",
                   help="key = value config file (repeatable; later files win)")
    g.add_argument("--seed", type=int, help="master seed (config key 'seed')")
    g.add_argument("--profile", choices=PROFILES, default="desk", help="default sizes (default: desk)")
    g.add_argument("--out", help="output directory (config key 'out')")
    g.add_argument("--force", action="store_true", help="overwrite existing outputs")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    g.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    g.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    return p


def _train_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", help="dataset root (config key 'data.root')")
    p.add_argument("--mixup", help="mixup strategy: none, sep, mensa, factor, concat, inter")
    p.add_argument("--mode", help="mtda, stda, no_adaptation or supervised")
    p.add_argument("--epochs", type=int, help="epochs per fold")


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="mensa", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog=format_key_table())
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                              formatter_class=argparse.RawDescriptionHelpFormatter, epilog=format_key_table())

    add("generate-data", "write the three-domain synthetic benchmark (--out defaults to data.root)")

    p = add("train", "train and evaluate over all folds; writes checkpoint, metrics.csv and report.json")
    _train_flags(p)

    p = add("evaluate", "top-1 accuracy of a run's checkpoint on the test splits")
    p.add_argument("run_dir")
    p.add_argument("--data", help="dataset root (config key 'data.root')")

    p = add("ablate", "one run per nonempty subset of {dc, mmd, mix}; writes ablation.md/.csv/.png")
    _train_flags(p)
    p.add_argument("--aggregators", default="lse", help="comma list from {lse, sum} (default: lse)")

    p = add("report", "compare finished runs in a methods-by-pairs table (markdown, CSV, PNG)")
    p.add_argument("run_dirs", nargs="+")

    p = add("plot", "loss curves and eta schedule of a run")
    p.add_argument("run_dir")

    p = add("validate-layout", "check a dataset root against the <domain>/<class>/<split>/*.npy layout")
    p.add_argument("root")
    return parser


def _parse_sets(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args, base_files=()) -> RunConfig:
    overrides = _parse_sets(args.set)
    for attr, key in (("seed", "seed"), ("out", "out"), ("data", "data.root"), ("epochs", "train.epochs"),
                      ("mode", "experiment.mode")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "mixup", None) is not None:
        overrides["mixup.strategy"] = args.mixup
    return RunConfig.build(args.profile, list(base_files) + list(args.config), overrides)


def _prepare_out(path: Path, force: bool):
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def load_datasets(cfg: RunConfig, names=None) -> dict:
    root = Path(cfg["data.root"])
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} not found; run 'mensa generate-data' first")
    names = names or [cfg["data.source"]] + cfg["data.targets"]
    n, seed = cfg["data.num_points"], cfg["seed"]
    out = {}
    for d, name in enumerate(names):
        out[name] = DomainData(mdata.load_domain(root, name, "train", n, seed, d),
                               mdata.load_domain(root, name, "test", n, seed, d))
    return out


def _print_rows(rows, stream=None):
    w = csv.writer(stream or sys.stdout, lineterminator="\n")
    for r in rows:
        w.writerow(r)


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(args) -> int:
    cfg = resolve_config(args)
    root = Path(args.out) if args.out else Path(cfg["data.root"])
    bench = cfg.benchmark()
    if root.exists() and any(root.iterdir()):
        if not args.force:
            raise UsageError(f"output directory {root} is not empty; pass --force to overwrite")
        for dom in bench.domains:
            if (root / dom.name).is_dir():
                shutil.rmtree(root / dom.name)
    root.mkdir(parents=True, exist_ok=True)
    written = mdata.write_benchmark(bench, root)
    _print_rows([("domain", "train", "test", "path")])
    for path in written:
        man = mdata.read_manifest(path / "manifest.txt")
        _print_rows([(man["domain"], man["count.train"], man["count.test"], str(path))])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg["out"])
    _prepare_out(out, args.force)
    spec, tcfg = cfg.experiment_spec(), cfg.train_config()
    names = [spec.source] + list(spec.targets)
    datasets = load_datasets(cfg, names)
    (out / "config.txt").write_text(cfg.dump())
    _, report = train_mtda(spec, tcfg, datasets, out)
    _print_rows([("method", "domain", "mean", "std")])
    _print_rows([(report.method, t, f"{report.per_target[t]['mean']:.4f}", f"{report.per_target[t]['std']:.4f}")
                 for t in report.targets])
    _print_rows([(report.method, "average", f"{report.average:.4f}", ""),
                 (report.method, f"{report.source}(source)", f"{report.source_accuracy['mean']:.4f}",
                  f"{report.source_accuracy['std']:.4f}")])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = Path(args.run_dir)
    base = [run / "config.txt"] if (run / "config.txt").is_file() else []
    cfg = resolve_config(args, base)
    ckpts = sorted(run.glob("model*.ckpt"))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoint in {run}")
    rows = [("checkpoint", "domain", "accuracy")]
    for path in ckpts:
        header, _ = load_arrays(path)
        state = load_checkpoint(path)
        names = [cfg["data.source"]] + list(header["targets"])
        datasets = load_datasets(cfg, names)
        for name in names:
            acc = evaluate_top1(state.model, datasets[name].test, cfg["train.eval_batch_size"])
            rows.append((path.name, name, f"{acc:.4f}"))
    _print_rows(rows)
    with open(run / "evaluation.csv", "w", newline="") as fh:
        _print_rows(rows, fh)
    return EXIT_OK


def _ablation_bar_table(rows) -> Table:
    base = results_table([rep for _, _, rep in rows])
    labels = [terms_label(s) + ("" if agg == "lse" else f" ({agg})") for s, agg, _ in rows]
    return Table(["Loss terms"] + base.header[1:], [[lab] + r[1:] for lab, r in zip(labels, base.rows)])


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg["out"])
    _prepare_out(out, args.force)
    aggs = tuple(a.strip() for a in args.aggregators.split(",") if a.strip())
    bad = [a for a in aggs if a not in ("lse", "sum")]
    if bad or not aggs:
        raise ConfigError(f"--aggregators must be drawn from lse, sum; got {args.aggregators!r}")
    spec, tcfg = cfg.experiment_spec(), cfg.train_config()
    datasets = load_datasets(cfg, [spec.source] + list(spec.targets))
    (out / "config.txt").write_text(cfg.dump())
    rows = run_ablation(spec, tcfg, datasets, aggregators=aggs, out_dir=out)
    table = ablation_table(rows)
    write_table(table, out, "ablation")
    plot_table_bars(_ablation_bar_table(rows), out / "ablation.png")
    sys.stdout.write(table.to_csv())
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = resolve_config(args)
    found = load_reports(args.run_dirs)
    if not found:
        raise FileNotFoundError("none of the given run directories contains report.json")
    table = results_table([r for _, r in found])
    out = Path(args.out) if args.out else Path("report")
    out.mkdir(parents=True, exist_ok=True)
    write_table(table, out, "table")
    plot_table_bars(table, out / "table.png")
    sys.stdout.write(table.to_csv())
    return EXIT_OK


def cmd_plot(args) -> int:
    resolve_config(args)
    run = Path(args.run_dir)
    metrics = run / "metrics.csv"
    if not metrics.is_file():
        raise FileNotFoundError(f"no metrics.csv in {run}")
    try:
        cols = read_metrics_csv(metrics)
    except ValueError as exc:
        raise mdata.DataError(str(exc)) from exc
    s, f = 0.1, 0.9
    if (run / "report.json").is_file():
        sched = read_report(run / "report.json").meta.get("schedule", {})
        s, f = sched.get("s", s), sched.get("f", f)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    plot_losses(cols, out / "loss_curves.png")
    plot_eta(cols, out / "eta.png", s, f)
    _print_rows([("figure", "path"), ("losses", str(out / "loss_curves.png")), ("eta", str(out / "eta.png"))])
    return EXIT_OK


def cmd_validate_layout(args) -> int:
    counts, problems = mdata.validate_layout(args.root)
    _print_rows([("entry", "count")] + sorted(counts.items()))
    for p in problems:
        print(f"problem: {p}", file=sys.stderr)
    return EXIT_OK if not problems else EXIT_RUNTIME


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "plot": cmd_plot,
    "validate-layout": cmd_validate_layout,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        if args.print_config:
            sys.stdout.write(resolve_config(args).dump())
            return EXIT_OK
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
